//! Curriculum ordering of synthesized examples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RemedyError, SynthExample};
use crate::diagnose::{Deficiency, Severity};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// One line of the exported training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub example_id: String,
    pub input: String,
    pub output: String,
    pub re: f64,
    pub group: Severity,
    pub deficiency_ref: String,
    pub ordinal: u32,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl CurriculumManifest {
    /// Line-delimited JSON, one entry per line.
    pub fn to_jsonl(&self) -> serde_json::Result<String> {
        crate::jsonl::to_string(&self.entries)
    }
}

/// Sorts examples ascending by (source RE, deficiency id, ordinal), with the
/// example id as a final tiebreak so the order is total. Every example must
/// point at a known deficiency.
pub fn order_curriculum(
    examples: &[SynthExample],
    deficiencies: &[Deficiency],
) -> Result<CurriculumManifest, RemedyError> {
    let by_ref: BTreeMap<String, &Deficiency> = deficiencies.iter().map(|d| (d.id(), d)).collect();
    let mut entries = examples
        .iter()
        .map(|ex| {
            let d = by_ref
                .get(&ex.provenance.deficiency_ref)
                .ok_or_else(|| RemedyError::DanglingProvenance {
                    example_id: ex.example_id.clone(),
                    deficiency_ref: ex.provenance.deficiency_ref.clone(),
                })?;
            Ok(ManifestEntry {
                example_id: ex.example_id.clone(),
                input: ex.input(),
                output: ex.output(),
                re: d.re,
                group: d.group,
                deficiency_ref: ex.provenance.deficiency_ref.clone(),
                ordinal: ex.provenance.ordinal,
                format_version: MANIFEST_FORMAT_VERSION,
            })
        })
        .collect::<Result<Vec<_>, RemedyError>>()?;
    entries.sort_by(|a, b| {
        a.re.total_cmp(&b.re)
            .then_with(|| a.deficiency_ref.cmp(&b.deficiency_ref))
            .then_with(|| a.ordinal.cmp(&b.ordinal))
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    Ok(CurriculumManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remedy::{Provenance, SynthesisStyle};

    fn def(id: &str, re: f64) -> Deficiency {
        Deficiency {
            query_id: id.into(),
            knowledge_id: "k".into(),
            re,
            group: Severity::Easy,
            budget: 1,
            direction: None,
            p: vec![0.5, 0.5],
            q: vec![0.5, 0.5],
        }
    }

    fn example(def_ref: &str, ordinal: u32) -> SynthExample {
        SynthExample {
            example_id: format!("{def_ref}#{ordinal}"),
            style: SynthesisStyle::Reasoning,
            question: format!("q {def_ref} {ordinal}"),
            options: vec!["a".into(), "b".into(), "c".into()],
            answer_index: 0,
            explanation: "e".into(),
            provenance: Provenance {
                deficiency_ref: def_ref.into(),
                job_id: "j".into(),
                ordinal,
            },
        }
    }

    #[test]
    fn ascending_by_re() {
        let defs = [def("x", 0.9), def("y", 0.2), def("z", 0.5)];
        let exs = [example("x/k", 0), example("y/k", 0), example("z/k", 0)];
        let m = order_curriculum(&exs, &defs).unwrap();
        let res: Vec<f64> = m.entries.iter().map(|e| e.re).collect();
        assert_eq!(res, vec![0.2, 0.5, 0.9]);
    }

    #[test]
    fn ordinals_kept_within_deficiency() {
        let defs = [def("x", 0.4)];
        let exs = [example("x/k", 1), example("x/k", 0)];
        let m = order_curriculum(&exs, &defs).unwrap();
        assert_eq!(m.entries[0].ordinal, 0);
        assert_eq!(m.entries[1].ordinal, 1);
    }

    #[test]
    fn shuffled_input_gives_identical_bytes() {
        let defs = [def("a", 0.3), def("b", 0.3), def("c", 0.1)];
        let exs = vec![example("a/k", 0), example("b/k", 1), example("b/k", 0), example("c/k", 0)];
        let mut rev = exs.clone();
        rev.reverse();
        let one = order_curriculum(&exs, &defs).unwrap().to_jsonl().unwrap();
        let two = order_curriculum(&rev, &defs).unwrap().to_jsonl().unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn dangling_provenance_is_an_error() {
        let err = order_curriculum(&[example("nope/k", 0)], &[def("x", 0.2)]).unwrap_err();
        assert!(matches!(err, RemedyError::DanglingProvenance { .. }));
    }
}
