//! Pipeline configuration.
//!
//! A TOML document whose every key is optional; missing keys take the
//! defaults below (m = 4, τ = 0.1, min confidence 0.7, the standard group
//! table). Relative paths resolve against the config file's directory.
//! Auth tokens are never stored here, only the names of environment
//! variables holding them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::DEFAULT_MIN_CONFIDENCE;
use crate::diagnose::{
    Band, GroupTable, DEFAULT_CLAMP_FLOOR, DEFAULT_DIRECTION_BAND, DEFAULT_TAU,
};
use crate::evalkit::UnparseablePolicy;
use crate::remedy::StyleMap;
use crate::retrieval::QueryText;

pub const DEFAULT_M: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub facts: PathBuf,
    pub queries: PathBuf,
    /// Output directory; `--out-dir` overrides it.
    pub out_dir: PathBuf,
    /// Cache directory; defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Prompt overrides: `synthesis_reasoning.txt`, `synthesis_math.txt` and
    /// `preprocess_math.txt` at the top, scoring templates as
    /// `scoring/<id>.txt`.
    pub templates_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            facts: "facts.jsonl".into(),
            queries: "queries.jsonl".into(),
            out_dir: "out".into(),
            cache_dir: None,
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub min_confidence: f64,
    pub m: usize,
    pub query_text: QueryText,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            m: DEFAULT_M,
            query_text: QueryText::Question,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub tau: f64,
    /// Custom severity bands. When absent the standard table is used with
    /// its first band starting at `tau`.
    pub groups: Option<Vec<Band>>,
    pub clamp_floor: f64,
    pub direction_band: f64,
    pub length_normalize: bool,
    pub template: String,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            tau: DEFAULT_TAU,
            groups: None,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
            direction_band: DEFAULT_DIRECTION_BAND,
            length_normalize: false,
            template: "plain".into(),
        }
    }
}

impl DiagnoseConfig {
    pub fn group_table(&self) -> GroupTable {
        match &self.groups {
            Some(bands) => GroupTable {
                tau: self.tau,
                bands: bands.clone(),
            },
            None => {
                let mut t = GroupTable {
                    tau: self.tau,
                    ..GroupTable::default()
                };
                t.bands[0].lower = self.tau;
                t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemedyConfig {
    pub default_style: String,
    /// Dataset tag → "reasoning" | "math".
    pub styles: BTreeMap<String, String>,
    pub max_attempts: u32,
    /// Warn when the planned total differs from this.
    pub expected_total: Option<u64>,
}

impl Default for RemedyConfig {
    fn default() -> Self {
        let styles = StyleMap::default()
            .by_tag
            .into_iter()
            .map(|(k, v)| {
                let name = serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string));
                (k, name.unwrap_or_default())
            })
            .collect();
        RemedyConfig {
            default_style: "reasoning".into(),
            styles,
            max_attempts: 3,
            expected_total: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub perplexity_length_normalize: bool,
    /// Random baseline sample size; defaults to the truth-set size.
    pub random_sample_size: Option<usize>,
    pub unparseable: UnparseablePolicy,
    pub template: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            perplexity_length_normalize: true,
            random_sample_size: None,
            unparseable: UnparseablePolicy::FlagAsWrong,
            template: "plain".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
    /// Local hashed bag-of-words embedder.
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_base_ms: u64,
    /// Mock backends: script file. Scripted entries win over the seed.
    pub script: Option<PathBuf>,
    /// Mock and stub backends; falls back to the global seed.
    pub seed: Option<u64>,
    /// Stub embedder dimension.
    pub dim: usize,
    pub name: Option<String>,
}

impl BackendConfig {
    fn with_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint: None,
            model: None,
            auth_env: None,
            max_in_flight: 4,
            timeout_secs: 60,
            retries: 3,
            retry_base_ms: 200,
            script: None,
            seed: None,
            dim: 64,
            name: None,
        }
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::with_kind(BackendKind::Mock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub scorer: BackendConfig,
    pub generator: BackendConfig,
    pub embedder: BackendConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            scorer: BackendConfig::default(),
            generator: BackendConfig::default(),
            embedder: BackendConfig::with_kind(BackendKind::Stub),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed for every seeded component without its own.
    pub seed: u64,
    pub paths: PathsConfig,
    pub retrieval: RetrievalConfig,
    pub diagnose: DiagnoseConfig,
    pub remedy: RemedyConfig,
    pub eval: EvalConfig,
    pub backends: BackendsConfig,
}

impl PipelineConfig {
    /// Parses and validates TOML text. `base` anchors relative paths.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, Vec<String>> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| vec![e.to_string()])?;
        cfg.resolve_paths(base);
        let errors = cfg.problems();
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.facts);
        join(&mut self.paths.queries);
        join(&mut self.paths.out_dir);
        for p in [&mut self.paths.cache_dir, &mut self.paths.templates_dir]
            .into_iter()
            .flatten()
        {
            join(p);
        }
        for b in [
            &mut self.backends.scorer,
            &mut self.backends.generator,
            &mut self.backends.embedder,
        ] {
            if let Some(p) = b.script.as_mut() {
                join(p);
            }
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("cache"))
    }

    pub fn style_map(&self) -> Result<StyleMap, String> {
        StyleMap::from_strings(&self.remedy.default_style, &self.remedy.styles).map_err(|e| e.to_string())
    }

    /// Every rule violation, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let r = &self.retrieval;
        if !(0.0..=1.0).contains(&r.min_confidence) {
            errors.push(format!("retrieval.min_confidence must be in [0, 1], got {}", r.min_confidence));
        }
        if r.m < 1 {
            errors.push("retrieval.m must be at least 1".to_string());
        }
        let d = &self.diagnose;
        if !d.tau.is_finite() || d.tau < 0.0 {
            errors.push(format!("diagnose.tau must be nonnegative, got {}", d.tau));
        } else {
            errors.extend(d.group_table().problems().into_iter().map(|e| format!("diagnose.groups: {e}")));
        }
        if !(d.clamp_floor > 0.0 && d.clamp_floor < 1e-3) {
            errors.push(format!("diagnose.clamp_floor must be in (0, 1e-3), got {}", d.clamp_floor));
        }
        if !d.direction_band.is_finite() || d.direction_band < 0.0 {
            errors.push(format!("diagnose.direction_band must be nonnegative, got {}", d.direction_band));
        }
        if let Err(e) = self.style_map() {
            errors.push(format!("remedy: {e}"));
        }
        if self.remedy.max_attempts < 1 {
            errors.push("remedy.max_attempts must be at least 1".to_string());
        }
        for (name, b, allowed) in [
            ("scorer", &self.backends.scorer, [BackendKind::Mock, BackendKind::Http]),
            ("generator", &self.backends.generator, [BackendKind::Mock, BackendKind::Http]),
            ("embedder", &self.backends.embedder, [BackendKind::Stub, BackendKind::Http]),
        ] {
            if !allowed.contains(&b.kind) {
                errors.push(format!("backends.{name}.kind {:?} is not supported here", b.kind));
            }
            if b.kind == BackendKind::Http {
                if b.endpoint.as_deref().is_none_or(str::is_empty) {
                    errors.push(format!("backends.{name}.endpoint is required for http"));
                }
                if b.model.as_deref().is_none_or(str::is_empty) {
                    errors.push(format!("backends.{name}.model is required for http"));
                }
            }
            if b.max_in_flight < 1 {
                errors.push(format!("backends.{name}.max_in_flight must be at least 1"));
            }
            if b.timeout_secs < 1 {
                errors.push(format!("backends.{name}.timeout_secs must be at least 1"));
            }
            if b.kind == BackendKind::Stub && b.dim < 1 {
                errors.push(format!("backends.{name}.dim must be at least 1"));
            }
        }
        errors
    }

    /// Dotted keys whose resolved value differs from the default.
    pub fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (Ok(ours), Ok(defaults)) = (
            serde_json::to_value(self),
            serde_json::to_value(PipelineConfig::default()),
        ) else {
            return out;
        };
        diff("", &ours, &defaults, &mut out);
        out
    }
}

fn diff(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                diff(&key, v, y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("{prefix} = {a}")),
        _ => {}
    }
}

/// Loads, resolves and validates a config file, logging every override.
/// `None` yields the defaults anchored at the working directory.
pub fn validate_config(path: Option<&Path>) -> Result<PipelineConfig, Vec<String>> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| vec![format!("{}: {e}", p.display())])?;
            let base = p.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
            PipelineConfig::from_toml_str(&text, base)?
        }
        None => PipelineConfig::from_toml_str("", Path::new("."))?,
    };
    for o in cfg.overrides() {
        if !o.starts_with("paths.") && !o.contains(".script = ") {
            log::info!("config override: {o}");
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig, Vec<String>> {
        PipelineConfig::from_toml_str(text, Path::new("/base"))
    }

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.retrieval.m, 4);
        assert_eq!(cfg.retrieval.min_confidence, 0.7);
        assert_eq!(cfg.diagnose.tau, 0.1);
        assert_eq!(cfg.diagnose.group_table(), GroupTable::default());
        assert_eq!(cfg.paths.facts, Path::new("/base/facts.jsonl"));
        assert_eq!(cfg.cache_dir(), Path::new("/base/out/cache"));
    }

    #[test]
    fn gap_in_groups_is_reported() {
        let text = r#"
[[diagnose.groups]]
lower = 0.1
upper = 0.4
group = "Easy"
budget = 1
[[diagnose.groups]]
lower = 0.5
group = "Normal"
budget = 2
"#;
        let errs = parse(text).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("intervals not contiguous")), "{errs:?}");
    }

    #[test]
    fn several_errors_in_one_pass() {
        let errs = parse("[retrieval]\nm = 0\n[diagnose]\ntau = -1.0\n").unwrap_err();
        assert!(errs.iter().any(|e| e.contains("retrieval.m")));
        assert!(errs.iter().any(|e| e.contains("diagnose.tau")));
    }

    #[test]
    fn unknown_keys_and_styles_rejected() {
        assert!(parse("[retrieval]\nmm = 3\n").is_err());
        let errs = parse("[remedy.styles]\nfoo = \"poetry\"\n").unwrap_err();
        assert!(errs[0].contains("unknown style poetry"));
        let errs = parse("[backends.scorer]\nkind = \"http\"\n").unwrap_err();
        assert_eq!(errs.len(), 2);
    }

    #[test]
    fn tau_override_moves_first_band() {
        let cfg = parse("[diagnose]\ntau = 0.2\n").unwrap();
        let t = cfg.diagnose.group_table();
        assert_eq!(t.classify(0.15), None);
        assert!(t.classify(0.2).is_some());
        let changed: Vec<String> = cfg.overrides().into_iter().filter(|o| !o.starts_with("paths.")).collect();
        assert_eq!(changed, vec!["diagnose.tau = 0.2".to_string()]);
    }
}
