//! Deterministic demo corpus for the mock backends.
//!
//! Produces a fact file, a query file, a mock script and a config that
//! together drive every stage offline. The same seed always yields the same
//! bytes; the committed copy under `fixtures/` is checked against a fresh
//! generation in the test suite.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::Query;
use crate::hashing::hash_u64;
use crate::scorer::{option_letter, MockScript, ScriptedGeneration};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const SCRIPT_FILE: &str = "mock_script.json";
pub const CONFIG_FILE: &str = "kdiag.toml";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub labeled_queries: usize,
    pub math_queries: usize,
    /// Share of labeled queries the scripted model answers wrongly.
    pub wrong_rate: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 7,
            labeled_queries: 200,
            math_queries: 8,
            wrong_rate: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub facts_jsonl: String,
    pub queries_jsonl: String,
    pub script: MockScript,
    pub config_toml: String,
    /// Labeled queries as ingestion will see them.
    pub queries: Vec<Query>,
    /// Ids the scripted model answers wrongly or unparseably.
    pub truth: Vec<String>,
}

const SUBJECTS: [&str; 20] = [
    "Tom", "The farmer", "Anna", "The old bridge", "The city", "My neighbor", "The baker", "The river",
    "Lucy", "The school", "The engine", "Our garden", "The hiker", "The company", "The child", "The lake",
    "Ming", "The factory", "The orchestra", "The patient",
];

/// (cause clause, effect clause, general fact linking the two).
const EVENTS: [(&str, &str, &str); 16] = [
    ("left the ice cream in the sun", "it melted into a puddle", "Heat turns solid ice cream into liquid."),
    ("skipped breakfast and lunch", "felt weak by the afternoon", "Going without food lowers blood sugar and energy."),
    ("forgot to water the plants for weeks", "the leaves withered", "Plants wilt and dry out without water."),
    ("stayed up all night", "struggled to focus the next day", "Lack of sleep impairs attention and memory."),
    ("was hit by days of heavy rain", "flooded in several places", "Prolonged heavy rainfall raises water levels and causes floods."),
    ("left the iron bars outside in humid air", "rust appeared on them", "Iron oxidizes into rust when exposed to moisture and oxygen."),
    ("ran the machine without oil", "it overheated and seized", "Lubrication reduces friction, and friction produces heat."),
    ("planted seeds in spring", "saw sprouts a few weeks later", "Seeds germinate when given warmth and moisture."),
    ("practiced the piano every day", "played the piece without mistakes", "Repeated practice strengthens skills."),
    ("cut down most of the trees on the hill", "suffered landslides after storms", "Tree roots hold soil in place on slopes."),
    ("put a metal spoon in boiling soup", "found the handle too hot to hold", "Metals conduct heat efficiently."),
    ("caught a cold virus", "had a runny nose and a sore throat", "Cold viruses infect the upper respiratory tract."),
    ("raised prices sharply", "lost many of its customers", "Demand usually falls when prices rise."),
    ("dropped a glass onto the stone floor", "it shattered into pieces", "Glass is brittle and breaks under sudden impact."),
    ("added salt to the icy road", "the ice melted quickly", "Salt lowers the freezing point of water."),
    ("released too much waste water", "saw fish die downstream", "Pollution reduces the oxygen available to aquatic life."),
];

const FILLER_FACTS: [&str; 12] = [
    "Water boils at 100 degrees Celsius at sea level.",
    "The moon orbits the Earth roughly once a month.",
    "Bees pollinate many flowering plants.",
    "Sound travels faster in water than in air.",
    "Muscles grow stronger with regular exercise.",
    "Copper is a good conductor of electricity.",
    "Clouds form when water vapor condenses.",
    "Vaccines train the immune system to recognize pathogens.",
    "Wind erosion shapes desert landscapes over time.",
    "Photosynthesis converts light energy into chemical energy.",
    "Bread rises because yeast produces carbon dioxide.",
    "Friction between surfaces slows moving objects.",
];

const MATH_ITEMS: [(&str, u32, u32); 8] = [
    ("A shop sells pencils for {a} cents each. How many cents do {b} pencils cost?", 3, 14),
    ("Sara has {a} apples and buys {b} more. How many apples does she have now?", 12, 9),
    ("A train travels {a} km every hour. How far does it go in {b} hours?", 60, 3),
    ("There are {a} students split evenly into {b} teams. How many students are on each team?", 24, 4),
    ("Leo reads {a} pages a day. How many pages does he read in {b} days?", 15, 6),
    ("A tank holds {a} liters and {b} liters leak out. How many liters remain?", 80, 35),
    ("Each box has {a} eggs. How many eggs are in {b} boxes?", 12, 7),
    ("A rope is {a} meters long and is cut into pieces of {b} meters. How many pieces are there?", 45, 5),
];

fn fact_line(text: &str, confidence: f64, source: &str) -> String {
    json!({"text": text, "confidence": confidence, "source": source}).to_string()
}

/// Builds the fixture in memory.
pub fn generate(spec: &FixtureSpec) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut facts = Vec::new();
    for (i, (_, _, general)) in EVENTS.iter().enumerate() {
        facts.push(fact_line(general, 0.95, "fixture:event"));
        for s in SUBJECTS {
            let (cause, effect, _) = EVENTS[i];
            let text = format!("When {} {cause}, {effect}.", s.to_lowercase());
            // one fact in six is below the default confidence cut
            let conf = if rng.gen_ratio(1, 6) { rng.gen_range(0.3..0.69) } else { rng.gen_range(0.7..1.0) };
            facts.push(fact_line(&text, (conf * 100.0_f64).round() / 100.0, "fixture:instance"));
        }
    }
    for f in FILLER_FACTS {
        facts.push(fact_line(f, 0.9, "fixture:filler"));
    }
    // near-duplicates that collapse to an existing fact
    facts.push(fact_line("Heat turns  solid ice cream   into liquid.", 0.9, "fixture:dup"));
    facts.push(fact_line("Metals conduct heat efficiently.", 0.8, "fixture:dup"));
    // malformed records
    facts.push("{\"text\": \"truncated record\"".to_string());
    facts.push(json!({"text": "no confidence given"}).to_string());
    facts.push(json!({"text": "confidence out of range", "confidence": 1.7}).to_string());
    facts.push(json!({"text": "   ", "confidence": 0.9}).to_string());
    facts.shuffle(&mut rng);

    let mut query_lines = Vec::new();
    let mut queries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    while queries.len() < spec.labeled_queries {
        let s = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
        let e = rng.gen_range(0..EVENTS.len());
        let (cause, effect, _) = EVENTS[e];
        let ask_effect = rng.gen_bool(0.5);
        let n_options = rng.gen_range(2..=4);
        let mut others: Vec<usize> = (0..EVENTS.len()).filter(|&j| j != e).collect();
        others.shuffle(&mut rng);
        let pick = |j: usize| if ask_effect { EVENTS[j].1 } else { EVENTS[j].0 };
        let mut options: Vec<String> = others[..n_options - 1].iter().map(|&j| pick(j).to_string()).collect();
        let gold = rng.gen_range(0..n_options);
        options.insert(gold, pick(e).to_string());
        let question = if ask_effect {
            format!("{s} {cause}. What happened as a result?")
        } else {
            format!("{s} {effect}. What was the most likely cause?")
        };
        let tags = vec!["e-care".to_string()];
        let Ok(q) = Query::new(&question, options.clone(), Some(gold), tags.clone()) else {
            continue;
        };
        if !seen.insert(q.query_id.clone()) {
            continue;
        }
        query_lines.push(json!({"question": question, "options": options, "label": gold, "tags": tags}).to_string());
        queries.push(q);
    }
    // rejected records
    query_lines.push(json!({"question": "Which option?", "options": ["only one"], "label": 0}).to_string());
    query_lines.push(json!({"question": "Label out of range?", "options": ["a", "b"], "label": 5}).to_string());
    query_lines.push("not json at all".to_string());
    if let Some(first) = query_lines.first().cloned() {
        query_lines.push(first);
    }
    for (i, (template, a, b)) in MATH_ITEMS.iter().take(spec.math_queries).enumerate() {
        let a = a + i as u32;
        let question = template.replace("{a}", &a.to_string()).replace("{b}", &b.to_string());
        query_lines.push(json!({"question": question, "tags": ["gsm8k"]}).to_string());
    }

    let seed_bytes = spec.seed.to_le_bytes();
    let mut truth = Vec::new();
    let mut generations = Vec::new();
    let threshold = (spec.wrong_rate * 1000.0) as u64;
    for q in &queries {
        let h = hash_u64([&seed_bytes[..], b"truth", q.query_id.as_bytes()]);
        let gold = q.gold_label.unwrap_or(0);
        let text = if h % 1000 < threshold {
            truth.push(q.query_id.clone());
            if h % 17 == 0 {
                "I cannot decide between these options.".to_string()
            } else {
                let wrong = (gold + 1 + (h as usize / 1000) % (q.options.len() - 1)) % q.options.len();
                format!("Considering each option in turn, the answer is ({}).", option_letter(wrong))
            }
        } else {
            format!("The answer is ({}).", option_letter(gold))
        };
        generations.push(ScriptedGeneration {
            key: q.query_id.clone(),
            text,
        });
    }
    truth.sort();
    let script = MockScript {
        name: Some("fixture-mock".into()),
        seed: Some(spec.seed),
        scores: Vec::new(),
        generations,
    };

    let config_toml = format!(
        "seed = {seed}\n\n\
         [paths]\n\
         facts = \"{FACTS_FILE}\"\n\
         queries = \"{QUERIES_FILE}\"\n\
         out_dir = \"out\"\n\n\
         [retrieval]\n\
         m = 4\n\
         min_confidence = 0.7\n\n\
         [backends.scorer]\n\
         kind = \"mock\"\n\
         script = \"{SCRIPT_FILE}\"\n\n\
         [backends.generator]\n\
         kind = \"mock\"\n\n\
         [backends.embedder]\n\
         kind = \"stub\"\n\
         dim = 64\n",
        seed = spec.seed
    );

    let mut facts_jsonl = facts.join("\n");
    facts_jsonl.push('\n');
    let mut queries_jsonl = query_lines.join("\n");
    queries_jsonl.push('\n');
    Fixture {
        facts_jsonl,
        queries_jsonl,
        script,
        config_toml,
        queries,
        truth,
    }
}

impl Fixture {
    pub fn script_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.script).expect("mock script serializes");
        s.push('\n');
        s
    }

    /// (file name, contents) for every file the fixture consists of.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            (FACTS_FILE, self.facts_jsonl.clone()),
            (QUERIES_FILE, self.queries_jsonl.clone()),
            (SCRIPT_FILE, self.script_json()),
            (CONFIG_FILE, self.config_toml.clone()),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in self.files() {
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}
