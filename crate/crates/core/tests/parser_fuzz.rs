//! Fuzzed synthesis responses: every well-formed scaffold must round-trip,
//! and no mutated one may panic the parser.

use std::panic;

use kdiag::remedy::{parse_math_preprocess, parse_response, ParsedExample, SynthesisStyle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WELL_FORMED: usize = 500;
const MUTATED: usize = 500;

const WORDS: &[&str] = &[
    "river", "stone", "quickly", "warm", "because", "tree", "lamp", "market", "storm", "paper", "glass",
    "child", "engine", "cloud", "bright", "salt", "winter", "coin", "forest", "noise", "bread", "seed",
];

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn example(rng: &mut ChaCha8Rng, style: SynthesisStyle) -> ParsedExample {
    let n = rng.gen_range(3..=5);
    let options: Vec<String> = match style {
        SynthesisStyle::Reasoning => (0..n).map(|i| format!("{} {}", sentence(rng, 1, 4), WORDS[i])).collect(),
        SynthesisStyle::Math => {
            let base = rng.gen_range(1..500);
            (0..n).map(|i| (base + 7 * i).to_string()).collect()
        }
    };
    ParsedExample {
        question: format!("{}?", sentence(rng, 3, 12)),
        answer_index: rng.gen_range(0..n),
        options,
        explanation: format!("{}.", sentence(rng, 4, 20)),
    }
}

/// Writes the scaffold with random cosmetic variation: label case, bold
/// markers, options inline or one per line, extra blank lines.
fn render(rng: &mut ChaCha8Rng, exs: &[ParsedExample], style: SynthesisStyle) -> String {
    let mut out = String::new();
    if rng.gen_bool(0.3) {
        out.push_str("Here are the examples you asked for.\n\n");
    }
    for ex in exs {
        let bold = rng.gen_bool(0.2);
        let upper = rng.gen_bool(0.2);
        let label = |name: &str| {
            let name = if upper { name.to_uppercase() } else { name.to_string() };
            if bold {
                format!("**{name}:**")
            } else {
                format!("{name}:")
            }
        };
        let letters: Vec<String> = (0..ex.options.len())
            .map(|i| format!("({}) {}", (b'A' + i as u8) as char, ex.options[i]))
            .collect();
        let options = if rng.gen_bool(0.5) {
            format!("{} {}", label("Options"), letters.join(" "))
        } else {
            format!("{}\n{}", label("Options"), letters.join("\n"))
        };
        let letter = (b'A' + ex.answer_index as u8) as char;
        let answer = match style {
            SynthesisStyle::Reasoning => format!("{} ({letter})", label("Answer")),
            SynthesisStyle::Math => format!("{} ({letter}) {}", label("Answer"), ex.options[ex.answer_index]),
        };
        out.push_str(&format!("{} {}\n", label("Question"), ex.question));
        match style {
            SynthesisStyle::Reasoning => {
                out.push_str(&format!("{options}\n{answer}\n{} {}\n", label("Explanation"), ex.explanation));
            }
            SynthesisStyle::Math => {
                out.push_str(&format!("{} {}\n{options}\n{answer}\n", label("Solution"), ex.explanation));
            }
        }
        for _ in 0..rng.gen_range(1..=3) {
            out.push('\n');
        }
    }
    out
}

fn mutate(rng: &mut ChaCha8Rng, text: &str) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for _ in 0..rng.gen_range(1..=4) {
        if lines.is_empty() {
            lines.push(String::new());
        }
        let i = rng.gen_range(0..lines.len());
        match rng.gen_range(0..9) {
            0 => {
                lines.remove(i);
            }
            1 => {
                let dup = lines[i].clone();
                lines.insert(i, dup);
            }
            2 => lines.shuffle(rng),
            3 => lines[i] = "Answer: (Z)".into(),
            4 => lines[i] = "Options: (A)".into(),
            5 => lines[i] = "Question:".into(),
            6 => lines[i] = "\u{0}\u{feff}ä漢字 (\u{301}".into(),
            7 => {
                let chars: Vec<char> = lines[i].chars().collect();
                let cut = rng.gen_range(0..=chars.len());
                lines[i] = chars[..cut].iter().collect();
            }
            _ => lines[i] = format!("Answer: ({}", "A".repeat(rng.gen_range(0..4))),
        }
    }
    let mut out = lines.join("\n");
    if rng.gen_bool(0.2) {
        let chars: Vec<char> = out.chars().collect();
        let cut = rng.gen_range(0..=chars.len());
        out = chars[..cut].iter().collect();
    }
    out
}

fn style_for(i: usize) -> SynthesisStyle {
    if i.is_multiple_of(2) {
        SynthesisStyle::Reasoning
    } else {
        SynthesisStyle::Math
    }
}

#[test]
fn well_formed_scaffolds_recover_every_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..WELL_FORMED {
        let style = style_for(i);
        let n = rng.gen_range(1..=6);
        let exs: Vec<ParsedExample> = (0..n).map(|_| example(&mut rng, style)).collect();
        let text = render(&mut rng, &exs, style);
        let (parsed, report) = parse_response(&text, n, style);
        assert!(report.is_clean(), "case {i}: {report:?}\n{text}");
        assert_eq!(parsed, exs, "case {i}\n{text}");
    }
}

#[test]
fn mutated_scaffolds_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..MUTATED {
        let style = style_for(i);
        let n = rng.gen_range(1..=6);
        let exs: Vec<ParsedExample> = (0..n).map(|_| example(&mut rng, style)).collect();
        let clean = render(&mut rng, &exs, style);
        let text = mutate(&mut rng, &clean);
        let result = panic::catch_unwind(|| parse_response(&text, n, style));
        let (parsed, report) = result.unwrap_or_else(|_| panic!("case {i} panicked on\n{text}"));
        assert!(parsed.len() <= n);
        assert_eq!(report.issues.len(), report.malformed);
        assert_eq!(report.found, parsed.len() + report.truncated);
        for ex in &parsed {
            assert!(ex.answer_index < ex.options.len());
        }
        assert!(panic::catch_unwind(|| parse_math_preprocess(&text)).is_ok(), "case {i}");
    }
}
