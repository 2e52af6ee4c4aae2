//! JSON-lines corpus loading and the built-in synthetic sentiment generator.
//!
//! Corpus format: UTF-8, one example per line, `{"label": int, "text": str}`;
//! lines starting with '#' are ignored.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Line {
    label: usize,
    text: String,
}

pub fn load_corpus_str(content: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 1)))?;
        out.push((parsed.label, parsed.text));
    }
    if out.is_empty() {
        return Err(Error::Input("corpus has no examples".into()));
    }
    Ok(out)
}

pub fn load_corpus(path: &std::path::Path) -> Result<Vec<(usize, String)>> {
    load_corpus_str(&std::fs::read_to_string(path)?)
}

const POSITIVE: &[&str] = &[
    "great", "wonderful", "excellent", "superb", "delightful", "charming", "brilliant",
    "enjoyable",
];
const NEGATIVE: &[&str] = &[
    "awful", "terrible", "dreadful", "boring", "horrible", "tedious", "disappointing", "dull",
];
const DISTRACTORS: &[&str] = &[
    "the", "movie", "film", "plot", "actor", "scene", "story", "director", "camera", "script",
    "music", "ending", "character", "dialogue", "screen", "theater", "night", "week", "ticket",
    "review", "people", "audience", "moment", "studio", "series", "sequel", "cast", "role",
    "stage", "shot", "cut", "frame", "sound", "light", "color", "mood", "pace", "tone", "style",
    "genre",
];

/// Generates a binary sentiment corpus: label drawn from a fair coin, one to
/// three sentiment keywords of the labeled polarity planted among distractor
/// words. A bag-of-words rule on the keyword lists classifies it perfectly.
pub fn generate_corpus(size: usize, seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = String::new();
    out.push_str("# synthetic sentiment corpus\n");
    out.push_str(&format!("# generator: seed={seed}, size={size}\n"));
    out.push_str(
        "# rule: label ~ fair coin; 1-3 keywords of the labeled polarity planted among 4-9 distractor words\n",
    );
    out.push_str(&format!("# positive keywords: {POSITIVE:?}\n"));
    out.push_str(&format!("# negative keywords: {NEGATIVE:?}\n"));
    for _ in 0..size {
        let label = usize::from(rng.gen_bool(0.5));
        let keywords = if label == 1 { POSITIVE } else { NEGATIVE };
        let n_dist = rng.gen_range(4..=9);
        let n_kw = rng.gen_range(1..=3);
        let mut words: Vec<&str> = (0..n_dist)
            .map(|_| *DISTRACTORS.choose(&mut rng).unwrap())
            .collect();
        for _ in 0..n_kw {
            words.push(keywords.choose(&mut rng).unwrap());
        }
        words.shuffle(&mut rng);
        let text = words.join(" ");
        out.push_str(&serde_json::json!({"label": label, "text": text}).to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(generate_corpus(10, 42), generate_corpus(10, 42));
        assert_ne!(generate_corpus(10, 42), generate_corpus(10, 43));
    }

    #[test]
    fn every_line_parses_and_labels_are_balanced() {
        let content = generate_corpus(1000, 7);
        let corpus = load_corpus_str(&content).unwrap();
        assert_eq!(corpus.len(), 1000);
        let pos = corpus.iter().filter(|(l, _)| *l == 1).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&pos), "balance {pos}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let corpus =
            load_corpus_str("# header\n\n{\"label\": 0, \"text\": \"a b\"}\n").unwrap();
        assert_eq!(corpus, vec![(0, "a b".to_string())]);
    }

    #[test]
    fn malformed_line_is_input_error() {
        assert!(load_corpus_str("{\"label\": \"x\"}").is_err());
    }
}
