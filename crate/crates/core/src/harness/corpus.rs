//! Corpus ingestion and the bundled synthetic corpus.

use std::path::Path;

use lvt_tensor::RngState;
use serde::{Deserialize, Serialize};

use crate::batch::Example;
use crate::error::{Error, Result};
use crate::harness::tokenizer::{encode, truncate_bytes};

/// Fits an example into `max_len` positions, truncating the condition to at
/// most half the budget and the text to the rest. Returns whether anything
/// was cut.
pub fn fit_example(mut e: Example, max_len: usize) -> (Example, bool) {
    let mut cut = false;
    let text_budget = match e.condition.as_mut() {
        Some(c) => {
            let cmax = (max_len / 2).saturating_sub(1);
            if c.len() > cmax {
                truncate_bytes(c, cmax);
                cut = true;
            }
            max_len.saturating_sub(2 + c.len())
        }
        None => max_len.saturating_sub(2),
    };
    if e.text.len() > text_budget {
        truncate_bytes(&mut e.text, text_budget);
        cut = true;
    }
    (e, cut)
}

/// Parses one sample per line, or `source<TAB>target` lines when
/// `conditional`. Empty lines are skipped; over-long samples are truncated
/// with a warning.
pub fn parse_corpus(text: &str, conditional: bool, max_len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut truncated = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let e = if conditional {
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("line {}: expected source<TAB>target", n + 1)))?;
            Example {
                text: encode(tgt),
                condition: Some(encode(src)),
            }
        } else {
            Example::unconditional(encode(line))
        };
        let (e, cut) = fit_example(e, max_len);
        truncated += usize::from(cut);
        out.push(e);
    }
    if truncated > 0 {
        log::warn!("truncated {truncated} samples to max_len {max_len}");
    }
    if out.is_empty() {
        return Err(Error::Config("corpus has no samples".into()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, conditional: bool, max_len: usize) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, conditional, max_len)
}

const TOPICS: [(&str, [&str; 4]); 4] = [
    ("food", ["soup", "bread", "cake", "tea"]),
    ("animals", ["cat", "dog", "bird", "fox"]),
    ("town", ["bus", "park", "shop", "road"]),
    ("weather", ["rain", "snow", "wind", "sun"]),
];

const SENTIMENT: [[&str; 3]; 2] = [["good", "nice", "great"], ["bad", "awful", "grim"]];

/// Latent factors behind one synthetic sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factors {
    pub topic: usize,
    pub sentiment: usize,
    pub template: usize,
}

fn render(f: Factors, rng: &mut RngState) -> String {
    let words = &TOPICS[f.topic].1;
    let a = words[rng.below(words.len())];
    let b = words[rng.below(words.len())];
    let adj = SENTIMENT[f.sentiment][rng.below(3)];
    match f.template {
        0 => format!("the {a} is {adj}."),
        1 => format!("{a} and {b} are {adj}."),
        _ => format!("was the {a} {adj}?"),
    }
}

/// Templated sentences whose words are driven by a topic, a sentiment and a
/// template factor, all drawn uniformly.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<(Factors, String)> {
    let mut rng = RngState::new(seed).fork(0x5E7);
    (0..n)
        .map(|_| {
            let f = Factors {
                topic: rng.below(TOPICS.len()),
                sentiment: rng.below(2),
                template: rng.below(3),
            };
            (f, render(f, &mut rng))
        })
        .collect()
}

pub fn synthetic_examples(n: usize, seed: u64) -> Vec<Example> {
    synthetic_corpus(n, seed)
        .into_iter()
        .map(|(_, s)| Example::unconditional(encode(&s)))
        .collect()
}

/// Conditional pairs: the source names topic and sentiment, the target is a
/// sentence with those factors.
pub fn synthetic_pairs(n: usize, seed: u64) -> Vec<Example> {
    synthetic_corpus(n, seed)
        .into_iter()
        .map(|(f, s)| Example {
            text: encode(&s),
            condition: Some(encode(&format!("{} {}", TOPICS[f.topic].0, ["pos", "neg"][f.sentiment]))),
        })
        .collect()
}
