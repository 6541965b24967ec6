//! Corpus BLEU, Self-BLEU and n-gram diversity over whitespace tokens.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n.max(1)).filter(move |_| n >= 1)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU on a 0..100 scale with uniform weights over 1..=max_n,
/// clipped counts, no smoothing and the closest-reference brevity penalty.
/// `references[i]` are the references of `candidates[i]`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<f64> {
    if candidates.is_empty() || candidates.iter().all(Vec::is_empty) {
        return Err(Error::Metric("BLEU of an empty candidate set".into()));
    }
    if references.len() != candidates.len() || references.iter().any(Vec::is_empty) {
        return Err(Error::Metric("BLEU needs at least one reference per candidate".into()));
    }
    if max_n == 0 {
        return Err(Error::Metric("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .expect("non-empty references");
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts(cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// BLEU with the same reference pool for every candidate, as in
/// unconditional generation.
pub fn bleu_against_pool(candidates: &[Vec<String>], pool: &[Vec<String>], max_n: usize) -> Result<f64> {
    let refs = vec![pool.to_vec(); candidates.len()];
    bleu(candidates, &refs, max_n)
}

/// Mean over samples of the BLEU of each sample against all the others.
pub fn self_bleu(samples: &[Vec<String>], max_n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric("Self-BLEU needs at least two samples".into()));
    }
    let mut acc = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let others: Vec<Vec<String>> = samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| o.clone())
            .collect();
        acc += if s.is_empty() {
            0.0
        } else {
            bleu(std::slice::from_ref(s), &[others], max_n)?
        };
    }
    Ok(acc / samples.len() as f64)
}

/// Distinct n-grams over all n-grams across `samples`.
pub fn dist_n(samples: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metric("n-gram order must be at least 1".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for g in ngrams(s, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Metric(format!("every sample is shorter than {n} tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean n-gram-set Jaccard similarity over unordered sample pairs. A pair
/// with no n-grams at all counts as 0.
pub fn jaccard_similarity(samples: &[Vec<String>], n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric("Jaccard similarity needs at least two samples".into()));
    }
    if n == 0 {
        return Err(Error::Metric("n-gram order must be at least 1".into()));
    }
    let sets: Vec<HashSet<&[String]>> = samples.iter().map(|s| ngrams(s, n).collect()).collect();
    let (mut acc, mut pairs, mut empty) = (0.0, 0usize, 0usize);
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let union = sets[i].union(&sets[j]).count();
            if union == 0 {
                empty += 1;
            } else {
                acc += sets[i].intersection(&sets[j]).count() as f64 / union as f64;
            }
            pairs += 1;
        }
    }
    if empty > 0 {
        log::warn!("{empty} sample pairs had no {n}-grams; counted as 0");
    }
    Ok(acc / pairs as f64)
}
