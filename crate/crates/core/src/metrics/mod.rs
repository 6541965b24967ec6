//! Representation, likelihood, quality and diversity metrics.

mod likelihood;
mod representation;
mod text;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use likelihood::{iw_log_likelihood, log_mean_exp, perplexity, perplexity_from, LikelihoodReport};
pub use representation::{
    active_units, mutual_information, posterior_summaries, read_summaries, write_summaries, LayerPosterior,
    PosteriorSummary,
};
pub use text::{bleu, bleu_against_pool, dist_n, jaccard_similarity, self_bleu, words};

pub const DEFAULT_IW_SAMPLES: usize = 10;
pub const DEFAULT_AU_THRESHOLD: f64 = 0.2;
pub const DEFAULT_REFERENCE_POOL: usize = 500;

/// One evaluation row. Generation metrics are absent when no samples were
/// scored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ppl: Option<f64>,
    pub elbo: Option<f64>,
    pub kl: Option<f64>,
    pub mi: Option<f64>,
    pub au: Option<f64>,
    pub bleu: Option<f64>,
    pub self_bleu: Option<f64>,
    pub dist_n: BTreeMap<usize, f64>,
    pub jaccard: Option<f64>,
    pub sample_count: usize,
}

const DIST_ORDERS: [usize; 2] = [1, 2];

impl MetricsReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["ppl", "elbo", "kl", "mi", "au", "bleu", "self_bleu"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend(DIST_ORDERS.iter().map(|n| format!("dist_{n}")));
        cols.push("jaccard".into());
        cols.push("sample_count".into());
        cols.join(",")
    }

    /// Values in [`Self::csv_header`] order; missing values are empty cells.
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut cols: Vec<String> = [self.ppl, self.elbo, self.kl, self.mi, self.au, self.bleu, self.self_bleu]
            .into_iter()
            .map(cell)
            .collect();
        cols.extend(DIST_ORDERS.iter().map(|n| cell(self.dist_n.get(n).copied())));
        cols.push(cell(self.jaccard));
        cols.push(self.sample_count.to_string());
        cols.join(",")
    }

    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", Self::csv_header())?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }

    pub fn write_json<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)?;
        writeln!(out)?;
        Ok(())
    }
}

/// Fills the generation fields of `report` from whitespace-tokenised
/// samples. BLEU is skipped when `references` is empty.
pub fn score_samples(report: &mut MetricsReport, samples: &[String], references: &[String]) -> Result<()> {
    let toks: Vec<Vec<String>> = samples.iter().map(|s| words(s)).collect();
    report.sample_count = samples.len();
    if !references.is_empty() && toks.iter().any(|t| !t.is_empty()) {
        let pool: Vec<Vec<String>> = references.iter().take(DEFAULT_REFERENCE_POOL).map(|s| words(s)).collect();
        report.bleu = Some(bleu_against_pool(&toks, &pool, 4)?);
    }
    if toks.len() >= 2 {
        report.self_bleu = Some(self_bleu(&toks, 4)?);
        report.jaccard = Some(jaccard_similarity(&toks, 1)?);
    }
    for n in DIST_ORDERS {
        if let Ok(v) = dist_n(&toks, n) {
            report.dist_n.insert(n, v);
        }
    }
    Ok(())
}
