//! Posterior statistics and the mutual-information and active-unit
//! estimates computed from them.

use std::io::{BufRead, Write};

use lvt_tensor::{Element, NoGradGuard, RngState};
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, Example};
use crate::error::{Error, Result};
use crate::model::VaeModel;

const SUMMARY_STREAM: u64 = 0x5077;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPosterior {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Posterior parameters of one datum, one entry per latent layer, taken
/// along the datum's own sampled chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub layers: Vec<LayerPosterior>,
}

impl PosteriorSummary {
    fn log_density(&self, z: &[Vec<f64>]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.layers
            .iter()
            .zip(z)
            .flat_map(|(l, zl)| l.mean.iter().zip(&l.log_var).zip(zl))
            .map(|((m, lv), x)| -0.5 * (ln_2pi + lv + (x - m).powi(2) * (-lv).exp()))
            .sum()
    }

    fn sample(&self, rng: &mut RngState) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                l.mean
                    .iter()
                    .zip(&l.log_var)
                    .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
                    .collect()
            })
            .collect()
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.layer == b.layer && a.mean.len() == b.mean.len() && a.log_var.len() == a.mean.len())
    }
}

/// Posterior summaries of `data`, encoded in chunks of `batch_size`.
pub fn posterior_summaries<T: Element>(
    model: &VaeModel<T>,
    data: &[Example],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PosteriorSummary>> {
    let _guard = NoGradGuard::new();
    let mut rng = RngState::new(seed).fork(SUMMARY_STREAM);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, model.config.max_len)?;
        let enc = model.encode_batch(&batch)?;
        let chain = model.posterior_chain(&enc, &mut rng)?;
        for i in 0..chunk.len() {
            let layers = chain
                .entries
                .iter()
                .map(|e| {
                    let q = e.posterior.as_ref().expect("posterior chain");
                    let p = q.dim();
                    let row = |t: &lvt_tensor::Tensor<T>| t.to_f64_vec()[i * p..(i + 1) * p].to_vec();
                    LayerPosterior {
                        layer: e.layer,
                        mean: row(&q.mean),
                        log_var: row(&q.log_var),
                    }
                })
                .collect();
            out.push(PosteriorSummary { layers });
        }
    }
    Ok(out)
}

fn check_batch(s: &[PosteriorSummary], what: &str) -> Result<()> {
    if s.len() < 2 {
        return Err(Error::Metric(format!("{what} needs at least two data")));
    }
    if s.iter().any(|x| !x.same_layout(&s[0])) {
        return Err(Error::Metric(format!("{what} over summaries with different layer layouts")));
    }
    Ok(())
}

/// `I(x; z)` from one chain sample per datum. Each datum's chain density is
/// the product of its per-layer Gaussians; the aggregate posterior is the
/// batch mixture, evaluated with log-sum-exp on the same samples.
pub fn mutual_information(summaries: &[PosteriorSummary], rng: &mut RngState) -> Result<f64> {
    check_batch(summaries, "mutual information")?;
    let b = summaries.len();
    let mut acc = 0.0;
    for (i, s) in summaries.iter().enumerate() {
        let z = s.sample(rng);
        let own = s.log_density(&z);
        let all: Vec<f64> = summaries.iter().map(|o| o.log_density(&z)).collect();
        let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let agg = max + all.iter().map(|a| (a - max).exp()).sum::<f64>().ln() - (b as f64).ln();
        if !(own.is_finite() && agg.is_finite()) {
            return Err(Error::Metric(format!("non-finite density for datum {i}")));
        }
        acc += own - agg;
    }
    Ok(acc / b as f64)
}

/// Per layer, the number of dimensions whose posterior mean has sample
/// variance (N - 1 denominator) above `delta`, averaged over layers.
pub fn active_units(summaries: &[PosteriorSummary], delta: f64) -> Result<f64> {
    check_batch(summaries, "active units")?;
    let n = summaries.len() as f64;
    let layers = summaries[0].layers.len();
    let mut total = 0usize;
    for l in 0..layers {
        for d in 0..summaries[0].layers[l].mean.len() {
            let mean = summaries.iter().map(|s| s.layers[l].mean[d]).sum::<f64>() / n;
            let var = summaries.iter().map(|s| (s.layers[l].mean[d] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            total += usize::from(var > delta);
        }
    }
    Ok(total as f64 / layers.max(1) as f64)
}

pub fn write_summaries<W: Write + ?Sized>(out: &mut W, summaries: &[PosteriorSummary]) -> Result<()> {
    for s in summaries {
        serde_json::to_writer(&mut *out, s)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_summaries<R: BufRead>(input: R) -> Result<Vec<PosteriorSummary>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
