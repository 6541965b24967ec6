//! Importance-weighted log-likelihood and perplexity.

use lvt_tensor::{Element, RngState};
use serde::{Deserialize, Serialize};

use crate::batch::Example;
use crate::error::{Error, Result};
use crate::model::VaeModel;

const IW_STREAM: u64 = 0x1A3E;

/// `log(mean(exp(w)))` computed stably.
pub fn log_mean_exp(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::Metric("importance estimate needs at least one weight".into()));
    }
    if let Some(w) = log_w.iter().find(|w| !w.is_finite()) {
        return Err(Error::Metric(format!("non-finite importance weight {w}; posterior variance collapsed?")));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_w.iter().map(|w| (w - max).exp()).sum();
    Ok(max + sum.ln() - (log_w.len() as f64).ln())
}

/// `L_k` of one example from `k` full-chain posterior samples.
pub fn iw_log_likelihood<T: Element>(model: &VaeModel<T>, example: &Example, k: usize, rng: &mut RngState) -> Result<f64> {
    if k == 0 {
        return Err(Error::Metric("importance sample count must be at least 1".into()));
    }
    log_mean_exp(&model.log_weights(example, k, rng)?)
}

/// Dataset likelihood summary. Token counts include EOS and exclude BOS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub log_likelihood: f64,
    pub tokens: usize,
    pub ppl: f64,
}

/// `exp(-sum L / sum n)`.
pub fn perplexity_from(log_likelihoods: &[f64], tokens: &[usize]) -> Result<LikelihoodReport> {
    if log_likelihoods.is_empty() || log_likelihoods.len() != tokens.len() {
        return Err(Error::Metric("perplexity needs one likelihood per non-empty sample".into()));
    }
    let ll: f64 = log_likelihoods.iter().sum();
    let n: usize = tokens.iter().sum();
    if n == 0 {
        return Err(Error::Metric("perplexity over zero tokens".into()));
    }
    Ok(LikelihoodReport {
        log_likelihood: ll,
        tokens: n,
        ppl: (-ll / n as f64).exp(),
    })
}

/// Importance-weighted perplexity with `k` samples per example. Example `i`
/// draws from its own stream so results do not depend on data order.
pub fn perplexity<T: Element>(model: &VaeModel<T>, data: &[Example], k: usize, seed: u64) -> Result<LikelihoodReport> {
    if data.is_empty() {
        return Err(Error::Metric("perplexity of an empty dataset".into()));
    }
    let base = RngState::new(seed).fork(IW_STREAM);
    let mut lls = Vec::with_capacity(data.len());
    for (i, e) in data.iter().enumerate() {
        lls.push(iw_log_likelihood(model, e, k, &mut base.fork(i as u64))?);
    }
    let tokens: Vec<usize> = data.iter().map(Example::target_count).collect();
    perplexity_from(&lls, &tokens)
}
