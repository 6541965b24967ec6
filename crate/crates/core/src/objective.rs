//! ELBO terms, KL annealing, free bits and the bag-of-words auxiliary loss.

use std::io::Write;

use lvt_tensor::{Element, RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{KlLayers, ModelConfig};
use crate::error::{contract, Error, Result};
use crate::latent::{ChainMode, GaussianParams, LatentChain};
use crate::nn::{join, Linear, ParamList, Params};

/// Per-dimension `KL(q || p)` between diagonal Gaussians, `[batch, p]`.
pub fn gaussian_kl_terms<T: Element>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<Tensor<T>> {
    if q.mean.shape() != p.mean.shape() {
        return Err(contract(format!("KL between shapes {:?} and {:?}", q.mean.shape(), p.mean.shape())));
    }
    // 0.5 (lv_p - lv_q) + 0.5 (exp(lv_q - lv_p) + (mu_q - mu_p)^2 exp(-lv_p)) - 0.5
    let log_ratio = p.log_var.sub(&q.log_var)?;
    let var_ratio = q.log_var.sub(&p.log_var)?.exp()?;
    let mahal = q.mean.sub(&p.mean)?.square()?.mul(&p.log_var.neg()?.exp()?)?;
    Ok(log_ratio.add(&var_ratio)?.add(&mahal)?.affine(0.5, -0.5)?)
}

/// `KL(q || p)` summed over dimensions, `[batch]`.
pub fn gaussian_kl<T: Element>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<Tensor<T>> {
    Ok(gaussian_kl_terms(q, p)?.sum_axis(1)?)
}

/// Closed-form KL of every chain entry along the sampled path, each
/// `[batch, p]` per dimension, paired with its layer.
pub fn layerwise_kl<T: Element>(chain: &LatentChain<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    if chain.mode == ChainMode::Prior {
        return Err(contract("layer-wise KL needs a posterior-mode chain"));
    }
    chain
        .entries
        .iter()
        .map(|e| {
            let q = e.posterior.as_ref().expect("posterior mode");
            Ok((e.layer, gaussian_kl_terms(q, &e.prior)?))
        })
        .collect()
}

/// Per-row negative log-likelihood summed over kept positions, `[batch]`.
/// `logits` is `[batch, seq, vocab]`; `targets` and `keep` are `batch * seq`.
pub fn sequence_nll<T: Element>(logits: &Tensor<T>, targets: &[usize], keep: &[bool]) -> Result<Tensor<T>> {
    let (b, s) = (logits.dim(0), logits.dim(1));
    if targets.len() != b * s || keep.len() != b * s {
        return Err(contract(format!("{} targets for logits {:?}", targets.len(), logits.shape())));
    }
    if let Some(row) = keep.chunks(s).position(|r| !r.iter().any(|&k| k)) {
        return Err(contract(format!("sequence {row} has no target tokens")));
    }
    let picked = logits.log_softmax()?.pick(targets)?;
    let weights = Tensor::from_vec(keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect(), &[b, s])?;
    Ok(picked.mul(&weights)?.sum_axis(1)?.neg()?)
}

/// Sum of token NLL over each sequence, averaged over the batch.
pub fn reconstruction_loss<T: Element>(logits: &Tensor<T>, targets: &[usize], keep: &[bool]) -> Result<Tensor<T>> {
    Ok(sequence_nll(logits, targets, keep)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum AnnealMode {
    /// Repeating floor, linear ramp, plateau.
    Cyclical,
    Constant(f64),
    /// Plain ELBO (`beta = 1`).
    None,
}

impl std::str::FromStr for AnnealMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "cyclical" => Ok(AnnealMode::Cyclical),
            "none" => Ok(AnnealMode::None),
            _ => match lower.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(v)) if v.is_finite() && v >= 0.0 => Ok(AnnealMode::Constant(v)),
                _ => Err(Error::Config(format!("unknown anneal mode `{s}` (cyclical, none, constant:<beta>)"))),
            },
        }
    }
}

pub const BETA_FLOOR: f64 = 1e-5;

/// Cyclical weight at phase `t` in `[0, 1)`: `1e-5` on the first half, a
/// linear ramp to 1 over the next quarter, then 1.
pub fn cyclical_beta(t: f64) -> f64 {
    if t < 0.5 {
        BETA_FLOOR
    } else if t < 0.75 {
        BETA_FLOOR + (1.0 - BETA_FLOOR) * (t - 0.5) / 0.25
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub mode: AnnealMode,
    /// Steps per cycle (two epochs by default in the harness).
    pub period: usize,
}

impl AnnealSchedule {
    pub fn beta_at(&self, step: usize) -> f64 {
        match self.mode {
            AnnealMode::Cyclical => {
                let period = self.period.max(1);
                cyclical_beta((step % period) as f64 / period as f64)
            }
            AnnealMode::Constant(b) => b,
            AnnealMode::None => 1.0,
        }
    }
}

/// `max(term, lambda)` elementwise, summed. The floor carries no gradient.
pub fn apply_free_bits<T: Element>(terms: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    Ok(terms.floor_at(lambda)?.sum_all()?)
}

/// Per-layer heads predicting the target bag of words from `z_l`.
#[derive(Debug, Clone)]
pub struct BowHeads<T: Element> {
    pub heads: Vec<(usize, Linear<T>)>,
}

impl<T: Element> BowHeads<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        Self {
            heads: cfg
                .latent_layers()
                .map(|l| (l, Linear::new(cfg.latent_dim, cfg.vocab_size, true, cfg.init_std, rng)))
                .collect(),
        }
    }
}

impl<T: Element> Params<T> for BowHeads<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        for (l, h) in &self.heads {
            h.collect_params(&join(prefix, &format!("l{l}")), out);
        }
    }
}

/// Token counts `[batch, vocab]` of each row's kept targets.
pub fn bag_counts<T: Element>(targets: &[usize], keep: &[bool], batch: usize, vocab: usize) -> Result<Tensor<T>> {
    let s = targets.len() / batch.max(1);
    let mut counts = vec![T::zero(); batch * vocab];
    for (i, (&t, &k)) in targets.iter().zip(keep).enumerate() {
        if k {
            if t >= vocab {
                return Err(contract(format!("target id {t} outside vocab {vocab}")));
            }
            counts[(i / s) * vocab + t] = counts[(i / s) * vocab + t] + T::one();
        }
    }
    Ok(Tensor::from_vec(counts, &[batch, vocab])?)
}

/// Cross-entropy of the bag (summed over tokens, averaged over the batch)
/// under each layer's head, averaged over layers.
pub fn bow_loss<T: Element>(heads: &BowHeads<T>, chain: &LatentChain<T>, counts: &Tensor<T>) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for (layer, head) in &heads.heads {
        let z = chain
            .z(*layer)
            .ok_or_else(|| contract(format!("no latent at layer {layer} for the BOW head")))?;
        let logp = head.forward(z)?.log_softmax()?;
        let ce = logp.mul(counts)?.sum_all()?.scale(-1.0 / z.dim(0) as f64)?;
        total = Some(match total {
            Some(t) => t.add(&ce)?,
            None => ce,
        });
    }
    let n = heads.heads.len() as f64;
    Ok(total.ok_or_else(|| contract("no BOW heads"))?.scale(1.0 / n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub anneal: AnnealSchedule,
    /// Per-dimension KL floor in the loss.
    pub free_bits: Option<f64>,
    /// Weight of the BOW loss; not scaled by beta.
    pub bow_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            anneal: AnnealSchedule {
                mode: AnnealMode::None,
                period: 1,
            },
            free_bits: None,
            bow_weight: 1.0,
        }
    }
}

pub const DEFAULT_FREE_BITS: f64 = 0.5;

/// Loss tensor plus raw (unthresholded) reporting values.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Element> {
    pub total: Tensor<T>,
    pub beta: f64,
    pub recon: f64,
    /// Raw KL of the layers selected by `kl_layers`.
    pub kl_total: f64,
    /// Raw KL per decoder layer (index `l - 1`); zero where no latent lives.
    pub kl_layers: Vec<f64>,
    pub bow: Option<f64>,
}

/// Layers whose KL enters the loss.
pub fn selected_layers(chain_layers: &[usize], which: KlLayers) -> Vec<usize> {
    match which {
        KlLayers::All => chain_layers.to_vec(),
        KlLayers::First => chain_layers.first().copied().into_iter().collect(),
        KlLayers::Last => chain_layers.last().copied().into_iter().collect(),
    }
}

/// `recon + beta * KL_selected (+ free bits) + bow_weight * bow`.
pub fn elbo<T: Element>(
    recon: Tensor<T>,
    kl: &[(usize, Tensor<T>)],
    bow: Option<Tensor<T>>,
    beta: f64,
    kl_layers: KlLayers,
    num_layers: usize,
    obj: &ObjectiveConfig,
) -> Result<LossBreakdown<T>> {
    let layers: Vec<usize> = kl.iter().map(|(l, _)| *l).collect();
    let selected = selected_layers(&layers, kl_layers);
    let mut reported = vec![0.0; num_layers];
    let mut kl_total = 0.0;
    let mut kl_loss: Option<Tensor<T>> = None;
    for (layer, terms) in kl {
        let per_dim = terms.mean_axis(0)?;
        let raw = per_dim.sum_all()?;
        reported[layer - 1] = raw.item();
        if !selected.contains(layer) {
            continue;
        }
        kl_total += raw.item();
        let term = match obj.free_bits {
            Some(lambda) => apply_free_bits(&per_dim, lambda)?,
            None => raw,
        };
        kl_loss = Some(match kl_loss {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let recon_value = recon.item();
    let mut total = recon;
    if let Some(k) = kl_loss {
        total = total.add(&k.scale(beta)?)?;
    }
    let bow_value = bow.as_ref().map(|b| b.item());
    if let Some(b) = bow {
        total = total.add(&b.scale(obj.bow_weight)?)?;
    }
    Ok(LossBreakdown {
        total,
        beta,
        recon: recon_value,
        kl_total,
        kl_layers: reported,
        bow: bow_value,
    })
}

pub fn write_loss_header<W: Write + ?Sized>(out: &mut W, num_layers: usize) -> Result<()> {
    let layers: Vec<String> = (1..=num_layers).map(|l| format!("kl_layer_{l}")).collect();
    writeln!(out, "step,beta,loss_total,recon,kl_total,{},bow", layers.join(","))?;
    Ok(())
}

pub fn write_loss_row<T: Element, W: Write + ?Sized>(out: &mut W, step: usize, b: &LossBreakdown<T>) -> Result<()> {
    let layers: Vec<String> = b.kl_layers.iter().map(|v| v.to_string()).collect();
    let bow = b.bow.map(|v| v.to_string()).unwrap_or_default();
    writeln!(
        out,
        "{step},{},{},{},{},{},{bow}",
        b.beta,
        b.total.item(),
        b.recon,
        b.kl_total,
        layers.join(",")
    )?;
    Ok(())
}
