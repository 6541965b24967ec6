//! Latent injection sites: low-rank value fusion and the three
//! single-latent baselines.

use std::io::Write;

use lvt_tensor::{Element, RngState, Tensor};

use crate::config::{ModelConfig, Paradigm};
use crate::error::{contract, Error, Result};
use crate::latent::LatentChain;
use crate::nn::{join, normal_param, Linear, ParamList, Params};
use crate::transformer::{Injection, LayerActivations, LayerInjection};

/// Rank-`r` value fusion weights of one layer.
#[derive(Debug, Clone)]
pub struct DellaLayer<T: Element> {
    pub layer: usize,
    /// `r` maps `[d, d]` applied to the value vectors.
    pub w_v: Vec<Tensor<T>>,
    /// `r` maps `[p, d]` applied to the latent.
    pub w_z: Vec<Tensor<T>>,
}

impl<T: Element> DellaLayer<T> {
    pub fn new(layer: usize, cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        if cfg.rank < 1 {
            return Err(Error::Config("fusion rank must be at least 1".into()));
        }
        let (d, p, std) = (cfg.hidden_dim, cfg.latent_dim, cfg.init_std);
        Ok(Self {
            layer,
            w_v: (0..cfg.rank).map(|_| normal_param(&[d, d], std, rng)).collect(),
            w_z: (0..cfg.rank).map(|_| normal_param(&[p, d], std, rng)).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.w_v.len()
    }
}

fn sum_all<T: Element>(ms: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut acc = ms.first().ok_or_else(|| Error::Config("fusion rank must be at least 1".into()))?.clone();
    for m in &ms[1..] {
        acc = acc.add(m)?;
    }
    Ok(acc)
}

/// `(sum_j W_v^j v) * (sum_j W_z^j z)` per position; `v` is `[batch, seq, d]`
/// and `z` is `[batch, p]`.
pub fn fuse_lowrank<T: Element>(v: &Tensor<T>, z: &Tensor<T>, w: &DellaLayer<T>) -> Result<Tensor<T>> {
    if v.rank() != 3 || z.rank() != 2 || v.dim(0) != z.dim(0) {
        return Err(contract(format!("fuse_lowrank on v {:?} and z {:?}", v.shape(), z.shape())));
    }
    let (b, d) = (v.dim(0), v.dim(2));
    let value = v.matmul(&sum_all(&w.w_v)?)?;
    let gate = z.matmul(&sum_all(&w.w_z)?)?.reshape(&[b, 1, d])?;
    Ok(value.mul(&gate)?)
}

/// `e + W_e z` on every input position; `e` is `[batch, seq, d]`.
pub fn inject_embedding<T: Element>(e: &Tensor<T>, z: &Tensor<T>, w_e: &Linear<T>) -> Result<Tensor<T>> {
    let shift = w_e.forward(z)?.reshape(&[e.dim(0), 1, e.dim(2)])?;
    Ok(e.add(&shift)?)
}

/// `h + W_s z` on every position of the last hidden state.
pub fn inject_softmax<T: Element>(h: &Tensor<T>, z: &Tensor<T>, w_s: &Linear<T>) -> Result<Tensor<T>> {
    inject_embedding(h, z, w_s)
}

/// Hidden vector `W_m z` of the extra key/value slot, `[batch, d]`.
pub fn inject_memory<T: Element>(z: &Tensor<T>, w_m: &Linear<T>) -> Result<Tensor<T>> {
    w_m.forward(z)
}

#[derive(Debug, Clone)]
pub enum FusionWeights<T: Element> {
    Della(Vec<DellaLayer<T>>),
    Embedding(Linear<T>),
    /// One slot projection per decoder layer.
    Memory(Vec<Linear<T>>),
    Softmax(Linear<T>),
}

impl<T: Element> FusionWeights<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let (d, p, std) = (cfg.hidden_dim, cfg.latent_dim, cfg.init_std);
        Ok(match cfg.paradigm {
            Paradigm::Della => FusionWeights::Della(
                cfg.latent_layers()
                    .map(|l| DellaLayer::new(l, cfg, rng))
                    .collect::<Result<_>>()?,
            ),
            Paradigm::Embedding => FusionWeights::Embedding(Linear::new(p, d, false, std, rng)),
            Paradigm::Memory => {
                FusionWeights::Memory((0..cfg.num_layers).map(|_| Linear::new(p, d, false, std, rng)).collect())
            }
            Paradigm::Softmax => FusionWeights::Softmax(Linear::new(p, d, false, std, rng)),
        })
    }

    pub fn paradigm(&self) -> Paradigm {
        match self {
            FusionWeights::Della(_) => Paradigm::Della,
            FusionWeights::Embedding(_) => Paradigm::Embedding,
            FusionWeights::Memory(_) => Paradigm::Memory,
            FusionWeights::Softmax(_) => Paradigm::Softmax,
        }
    }

    /// Decoder injection for `chain`. Baselines read the chain's single
    /// latent. `mask_memory` hides the memory slot from every position.
    pub fn injection<'a>(
        &'a self,
        chain: &'a LatentChain<T>,
        num_layers: usize,
        mask_memory: bool,
    ) -> Result<Injection<'a, T>> {
        let single = || -> Result<&'a Tensor<T>> {
            match chain.entries.as_slice() {
                [e] => Ok(&e.z),
                _ => Err(contract(format!(
                    "{} paradigm expects a single latent, chain has {}",
                    self.paradigm().name(),
                    chain.entries.len()
                ))),
            }
        };
        let mut inj = Injection::none();
        match self {
            FusionWeights::Della(layers) => {
                inj.layers = (1..=num_layers).map(|_| LayerInjection::None).collect();
                for w in layers {
                    let z = chain
                        .z(w.layer)
                        .ok_or_else(|| contract(format!("chain has no latent for layer {}", w.layer)))?;
                    inj.layers[w.layer - 1] = LayerInjection::Values(Box::new(move |v| fuse_lowrank(v, z, w)));
                }
            }
            FusionWeights::Embedding(w) => inj.input = Some(w.forward(single()?)?),
            FusionWeights::Memory(ws) => {
                let z = single()?;
                inj.layers = ws
                    .iter()
                    .map(|w| {
                        Ok(LayerInjection::Memory {
                            slot: inject_memory(z, w)?,
                            masked: mask_memory,
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            FusionWeights::Softmax(w) => inj.output = Some(w.forward(single()?)?),
        }
        Ok(inj)
    }
}

impl<T: Element> Params<T> for FusionWeights<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        match self {
            FusionWeights::Della(layers) => {
                for w in layers {
                    for (j, (wv, wz)) in w.w_v.iter().zip(&w.w_z).enumerate() {
                        let p = join(prefix, &format!("l{}.r{}", w.layer, j + 1));
                        out.push((join(&p, "w_v"), wv.clone()));
                        out.push((join(&p, "w_z"), wz.clone()));
                    }
                }
            }
            FusionWeights::Embedding(w) => w.collect_params(&join(prefix, "w_e"), out),
            FusionWeights::Memory(ws) => {
                for (l, w) in ws.iter().enumerate() {
                    w.collect_params(&join(prefix, &format!("l{}.w_m", l + 1)), out);
                }
            }
            FusionWeights::Softmax(w) => w.collect_params(&join(prefix, "w_s"), out),
        }
    }
}

/// Four-way split of the attention logit between `e_i + z` and `e_j + z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionTerms {
    pub ee: f64,
    pub ez: f64,
    pub ze: f64,
    pub zz: f64,
    pub raw: f64,
}

impl AttentionTerms {
    pub fn sum(&self) -> f64 {
        self.ee + self.ez + self.ze + self.zz
    }
}

/// Splits `[W_q(e_i+z)]^T [W_k(e_j+z)]` into `<e_i,e_j>`, `<e_i,z>`,
/// `<z,e_j>` and `<z,z>` with `<a,b> = (W_q a)^T (W_k b)`. Matrices are
/// `[d_out, d]` and act on column vectors.
pub fn decompose_attention(e_i: &[f64], e_j: &[f64], z: &[f64], w_q: &[Vec<f64>], w_k: &[Vec<f64>]) -> Result<AttentionTerms> {
    let d = e_i.len();
    if e_j.len() != d || z.len() != d || w_q.len() != w_k.len() || w_q.iter().chain(w_k).any(|r| r.len() != d) {
        return Err(contract("decompose_attention: inconsistent dimensions"));
    }
    let apply = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let pair = |a: &[f64], b: &[f64]| dot(&apply(w_q, a), &apply(w_k, b));
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let terms = AttentionTerms {
        ee: pair(e_i, e_j),
        ez: pair(e_i, z),
        ze: pair(z, e_j),
        zz: pair(z, z),
        raw: pair(&add(e_i, z), &add(e_j, z)),
    };
    let scale = [terms.ee, terms.ez, terms.ze, terms.zz].iter().map(|t| t.abs()).fold(1.0, f64::max);
    if (terms.sum() - terms.raw).abs() > 1e-9 * scale {
        return Err(contract(format!(
            "attention terms sum to {} but the logit is {}",
            terms.sum(),
            terms.raw
        )));
    }
    Ok(terms)
}

/// Writes captured attention weights of batch row `item` as CSV with columns
/// `layer, head, query_pos, key_pos, weight`; the memory slot has key
/// position -1.
pub fn write_attention_csv<T: Element, W: Write>(acts: &LayerActivations<T>, item: usize, out: &mut W) -> Result<()> {
    writeln!(out, "layer,head,query_pos,key_pos,weight")?;
    for (l, a) in acts.attention.iter().enumerate() {
        let (b, h, q, k) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
        if item >= b {
            return Err(contract(format!("attention export row {item} of batch {b}")));
        }
        let slot = acts.memory_slot.get(l).copied().unwrap_or(false);
        let data = a.data();
        for head in 0..h {
            for i in 0..q {
                let row = &data[((item * h + head) * q + i) * k..][..k];
                for (j, w) in row.iter().enumerate() {
                    let key = j as i64 - i64::from(slot);
                    writeln!(out, "{},{},{},{},{}", l + 1, head, i, key, w.as_f64())?;
                }
            }
        }
    }
    Ok(())
}
