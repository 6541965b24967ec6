//! Layer-wise latent chain: recurrent summary of lower-layer latents,
//! Gaussian prior and posterior heads, and reparameterised sampling.

use lvt_tensor::{sample_standard_normal, Element, RngState, Tensor};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::nn::{join, normal_param, Linear, ParamList, Params};

pub const LOG_VAR_BOUND: f64 = 8.0;

/// Diagonal Gaussian over `[batch, p]`.
#[derive(Debug, Clone)]
pub struct GaussianParams<T: Element> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Element> GaussianParams<T> {
    /// Splits a `[batch, 2p]` head output into mean and clamped log-variance.
    pub fn from_head(out: &Tensor<T>) -> Result<Self> {
        let p = out.dim(1) / 2;
        Ok(Self {
            mean: out.narrow(1, 0, p)?,
            log_var: out.narrow(1, p, p)?.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND)?,
        })
    }

    pub fn standard(batch: usize, p: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[batch, p]),
            log_var: Tensor::zeros(&[batch, p]),
        }
    }

    pub fn batch(&self) -> usize {
        self.mean.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.mean.dim(1)
    }

    /// `z = mean + exp(log_var / 2) * eps`.
    pub fn reparameterize(&self, eps: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.mean.add(&self.log_var.scale(0.5)?.exp()?.mul(eps)?)?)
    }

    pub fn sample(&self, rng: &mut RngState) -> Result<Tensor<T>> {
        let eps = sample_standard_normal(rng, self.mean.shape());
        self.reparameterize(&eps)
    }

    /// `log N(z; mean, exp(log_var))` summed over dimensions, `[batch]`.
    pub fn log_density(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let diff = z.sub(&self.mean)?;
        let quad = diff.square()?.mul(&self.log_var.neg()?.exp()?)?;
        let per_dim = quad.add(&self.log_var)?.affine(-0.5, -0.5 * (2.0 * std::f64::consts::PI).ln())?;
        Ok(per_dim.sum_axis(1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            log_var: self.log_var.detach(),
        }
    }

    /// Rows selected by `idx`, as a new graph-free batch.
    pub fn rows(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let p = t.dim(1);
            let d = t.data();
            let v = idx.iter().flat_map(|&i| d[i * p..(i + 1) * p].iter().copied()).collect();
            Ok(Tensor::from_vec(v, &[idx.len(), p])?)
        };
        Ok(Self {
            mean: pick(&self.mean)?,
            log_var: pick(&self.log_var)?,
        })
    }
}

/// Heads owned by one latent layer.
#[derive(Debug, Clone)]
pub struct LayerHeads<T: Element> {
    pub layer: usize,
    /// Summary recurrence `[p, p]`, no bias.
    pub w_hh: Tensor<T>,
    pub w_ih: Tensor<T>,
    /// Input `[summary; c]` (condition only in conditional mode).
    pub prior: Linear<T>,
    /// Input `[summary; x; c]`.
    pub posterior: Linear<T>,
}

impl<T: Element> LayerHeads<T> {
    fn new(layer: usize, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let (p, d, std) = (cfg.latent_dim, cfg.hidden_dim, cfg.init_std);
        let c = if cfg.conditional { d } else { 0 };
        Self {
            layer,
            w_hh: normal_param(&[p, p], std, rng),
            w_ih: normal_param(&[p, p], std, rng),
            prior: Linear::new(p + c, 2 * p, cfg.prior_bias, std, rng),
            posterior: Linear::new(p + d + c, 2 * p, true, std, rng),
        }
    }

    /// `tanh(W_hh s + W_ih z)`.
    pub fn advance_summary(&self, summary: &Tensor<T>, z_prev: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(summary.matmul(&self.w_hh)?.add(&z_prev.matmul(&self.w_ih)?)?.tanh()?)
    }

    pub fn prior_params(&self, summary: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<GaussianParams<T>> {
        let input = match cond {
            Some(c) => Tensor::concat(&[summary.clone(), c.clone()], 1)?,
            None => summary.clone(),
        };
        if input.dim(1) != self.prior.input_dim() {
            return Err(contract(format!(
                "prior head of layer {} expects input dim {}, got {}",
                self.layer,
                self.prior.input_dim(),
                input.dim(1)
            )));
        }
        GaussianParams::from_head(&self.prior.forward(&input)?)
    }

    pub fn posterior_params(
        &self,
        summary: &Tensor<T>,
        x: &Tensor<T>,
        cond: Option<&Tensor<T>>,
    ) -> Result<GaussianParams<T>> {
        let mut parts = vec![summary.clone(), x.clone()];
        parts.extend(cond.cloned());
        let input = Tensor::concat(&parts, 1)?;
        if input.dim(1) != self.posterior.input_dim() {
            return Err(contract(format!(
                "posterior head of layer {} expects input dim {}, got {}",
                self.layer,
                self.posterior.input_dim(),
                input.dim(1)
            )));
        }
        GaussianParams::from_head(&self.posterior.forward(&input)?)
    }
}

impl<T: Element> Params<T> for LayerHeads<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        out.push((join(prefix, "w_hh"), self.w_hh.clone()));
        out.push((join(prefix, "w_ih"), self.w_ih.clone()));
        self.prior.collect_params(&join(prefix, "prior"), out);
        self.posterior.collect_params(&join(prefix, "posterior"), out);
    }
}

/// One independent set of heads per latent layer.
#[derive(Debug, Clone)]
pub struct LatentHeads<T: Element> {
    pub layers: Vec<LayerHeads<T>>,
    pub latent_dim: usize,
}

impl<T: Element> LatentHeads<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        Self {
            layers: cfg.latent_layers().map(|l| LayerHeads::new(l, cfg, rng)).collect(),
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn first_layer(&self) -> usize {
        self.layers[0].layer
    }

    pub fn last_layer(&self) -> usize {
        self.layers[self.layers.len() - 1].layer
    }
}

impl<T: Element> Params<T> for LatentHeads<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        for h in &self.layers {
            h.collect_params(&join(prefix, &format!("l{}", h.layer)), out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// Sample from the posterior given encoder states; priors are computed
    /// alongside for the KL terms.
    Posterior,
    /// Sample from the prior only.
    Prior,
}

#[derive(Debug, Clone)]
pub struct ChainEntry<T: Element> {
    pub layer: usize,
    pub summary: Tensor<T>,
    pub prior: GaussianParams<T>,
    pub posterior: Option<GaussianParams<T>>,
    pub z: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LatentChain<T: Element> {
    pub mode: ChainMode,
    pub entries: Vec<ChainEntry<T>>,
}

impl<T: Element> LatentChain<T> {
    pub fn batch(&self) -> usize {
        self.entries[0].z.dim(0)
    }

    pub fn z(&self, layer: usize) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.layer == layer).map(|e| &e.z)
    }

    pub fn zs(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.z.clone()).collect()
    }

    /// Copy of the chain with its samples replaced by `zs` (one per entry).
    /// Distribution parameters are kept; only the decoder consumes `z`.
    pub fn with_latents(&self, zs: Vec<Tensor<T>>) -> Result<Self> {
        if zs.len() != self.entries.len() {
            return Err(contract(format!("{} latents for a chain of {}", zs.len(), self.entries.len())));
        }
        let mut out = self.clone();
        for (e, z) in out.entries.iter_mut().zip(zs) {
            if z.shape() != e.z.shape() {
                return Err(contract(format!("latent shape {:?}, expected {:?}", z.shape(), e.z.shape())));
            }
            e.z = z;
        }
        Ok(out)
    }

    /// Sum over layers of `log q(z_l | ..) - log p(z_l | ..)`, `[batch]`.
    pub fn log_ratio(&self) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for e in &self.entries {
            let q = e
                .posterior
                .as_ref()
                .ok_or_else(|| contract("log ratio needs a posterior-mode chain"))?;
            let term = q.log_density(&e.z)?.sub(&e.prior.log_density(&e.z)?)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| contract("empty chain"))
    }

    /// Sum over layers of `log p(z_l | z_<l)`, `[batch]`.
    pub fn log_prior(&self) -> Result<Tensor<T>> {
        sum_terms(self.entries.iter().map(|e| e.prior.log_density(&e.z)))
    }

    /// Sum over layers of `log q(z_l | z_<l, x)`, `[batch]`.
    pub fn log_posterior(&self) -> Result<Tensor<T>> {
        sum_terms(self.entries.iter().map(|e| {
            e.posterior
                .as_ref()
                .ok_or_else(|| contract("posterior density of a prior-mode chain"))?
                .log_density(&e.z)
        }))
    }
}

fn sum_terms<T: Element>(terms: impl Iterator<Item = Result<Tensor<T>>>) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for t in terms {
        let t = t?;
        acc = Some(match acc {
            Some(a) => a.add(&t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| contract("empty chain"))
}

/// Inputs of one chain construction.
pub struct ChainInputs<'a, T: Element> {
    /// Encoder states `x^(l)`, indexed by `l - 1`; required in posterior mode.
    pub x: Option<&'a [Tensor<T>]>,
    /// Condition states `c^(l)`, indexed by `l - 1`; required for conditional heads.
    pub c: Option<&'a [Tensor<T>]>,
    pub batch: usize,
    pub separate_latents: bool,
}

/// Builds the chain with the reparameterised sampler.
pub fn build_chain<T: Element>(
    heads: &LatentHeads<T>,
    inputs: &ChainInputs<'_, T>,
    mode: ChainMode,
    rng: &mut RngState,
) -> Result<LatentChain<T>> {
    build_chain_with(heads, inputs, mode, &mut |_, g| g.sample(rng))
}

/// Builds the chain bottom-up, drawing each `z_l` through `sampler` from the
/// distribution selected by `mode`.
pub fn build_chain_with<T: Element>(
    heads: &LatentHeads<T>,
    inputs: &ChainInputs<'_, T>,
    mode: ChainMode,
    sampler: &mut dyn FnMut(usize, &GaussianParams<T>) -> Result<Tensor<T>>,
) -> Result<LatentChain<T>> {
    let (b, p) = (inputs.batch, heads.latent_dim);
    if mode == ChainMode::Posterior && inputs.x.is_none() {
        return Err(contract("posterior chain requires encoder states"));
    }
    let layer_input = |states: Option<&[Tensor<T>]>, l: usize, what: &str| -> Result<Option<Tensor<T>>> {
        match states {
            None => Ok(None),
            Some(s) => {
                let t = s
                    .get(l - 1)
                    .ok_or_else(|| contract(format!("no {what} state for layer {l}")))?;
                if t.dim(0) != b {
                    return Err(contract(format!("{what} batch {} differs from chain batch {b}", t.dim(0))));
                }
                Ok(Some(t.clone()))
            }
        }
    };
    let zeros = Tensor::<T>::zeros(&[b, p]);
    let mut entries: Vec<ChainEntry<T>> = Vec::with_capacity(heads.layers.len());
    for h in &heads.layers {
        let summary = match entries.last() {
            Some(prev) if !inputs.separate_latents => h.advance_summary(&prev.summary, &prev.z)?,
            _ => zeros.clone(),
        };
        let c = layer_input(inputs.c, h.layer, "condition")?;
        let prior = h.prior_params(&summary, c.as_ref())?;
        let (posterior, z) = match mode {
            ChainMode::Posterior => {
                let x = layer_input(inputs.x, h.layer, "encoder")?.expect("checked above");
                let q = h.posterior_params(&summary, &x, c.as_ref())?;
                let z = sampler(h.layer, &q)?;
                (Some(q), z)
            }
            ChainMode::Prior => {
                let z = sampler(h.layer, &prior)?;
                (None, z)
            }
        };
        entries.push(ChainEntry {
            layer: h.layer,
            summary,
            prior,
            posterior,
            z,
        });
    }
    Ok(LatentChain { mode, entries })
}
