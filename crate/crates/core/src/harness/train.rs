//! Optimiser and the deterministic training loop.

use std::io::Write;
use std::path::Path;

use lvt_tensor::{Element, RngState};
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, Example};
use crate::error::{contract, Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::model::VaeModel;
use crate::nn::ParamList;
use crate::objective::{write_loss_header, write_loss_row, AnnealMode, AnnealSchedule, LossBreakdown, ObjectiveConfig};

const DATA_STREAM: u64 = 0xDA7A;
const SAMPLE_STREAM: u64 = 0x5A3B;

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamList<T>, lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients and returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, params: &ParamList<T>) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(contract("optimizer state does not match the parameter list"));
        }
        let grads: Vec<Option<Vec<T>>> = params.iter().map(|(_, p)| p.grad()).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Tensor(lvt_tensor::TensorError::NonFinite { op: "gradient norm" }));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (one, sc) = (T::one(), T::of_f64(scale));
        let lr_t = T::of_f64(self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t)));
        let eps = T::of_f64(self.eps);
        for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|w| {
                for j in 0..w.len() {
                    let gj = g[j] * sc;
                    m[j] = b1 * m[j] + (one - b1) * gj;
                    v[j] = b2 * v[j] + (one - b2) * gj * gj;
                    w[j] = w[j] - lr_t * m[j] / (v[j].sqrt() + eps);
                }
            });
        }
        Ok(norm)
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let ok = |a: &[Vec<T>]| a.len() == self.m.len() && a.iter().zip(&self.m).all(|(x, y)| x.len() == y.len());
        if !ok(&m) || !ok(&v) {
            return Err(contract("optimizer moments do not match the parameters"));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub anneal: AnnealMode,
    /// Annealing cycle length in epochs.
    pub anneal_epochs: usize,
    pub free_bits: Option<f64>,
    pub bow_weight: f64,
    pub log_every: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 32,
            lr: 5e-5,
            grad_clip: Some(1.0),
            anneal: AnnealMode::Cyclical,
            anneal_epochs: 2,
            free_bits: None,
            bow_weight: 0.0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self, dataset_len: usize) -> ObjectiveConfig {
        let per_epoch = dataset_len.div_ceil(self.batch_size.max(1));
        ObjectiveConfig {
            anneal: AnnealSchedule {
                mode: self.anneal,
                period: (self.anneal_epochs * per_epoch).max(1),
            },
            free_bits: self.free_bits,
            bow_weight: self.bow_weight,
        }
    }
}

/// Summary of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub beta: f64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

pub struct Trainer<T: Element> {
    pub model: VaeModel<T>,
    pub opt: Adam<T>,
    pub cfg: TrainConfig,
    pub objective: ObjectiveConfig,
    /// Completed steps.
    pub step: usize,
    data: Vec<Example>,
    order: Option<(usize, Vec<usize>)>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: VaeModel<T>, data: Vec<Example>, cfg: TrainConfig) -> Result<Self> {
        if data.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Config("training needs data and a positive batch size".into()));
        }
        let max_len = model.config.max_len;
        if let Some(i) = data.iter().position(|e| e.required_len() > max_len) {
            return Err(Error::Config(format!(
                "sample {i} needs {} positions but max_len is {max_len}",
                data[i].required_len()
            )));
        }
        let opt = Adam::new(&model.params(), cfg.lr, cfg.grad_clip);
        let objective = cfg.objective(data.len());
        Ok(Self {
            model,
            opt,
            objective,
            cfg,
            step: 0,
            data,
            order: None,
        })
    }

    pub fn data(&self) -> &[Example] {
        &self.data
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Example indices of the batch at `step`; a pure function of the seed
    /// and step.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            RngState::new(self.cfg.seed).fork(DATA_STREAM).fork(epoch as u64).shuffle(&mut idx);
            self.order = Some((epoch, idx));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let end = ((k + 1) * self.cfg.batch_size).min(order.len());
        order[k * self.cfg.batch_size..end].to_vec()
    }

    /// Latent-noise stream of `step`.
    pub fn step_rng(&self, step: usize) -> RngState {
        RngState::new(self.cfg.seed).fork(SAMPLE_STREAM).fork(step as u64)
    }

    pub fn batch_at(&mut self, step: usize) -> Result<Batch> {
        let idx = self.batch_indices(step);
        let examples: Vec<Example> = idx.iter().map(|&i| self.data[i].clone()).collect();
        Batch::new(&examples, self.model.config.max_len)
    }

    /// One optimisation step. Non-finite values abort with `Diverged`
    /// before any parameter changes.
    pub fn train_step(&mut self) -> Result<(StepReport, LossBreakdown<T>)> {
        let step = self.step;
        let batch = self.batch_at(step)?;
        let beta = self.objective.anneal.beta_at(step);
        let mut rng = self.step_rng(step);
        let diverged = |e: Error| match e {
            Error::Tensor(_) => Error::Diverged { step, source: Box::new(e) },
            other => other,
        };
        self.model.zero_grad();
        let loss = self.model.loss(&batch, beta, &self.objective, &mut rng).map_err(diverged)?;
        loss.total.backward().map_err(|e| diverged(e.into()))?;
        let params = self.model.params();
        let grad_norm = self.opt.step(&params).map_err(diverged)?;
        self.step += 1;
        let report = StepReport {
            step,
            beta,
            loss: loss.total.item(),
            recon: loss.recon,
            kl: loss.kl_total,
            grad_norm,
        };
        Ok((report, loss))
    }

    /// Runs until `cfg.steps` completed steps, logging loss rows to `log`
    /// and writing checkpoints to `checkpoint` when configured.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, checkpoint: Option<&Path>) -> Result<Vec<StepReport>> {
        if let Some(w) = log.as_deref_mut() {
            if self.step == 0 {
                write_loss_header(w, self.model.config.num_layers)?;
            }
        }
        let mut reports = Vec::new();
        while self.step < self.cfg.steps {
            let (report, loss) = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    log::error!("{e}; last good checkpoint kept");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if self.cfg.log_every > 0 && (report.step % self.cfg.log_every == 0 || self.step == self.cfg.steps) {
                log::info!(
                    "step {} beta {:.5} loss {:.4} recon {:.4} kl {:.4}",
                    report.step,
                    report.beta,
                    report.loss,
                    report.recon,
                    report.kl
                );
                if let Some(w) = log.as_deref_mut() {
                    write_loss_row(w, report.step, &loss)?;
                }
            }
            if let Some(path) = checkpoint {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.cfg.steps {
                    self.checkpoint().save(path)?;
                }
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Model, optimiser moments and loop position.
    pub fn checkpoint(&self) -> Checkpoint {
        let state = serde_json::json!({
            "step": self.step,
            "adam_step": self.opt.step,
            "train": self.cfg,
        });
        let mut ck = Checkpoint::new(self.model.config.clone(), state);
        ck.insert_model(&self.model);
        let (m, v) = self.opt.moments();
        for (i, (name, p)) in self.model.params().iter().enumerate() {
            let f = |x: &Vec<T>| x.iter().map(|y| y.as_f64() as f32).collect::<Vec<f32>>();
            ck.insert(format!("adam.m.{name}"), p.shape(), f(&m[i]));
            ck.insert(format!("adam.v.{name}"), p.shape(), f(&v[i]));
        }
        ck
    }

    /// Restores a trainer from `ck`, continuing at its recorded step.
    pub fn resume(ck: &Checkpoint, data: Vec<Example>, cfg: TrainConfig) -> Result<Self> {
        let model = ck.to_model()?;
        let mut t = Self::new(model, data, cfg)?;
        let field = |k: &str| {
            ck.state
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Config(format!("checkpoint state lacks `{k}`")))
        };
        t.step = field("step")? as usize;
        t.opt.step = field("adam_step")?;
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for (name, _) in t.model.params() {
            let load = |key: String| -> Result<Vec<T>> {
                Ok(ck.get(&key)?.1.iter().map(|&x| T::of_f64(f64::from(x))).collect())
            };
            ms.push(load(format!("adam.m.{name}"))?);
            vs.push(load(format!("adam.v.{name}"))?);
        }
        t.opt.set_moments(ms, vs)?;
        Ok(t)
    }
}

/// Mean loss terms over `data` in batches, with a fixed noise stream.
pub fn evaluate<T: Element>(
    model: &VaeModel<T>,
    data: &[Example],
    batch_size: usize,
    obj: &ObjectiveConfig,
    seed: u64,
) -> Result<EvalLoss> {
    let _guard = lvt_tensor::NoGradGuard::new();
    let mut rng = RngState::new(seed).fork(SAMPLE_STREAM);
    let (mut recon, mut kl, mut n) = (0.0, 0.0, 0.0);
    let mut kl_layers = vec![0.0; model.config.num_layers];
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, model.config.max_len)?;
        let l = model.loss(&batch, 1.0, obj, &mut rng)?;
        let w = chunk.len() as f64;
        recon += l.recon * w;
        kl += l.kl_total * w;
        for (a, b) in kl_layers.iter_mut().zip(&l.kl_layers) {
            *a += b * w;
        }
        n += w;
    }
    Ok(EvalLoss {
        recon: recon / n,
        kl: kl / n,
        kl_layers: kl_layers.into_iter().map(|v| v / n).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub recon: f64,
    pub kl: f64,
    pub kl_layers: Vec<f64>,
}
