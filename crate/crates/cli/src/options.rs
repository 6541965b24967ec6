//! Flag definitions and their merge over an optional JSON config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lvt_core::batch::Example;
use lvt_core::config::{EncoderAttention, KlLayers, ModelConfig, Paradigm};
use lvt_core::harness::corpus::{load_corpus, synthetic_examples, synthetic_pairs};
use lvt_core::harness::train::TrainConfig;
use lvt_core::objective::AnnealMode;
use serde_json::{Map, Value};

/// Overrides for every model field. Unset flags keep the file or default value.
#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// embedding, memory, softmax or della.
    #[arg(long)]
    pub paradigm: Option<Paradigm>,
    #[arg(long)]
    pub latent_start_layer: Option<usize>,
    /// 0 means the last layer.
    #[arg(long)]
    pub latent_end_layer: Option<usize>,
    #[arg(long)]
    pub separate_latents: Option<bool>,
    /// all, first or last.
    #[arg(long)]
    pub kl_layers: Option<KlLayers>,
    #[arg(long)]
    pub share_encoder_decoder: Option<bool>,
    #[arg(long)]
    pub conditional: Option<bool>,
    /// bidirectional or causal.
    #[arg(long)]
    pub encoder_attention: Option<EncoderAttention>,
    #[arg(long)]
    pub bow_heads: Option<bool>,
    #[arg(long)]
    pub prior_bias: Option<bool>,
    #[arg(long)]
    pub init_std: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// cyclical, none or constant:<beta>.
    #[arg(long)]
    pub anneal: Option<AnnealMode>,
    #[arg(long)]
    pub anneal_epochs: Option<usize>,
    /// Per-dimension KL floor; 0 disables it.
    #[arg(long)]
    pub free_bits: Option<f64>,
    #[arg(long)]
    pub bow_weight: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn set<T: serde::Serialize>(obj: &mut Map<String, Value>, key: &str, v: &Option<T>) -> Result<()> {
    if let Some(v) = v {
        obj.insert(key.into(), serde_json::to_value(v)?);
    }
    Ok(())
}

fn section(file: &Value, key: &str) -> Result<Map<String, Value>> {
    match file.get(key) {
        None => Ok(Map::new()),
        Some(Value::Object(m)) => Ok(m.clone()),
        Some(_) => bail!("config section `{key}` must be an object"),
    }
}

/// Reads `{"model": {..}, "train": {..}}`; both sections are optional.
pub fn read_config_file(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if let Some(k) = v.as_object().and_then(|o| o.keys().find(|k| *k != "model" && *k != "train")) {
                bail!("unknown config section `{k}`");
            }
            Ok(v)
        }
    }
}

pub fn model_config(file: &Value, f: &ModelFlags) -> Result<ModelConfig> {
    let mut m = section(file, "model")?;
    set(&mut m, "num_layers", &f.num_layers)?;
    set(&mut m, "hidden_dim", &f.hidden_dim)?;
    set(&mut m, "num_heads", &f.num_heads)?;
    set(&mut m, "latent_dim", &f.latent_dim)?;
    set(&mut m, "rank", &f.rank)?;
    set(&mut m, "vocab_size", &f.vocab_size)?;
    set(&mut m, "max_len", &f.max_len)?;
    set(&mut m, "paradigm", &f.paradigm)?;
    set(&mut m, "latent_start_layer", &f.latent_start_layer)?;
    set(&mut m, "latent_end_layer", &f.latent_end_layer)?;
    set(&mut m, "separate_latents", &f.separate_latents)?;
    set(&mut m, "kl_layers", &f.kl_layers)?;
    set(&mut m, "share_encoder_decoder", &f.share_encoder_decoder)?;
    set(&mut m, "conditional", &f.conditional)?;
    set(&mut m, "encoder_attention", &f.encoder_attention)?;
    set(&mut m, "bow_heads", &f.bow_heads)?;
    set(&mut m, "prior_bias", &f.prior_bias)?;
    set(&mut m, "init_std", &f.init_std)?;
    let cfg: ModelConfig = serde_json::from_value(Value::Object(m)).context("model config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(file: &Value, f: &TrainFlags) -> Result<TrainConfig> {
    let mut m = section(file, "train")?;
    set(&mut m, "seed", &f.seed)?;
    set(&mut m, "steps", &f.steps)?;
    set(&mut m, "batch_size", &f.batch_size)?;
    set(&mut m, "lr", &f.lr)?;
    if let Some(c) = f.grad_clip {
        m.insert("grad_clip".into(), if c > 0.0 { c.into() } else { Value::Null });
    }
    set(&mut m, "anneal", &f.anneal)?;
    set(&mut m, "anneal_epochs", &f.anneal_epochs)?;
    if let Some(b) = f.free_bits {
        m.insert("free_bits".into(), if b > 0.0 { b.into() } else { Value::Null });
    }
    set(&mut m, "bow_weight", &f.bow_weight)?;
    set(&mut m, "log_every", &f.log_every)?;
    set(&mut m, "checkpoint_every", &f.checkpoint_every)?;
    serde_json::from_value(Value::Object(m)).context("train config")
}

/// A corpus file, or `synthetic:<n>[:<seed>]` for the bundled generator.
pub fn load_data(spec: &str, cfg: &ModelConfig) -> Result<Vec<Example>> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let n: usize = parts.next().unwrap_or("").parse().context("synthetic sample count")?;
        let seed: u64 = parts.next().map_or(Ok(0), str::parse).context("synthetic seed")?;
        return Ok(if cfg.conditional {
            synthetic_pairs(n, seed)
        } else {
            synthetic_examples(n, seed)
        });
    }
    Ok(load_corpus(&PathBuf::from(spec), cfg.conditional, cfg.max_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_the_file() {
        let file = json!({"model": {"hidden_dim": 16, "num_heads": 2, "paradigm": "memory"}, "train": {"lr": 0.01}});
        let flags = ModelFlags {
            paradigm: Some(Paradigm::Della),
            ..Default::default()
        };
        let cfg = model_config(&file, &flags).unwrap();
        assert_eq!(cfg.hidden_dim, 16);
        assert_eq!(cfg.paradigm, Paradigm::Della);
        let tf = TrainFlags {
            anneal: Some(AnnealMode::None),
            free_bits: Some(0.0),
            ..Default::default()
        };
        let tc = train_config(&file, &tf).unwrap();
        assert_eq!(tc.lr, 0.01);
        assert_eq!(tc.anneal, AnnealMode::None);
        assert_eq!(tc.free_bits, None);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(model_config(&json!({"model": {"hiden_dim": 3}}), &ModelFlags::default()).is_err());
        assert!(model_config(&json!({"model": {"hidden_dim": 10, "num_heads": 3}}), &ModelFlags::default()).is_err());
    }

    #[test]
    fn synthetic_data_specs() {
        let cfg = ModelConfig::default();
        assert_eq!(load_data("synthetic:12:3", &cfg).unwrap().len(), 12);
        assert!(load_data("synthetic:x", &cfg).is_err());
    }
}
