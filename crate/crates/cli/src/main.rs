//! `lvt`: train, evaluate and sample layer-wise latent Transformer VAEs.
//!
//! Log verbosity follows `LVT_LOG` (`error`, `warn`, `info`, `debug`).

mod options;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lvt_core::batch::{Batch, Example};
use lvt_core::fusion::write_attention_csv;
use lvt_core::harness::checkpoint::Checkpoint;
use lvt_core::harness::generate::{
    generate, interpolate, posterior_of, sample_records, write_samples, DecodeMode,
};
use lvt_core::harness::manifest::Manifest;
use lvt_core::harness::tokenizer::{decode, encode};
use lvt_core::harness::train::{evaluate, Trainer};
use lvt_core::metrics::{
    active_units, mutual_information, perplexity, posterior_summaries, score_samples, write_summaries, MetricsReport,
    DEFAULT_AU_THRESHOLD, DEFAULT_IW_SAMPLES,
};
use lvt_core::model::VaeModel;
use lvt_core::objective::{write_loss_header, ObjectiveConfig};
use lvt_core::tensor::RngState;
use lvt_core::transformer::ForwardOptions;

use options::{load_data, model_config, read_config_file, train_config, ModelFlags, TrainFlags};

#[derive(Parser)]
#[command(name = "lvt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, loss log and manifest.
    Train {
        /// Corpus file or `synthetic:<n>[:<seed>]`.
        #[arg(long)]
        data: String,
        /// Held-out data scored after training.
        #[arg(long)]
        eval_data: Option<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// JSON file with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its model config wins over flags.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Importance samples per example.
        #[arg(long, default_value_t = DEFAULT_IW_SAMPLES)]
        k: usize,
        /// Generated samples for quality and diversity metrics; 0 skips them.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value = "top-k:10")]
        decode: DecodeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Decode samples from the prior.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "top-k:10")]
        decode: DecodeMode,
        #[arg(long)]
        max_len: Option<usize>,
        /// One condition per line, cycled to `n`, for conditional models.
        #[arg(long)]
        conditions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy decodings along the line between two posterior latents.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        condition: Option<String>,
        /// Grid points from tau = 1 down to tau = 0.
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export decoder attention weights of one text as CSV.
    AnalyzeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        condition: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-datum posterior means and log-variances as JSONL.
    ExportPosteriors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LVT_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn load_model(path: &Path) -> Result<(Checkpoint, VaeModel<f32>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn one_example(text: &str, condition: Option<&str>) -> Example {
    Example {
        text: encode(text),
        condition: condition.map(encode),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            eval_data,
            out,
            config,
            resume,
            model,
            train,
        } => {
            let file = read_config_file(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let ck_path = out.join("checkpoint.bin");
            let mut trainer = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    let mut base = file.clone();
                    if let (Some(obj), Some(prev)) = (base.as_object_mut(), ck.state.get("train")) {
                        let mut merged = prev.as_object().cloned().unwrap_or_default();
                        if let Some(over) = file.get("train").and_then(|v| v.as_object()) {
                            merged.extend(over.clone());
                        }
                        obj.insert("train".into(), merged.into());
                    }
                    let tc = train_config(&base, &train)?;
                    let examples = load_data(&data, &ck.config)?;
                    Trainer::<f32>::resume(&ck, examples, tc)?
                }
                None => {
                    let cfg = model_config(&file, &model)?;
                    let tc = train_config(&file, &train)?;
                    let examples = load_data(&data, &cfg)?;
                    Trainer::new(VaeModel::<f32>::new(cfg, tc.seed)?, examples, tc)?
                }
            };
            let manifest = Manifest::new("train", trainer.model.config.clone(), Some(trainer.cfg.clone()), trainer.cfg.seed);
            manifest.save(&out.join("manifest.json"))?;
            let append = trainer.step > 0;
            let mut log_file = fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(out.join("loss.csv"))?;
            if append && log_file.metadata()?.len() == 0 {
                write_loss_header(&mut log_file, trainer.model.config.num_layers)?;
            }
            let reports = trainer.run(Some(&mut log_file), Some(&ck_path))?;
            if let Some(last) = reports.last() {
                log::info!("finished at step {} with loss {:.4}", last.step, last.loss);
            }
            if let Some(spec) = eval_data {
                let held = load_data(&spec, &trainer.model.config)?;
                let report = score(&trainer.model, &held, DEFAULT_IW_SAMPLES, trainer.cfg.seed)?;
                write_report(&report, &out)?;
            }
            log::info!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            samples,
            decode: mode,
            seed,
            out,
        } => {
            let (ck, model) = load_model(&checkpoint)?;
            let examples = load_data(&data, &model.config)?;
            let mut report = score(&model, &examples, k, seed)?;
            fs::create_dir_all(&out)?;
            if samples > 0 {
                let conditions = model
                    .config
                    .conditional
                    .then(|| (0..samples).map(|i| examples[i % examples.len()].condition.clone().unwrap_or_default()).collect::<Vec<_>>());
                let gen = generate(&model, samples, conditions.as_deref(), mode, model.config.max_len, seed)?;
                let records = sample_records(&gen, conditions.as_deref());
                write_samples(&mut File::create(out.join("samples.jsonl"))?, &records)?;
                let texts: Vec<String> = records.into_iter().map(|r| r.text).collect();
                let refs: Vec<String> = examples.iter().map(|e| decode(&e.text)).collect();
                score_samples(&mut report, &texts, &refs)?;
            }
            write_report(&report, &out)?;
            Manifest::new("eval", ck.config.clone(), None, seed).save(&out.join("manifest.json"))?;
            report.write_json(&mut std::io::stdout())?;
        }
        Command::Sample {
            checkpoint,
            n,
            decode: mode,
            max_len,
            conditions,
            seed,
            out,
        } => {
            let (_, model) = load_model(&checkpoint)?;
            let conds = match (&conditions, model.config.conditional) {
                (Some(p), true) => {
                    let lines: Vec<Vec<usize>> = fs::read_to_string(p)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(encode)
                        .collect();
                    if lines.is_empty() {
                        bail!("{} has no conditions", p.display());
                    }
                    Some((0..n).map(|i| lines[i % lines.len()].clone()).collect::<Vec<_>>())
                }
                (None, true) => bail!("conditional model needs --conditions"),
                (Some(_), false) => bail!("--conditions given for an unconditional model"),
                (None, false) => None,
            };
            let max_len = max_len.unwrap_or(model.config.max_len);
            let gen = generate(&model, n, conds.as_deref(), mode, max_len, seed)?;
            let mut w = output(out.as_deref())?;
            write_samples(&mut w, &sample_records(&gen, conds.as_deref()))?;
            w.flush()?;
        }
        Command::Interpolate {
            checkpoint,
            from,
            to,
            condition,
            steps,
            seed,
            out,
        } => {
            let (_, model) = load_model(&checkpoint)?;
            if steps < 2 {
                bail!("interpolation needs at least 2 steps");
            }
            let mut rng = RngState::new(seed);
            let a = posterior_of(&model, &one_example(&from, condition.as_deref()), &mut rng)?;
            let b = posterior_of(&model, &one_example(&to, condition.as_deref()), &mut rng)?;
            let taus: Vec<f64> = (0..steps).map(|i| 1.0 - i as f64 / (steps - 1) as f64).collect();
            let cond = condition.as_deref().map(encode);
            let texts = interpolate(&model, &a, &b, &taus, cond.as_deref(), model.config.max_len)?;
            let mut w = output(out.as_deref())?;
            for (tau, t) in taus.iter().zip(&texts) {
                serde_json::to_writer(&mut w, &serde_json::json!({"tau": tau, "text": decode(t)}))?;
                writeln!(w)?;
            }
            w.flush()?;
        }
        Command::AnalyzeAttention {
            checkpoint,
            text,
            condition,
            seed,
            out,
        } => {
            let (_, model) = load_model(&checkpoint)?;
            let example = one_example(&text, condition.as_deref());
            let batch = Batch::new(std::slice::from_ref(&example), model.config.max_len)?;
            let enc = model.encode_batch(&batch)?;
            let chain = model.posterior_chain(&enc, &mut RngState::new(seed))?;
            let opts = ForwardOptions {
                logits: false,
                capture_attention: true,
            };
            let fwd = model.decoder_forward(&batch.decoder, Some(&chain), opts)?;
            let mut w = output(out.as_deref())?;
            write_attention_csv(&fwd.activations, 0, &mut w)?;
            w.flush()?;
        }
        Command::ExportPosteriors {
            checkpoint,
            data,
            batch_size,
            seed,
            out,
        } => {
            let (_, model) = load_model(&checkpoint)?;
            let examples = load_data(&data, &model.config)?;
            let summaries = posterior_summaries(&model, &examples, batch_size, seed)?;
            let mut w = output(out.as_deref())?;
            write_summaries(&mut w, &summaries)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Likelihood and representation metrics of `model` on `data`.
fn score(model: &VaeModel<f32>, data: &[Example], k: usize, seed: u64) -> Result<MetricsReport> {
    let ev = evaluate(model, data, 32, &ObjectiveConfig::default(), seed)?;
    let ppl = perplexity(model, data, k, seed)?;
    let mut report = MetricsReport {
        ppl: Some(ppl.ppl),
        elbo: Some(-(ev.recon + ev.kl)),
        kl: Some(ev.kl),
        ..Default::default()
    };
    if data.len() >= 2 {
        let summaries = posterior_summaries(model, data, 32, seed)?;
        report.mi = Some(mutual_information(&summaries, &mut RngState::new(seed).fork(0x41))?);
        report.au = Some(active_units(&summaries, DEFAULT_AU_THRESHOLD)?);
    }
    Ok(report)
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    report.write_json(&mut File::create(dir.join("metrics.json"))?)?;
    report.write_csv(&mut File::create(dir.join("metrics.csv"))?)?;
    Ok(())
}
