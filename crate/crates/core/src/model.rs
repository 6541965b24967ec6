//! Encoder, latent heads, injection weights and decoder assembled into one
//! variational model.

use lvt_tensor::{Element, NoGradGuard, RngState, Tensor};

use crate::batch::{Batch, Example};
use crate::config::{EncoderAttention, ModelConfig};
use crate::error::{contract, Result};
use crate::fusion::FusionWeights;
use crate::latent::{build_chain, ChainInputs, ChainMode, LatentChain, LatentHeads};
use crate::nn::{ParamList, Params};
use crate::objective::{bag_counts, bow_loss, elbo, layerwise_kl, sequence_nll, BowHeads, LossBreakdown, ObjectiveConfig};
use crate::transformer::{AttentionPattern, ForwardOptions, ForwardOutput, Injection, TokenGrid, Transformer};

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone)]
pub struct VaeModel<T: Element> {
    pub config: ModelConfig,
    pub encoder: Transformer<T>,
    /// `None` when encoder and decoder share weights.
    decoder: Option<Transformer<T>>,
    pub heads: LatentHeads<T>,
    pub fusion: FusionWeights<T>,
    pub bow: Option<BowHeads<T>>,
}

/// Encoder states of a batch, indexed by `l - 1`.
#[derive(Debug, Clone)]
pub struct Encoded<T: Element> {
    pub x: Vec<Tensor<T>>,
    pub c: Option<Vec<Tensor<T>>>,
}

impl<T: Element> VaeModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed).fork(INIT_STREAM);
        let encoder = Transformer::new(&config, &mut rng);
        let decoder = (!config.share_encoder_decoder).then(|| Transformer::new(&config, &mut rng));
        let heads = LatentHeads::new(&config, &mut rng);
        let fusion = FusionWeights::new(&config, &mut rng)?;
        let bow = config.bow_heads.then(|| BowHeads::new(&config, &mut rng));
        Ok(Self {
            config,
            encoder,
            decoder,
            heads,
            fusion,
            bow,
        })
    }

    pub fn decoder(&self) -> &Transformer<T> {
        self.decoder.as_ref().unwrap_or(&self.encoder)
    }

    pub fn params(&self) -> ParamList<T> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        if let Some(d) = &self.decoder {
            d.collect_params("decoder", &mut out);
        }
        self.heads.collect_params("latent", &mut out);
        self.fusion.collect_params("fusion", &mut out);
        if let Some(b) = &self.bow {
            b.collect_params("bow", &mut out);
        }
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    fn pattern(&self, lengths: &[usize]) -> AttentionPattern {
        match self.config.encoder_attention {
            EncoderAttention::Bidirectional => AttentionPattern::Bidirectional {
                lengths: lengths.to_vec(),
            },
            EncoderAttention::Causal => AttentionPattern::Causal,
        }
    }

    /// First-position encoder states of `[BOS, text, EOS]` rows.
    pub fn encode(&self, tokens: &TokenGrid, lengths: &[usize]) -> Result<Vec<Tensor<T>>> {
        self.encoder.encode_representation(tokens, &self.pattern(lengths))
    }

    pub fn encode_batch(&self, batch: &Batch) -> Result<Encoded<T>> {
        if self.config.conditional != batch.condition.is_some() {
            return Err(contract("conditional model needs conditioned examples and vice versa"));
        }
        let x = self.encode(&batch.encoder, &batch.encoder_lengths)?;
        let c = match &batch.condition {
            Some((grid, lengths)) => Some(self.encode(grid, lengths)?),
            None => None,
        };
        Ok(Encoded { x, c })
    }

    /// Condition states for generation, `[BOS, condition, EOS]` per row.
    pub fn encode_conditions(&self, conditions: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
        let examples: Vec<Example> = conditions.iter().map(|c| Example::unconditional(c.clone())).collect();
        let b = Batch::new(&examples, self.config.max_len)?;
        self.encode(&b.encoder, &b.encoder_lengths)
    }

    pub fn posterior_chain(&self, enc: &Encoded<T>, rng: &mut RngState) -> Result<LatentChain<T>> {
        let inputs = ChainInputs {
            x: Some(&enc.x),
            c: enc.c.as_deref(),
            batch: enc.x[0].dim(0),
            separate_latents: self.config.separate_latents,
        };
        build_chain(&self.heads, &inputs, ChainMode::Posterior, rng)
    }

    pub fn prior_chain(&self, batch: usize, c: Option<&[Tensor<T>]>, rng: &mut RngState) -> Result<LatentChain<T>> {
        if self.config.conditional != c.is_some() {
            return Err(contract("prior chain of a conditional model needs condition states"));
        }
        let inputs = ChainInputs {
            x: None,
            c,
            batch,
            separate_latents: self.config.separate_latents,
        };
        build_chain(&self.heads, &inputs, ChainMode::Prior, rng)
    }

    /// Decoder pass driven by `chain`; every paradigm requires one.
    pub fn decoder_forward(
        &self,
        tokens: &TokenGrid,
        chain: Option<&LatentChain<T>>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        self.decoder_forward_masked(tokens, chain, opts, false)
    }

    /// As [`Self::decoder_forward`], optionally hiding the memory slot.
    pub fn decoder_forward_masked(
        &self,
        tokens: &TokenGrid,
        chain: Option<&LatentChain<T>>,
        opts: ForwardOptions,
        mask_memory: bool,
    ) -> Result<ForwardOutput<T>> {
        let chain = chain.ok_or_else(|| {
            contract(format!("{} paradigm needs latents for the decoder", self.config.paradigm.name()))
        })?;
        if chain.batch() != tokens.batch {
            return Err(contract(format!("chain batch {} vs token batch {}", chain.batch(), tokens.batch)));
        }
        let inj = self.fusion.injection(chain, self.config.num_layers, mask_memory)?;
        self.decoder().forward(tokens, &AttentionPattern::Causal, &inj, opts)
    }

    /// Decoder pass with no latent at any site.
    pub fn plain_forward(&self, tokens: &TokenGrid, opts: ForwardOptions) -> Result<ForwardOutput<T>> {
        self.decoder().forward(tokens, &AttentionPattern::Causal, &Injection::none(), opts)
    }

    /// Single-sample ELBO of `batch` with KL weight `beta`.
    pub fn loss(&self, batch: &Batch, beta: f64, obj: &ObjectiveConfig, rng: &mut RngState) -> Result<LossBreakdown<T>> {
        let enc = self.encode_batch(batch)?;
        let chain = self.posterior_chain(&enc, rng)?;
        let out = self.decoder_forward(&batch.decoder, Some(&chain), ForwardOptions::default())?;
        let logits = out.logits.expect("logits requested");
        let recon = sequence_nll(&logits, &batch.targets, &batch.keep)?.mean_all()?;
        let kl = layerwise_kl(&chain)?;
        let bow = match &self.bow {
            Some(heads) if obj.bow_weight > 0.0 => {
                let counts = bag_counts(&batch.targets, &batch.keep, batch.size(), self.config.vocab_size)?;
                Some(bow_loss(heads, &chain, &counts)?)
            }
            _ => None,
        };
        elbo(recon, &kl, bow, beta, self.config.kl_layers, self.config.num_layers, obj)
    }

    /// `k` importance log-weights `log p(x, z_i) - log q(z_i | x)` of one
    /// example under full-chain posterior samples.
    pub fn log_weights(&self, example: &Example, k: usize, rng: &mut RngState) -> Result<Vec<f64>> {
        let _guard = NoGradGuard::new();
        let batch = Batch::new(std::slice::from_ref(example), self.config.max_len)?;
        let enc = self.encode_batch(&batch)?;
        let repeat = |t: &Tensor<T>| -> Result<Tensor<T>> { Ok(Tensor::zeros(&[k, t.dim(1)]).add(t)?) };
        let enc_k = Encoded {
            x: enc.x.iter().map(repeat).collect::<Result<_>>()?,
            c: match &enc.c {
                Some(c) => Some(c.iter().map(repeat).collect::<Result<_>>()?),
                None => None,
            },
        };
        let chain = self.posterior_chain(&enc_k, rng)?;
        let s = batch.decoder.len;
        let grid = TokenGrid::new(batch.decoder.ids.repeat(k), k, s)?;
        let logits = self
            .decoder_forward(&grid, Some(&chain), ForwardOptions::default())?
            .logits
            .expect("logits requested");
        let nll = sequence_nll(&logits, &batch.targets.repeat(k), &batch.keep.repeat(k))?;
        let log_w = chain.log_prior()?.sub(&chain.log_posterior()?)?.sub(&nll)?;
        Ok(log_w.to_f64_vec())
    }
}
