//! Pre-norm Transformer stack used as both encoder and decoder.

use lvt_tensor::{Element, Mask, RngState, Tensor};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::nn::{join, normal_param, LayerNorm, Linear, ParamList, Params};

/// Token ids laid out `[batch, len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(contract(format!(
                "token grid of {} ids cannot be shaped [{batch}, {len}]",
                ids.len()
            )));
        }
        Ok(Self { ids, batch, len })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Attention pattern for one forward pass.
#[derive(Debug, Clone)]
pub enum AttentionPattern {
    Causal,
    /// Full attention over the first `lengths[b]` positions of each row.
    Bidirectional { lengths: Vec<usize> },
}

/// Value-stream transform applied inside one attention layer.
pub type ValueFn<'a, T> = Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a>;

/// Latent contribution at a single layer.
pub enum LayerInjection<'a, T: Element> {
    None,
    /// Replaces the value stream `[batch, seq, d]` before attention.
    Values(ValueFn<'a, T>),
    /// Extra key/value slot built from a `[batch, d]` hidden vector. When
    /// `masked`, no position may attend to it.
    Memory { slot: Tensor<T>, masked: bool },
}

/// Every site where a latent can enter a forward pass.
pub struct Injection<'a, T: Element> {
    /// `[batch, d]` added to every input embedding.
    pub input: Option<Tensor<T>>,
    /// One entry per layer, or empty for none.
    pub layers: Vec<LayerInjection<'a, T>>,
    /// `[batch, d]` added to every final hidden state before the LM head.
    pub output: Option<Tensor<T>>,
}

impl<T: Element> Injection<'_, T> {
    pub fn none() -> Self {
        Self {
            input: None,
            layers: Vec::new(),
            output: None,
        }
    }
}

impl<T: Element> Default for Injection<'_, T> {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub logits: bool,
    pub capture_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            logits: true,
            capture_attention: false,
        }
    }
}

/// Per-layer intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct LayerActivations<T: Element> {
    /// Output of block `l` (index `l - 1`), `[batch, seq, d]`.
    pub hidden: Vec<Tensor<T>>,
    /// Attention weights `[batch, heads, seq, keys]` per layer when captured.
    /// With a memory slot, key column 0 is the slot.
    pub attention: Vec<Tensor<T>>,
    pub memory_slot: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element> {
    /// `[batch, seq, vocab]`, when requested.
    pub logits: Option<Tensor<T>>,
    pub activations: LayerActivations<T>,
}

#[derive(Debug, Clone)]
pub struct Attention<T: Element> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    heads: usize,
}

impl<T: Element> Attention<T> {
    fn new(d: usize, heads: usize, std: f64, rng: &mut RngState) -> Self {
        Self {
            qkv: Linear::new(d, 3 * d, true, std, rng),
            out: Linear::new(d, d, true, std, rng),
            heads,
        }
    }

    fn d(&self) -> usize {
        self.out.output_dim()
    }

    /// Query, key and value projection matrices `[d, d]` and biases `[d]`.
    pub fn projection(&self, which: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = self.d();
        let w = self.qkv.weight.narrow(1, which * d, d)?;
        let b = match &self.qkv.bias {
            Some(b) => b.narrow(0, which * d, d)?,
            None => Tensor::zeros(&[d]),
        };
        Ok((w, b))
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mask: &Mask,
        inj: &LayerInjection<'_, T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, s, d) = (x.dim(0), x.dim(1), self.d());
        let (h, dh) = (self.heads, d / self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let mut v = qkv.narrow(2, 2 * d, d)?;
        if let LayerInjection::Values(f) = inj {
            v = f(&v)?;
            if v.shape() != [b, s, d] {
                return Err(contract(format!("value transform returned shape {:?}", v.shape())));
            }
        }
        let qh = q.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3])?;
        let kt = k.reshape(&[b, s, h, dh])?.permute(&[0, 2, 3, 1])?;
        let vh = v.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3])?;
        let scores = qh.matmul(&kt)?.scale(scale)?;
        let (probs, mixed) = match inj {
            LayerInjection::Memory { slot, .. } => {
                if slot.shape() != [b, d] {
                    return Err(contract(format!("memory slot shape {:?}, expected [{b}, {d}]", slot.shape())));
                }
                let sp = self.qkv.forward(slot)?;
                let ks = sp.narrow(1, d, d)?.reshape(&[b, h, dh, 1])?;
                let vs = sp.narrow(1, 2 * d, d)?.reshape(&[b, h, 1, dh])?;
                let slot_scores = qh.matmul(&ks)?.scale(scale)?;
                let all = Tensor::concat(&[slot_scores, scores], 3)?;
                let probs = all.softmax(Some(mask))?;
                let p_slot = probs.narrow(3, 0, 1)?;
                let p_tok = probs.narrow(3, 1, s)?;
                let mixed = p_tok.matmul(&vh)?.add(&p_slot.matmul(&vs)?)?;
                (probs, mixed)
            }
            _ => {
                let probs = scores.softmax(Some(mask))?;
                let mixed = probs.matmul(&vh)?;
                (probs, mixed)
            }
        };
        let merged = mixed.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
        Ok((self.out.forward(&merged)?, probs))
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Element> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

impl<T: Element> Block<T> {
    fn new(d: usize, heads: usize, std: f64, rng: &mut RngState) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, std, rng),
            ln2: LayerNorm::new(d),
            fc: Linear::new(d, 4 * d, true, std, rng),
            proj: Linear::new(4 * d, d, true, std, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, mask: &Mask, inj: &LayerInjection<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, probs) = self.attn.forward(&self.ln1.forward(x)?, mask, inj)?;
        let x = x.add(&a)?;
        let m = self.proj.forward(&self.fc.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x.add(&m)?, probs))
    }
}

impl<T: Element> Params<T> for Block<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        self.ln1.collect_params(&join(prefix, "ln1"), out);
        self.attn.qkv.collect_params(&join(prefix, "attn.qkv"), out);
        self.attn.out.collect_params(&join(prefix, "attn.out"), out);
        self.ln2.collect_params(&join(prefix, "ln2"), out);
        self.fc.collect_params(&join(prefix, "mlp.fc"), out);
        self.proj.collect_params(&join(prefix, "mlp.proj"), out);
    }
}

/// Token and position embeddings, `L` blocks, a final norm and an LM head
/// tied to the token embeddings.
#[derive(Debug, Clone)]
pub struct Transformer<T: Element> {
    pub wte: Tensor<T>,
    pub wpe: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    heads: usize,
}

impl<T: Element> Transformer<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let (d, std) = (cfg.hidden_dim, cfg.init_std);
        Self {
            wte: normal_param(&[cfg.vocab_size, d], std, rng),
            wpe: normal_param(&[cfg.max_len, d], std, rng),
            blocks: (0..cfg.num_layers).map(|_| Block::new(d, cfg.num_heads, std, rng)).collect(),
            ln_f: LayerNorm::new(d),
            heads: cfg.num_heads,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wte.dim(1)
    }

    pub fn vocab_size(&self) -> usize {
        self.wte.dim(0)
    }

    pub fn max_len(&self) -> usize {
        self.wpe.dim(0)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    fn mask(&self, tokens: &TokenGrid, pattern: &AttentionPattern, slot: Option<bool>) -> Result<Mask> {
        let (b, s) = (tokens.batch, tokens.len);
        let extra = usize::from(slot.is_some());
        let slot_keep = slot.map(|masked| !masked);
        Ok(match pattern {
            AttentionPattern::Causal => {
                if extra == 0 {
                    Mask::causal(s, s, 0)
                } else {
                    let keep = (0..s)
                        .flat_map(|i| {
                            slot_keep.into_iter().chain((0..s).map(move |j| j <= i))
                        })
                        .collect();
                    Mask::new(keep, &[s, s + extra])?
                }
            }
            AttentionPattern::Bidirectional { lengths } => {
                if lengths.len() != b || lengths.iter().any(|&n| n == 0 || n > s) {
                    return Err(contract(format!("invalid encoder lengths {lengths:?} for length {s}")));
                }
                let keep = lengths
                    .iter()
                    .flat_map(|&n| slot_keep.into_iter().chain((0..s).map(move |j| j < n)))
                    .collect();
                Mask::new(keep, &[b, 1, 1, s + extra])?
            }
        })
    }

    /// Embeds `tokens`, runs every block and optionally the LM head.
    pub fn forward(
        &self,
        tokens: &TokenGrid,
        pattern: &AttentionPattern,
        inj: &Injection<'_, T>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        let (b, s, d) = (tokens.batch, tokens.len, self.hidden_dim());
        if s > self.max_len() {
            return Err(contract(format!("sequence length {s} exceeds max_len {}", self.max_len())));
        }
        if !inj.layers.is_empty() && inj.layers.len() != self.num_layers() {
            return Err(contract(format!(
                "{} layer injections for {} layers",
                inj.layers.len(),
                self.num_layers()
            )));
        }
        let tok = self.wte.embedding(&tokens.ids, &[b, s])?;
        let pos = self.wpe.narrow(0, 0, s)?;
        let mut h = tok.add(&pos)?;
        if let Some(e) = &inj.input {
            h = h.add(&e.reshape(&[b, 1, d])?)?;
        }
        let plain_mask = self.mask(tokens, pattern, None)?;
        let mut acts = LayerActivations {
            hidden: Vec::with_capacity(self.num_layers()),
            attention: Vec::new(),
            memory_slot: Vec::with_capacity(self.num_layers()),
        };
        let none = LayerInjection::None;
        for (l, block) in self.blocks.iter().enumerate() {
            let li = inj.layers.get(l).unwrap_or(&none);
            let slot_mask;
            let mask = match li {
                LayerInjection::Memory { masked, .. } => {
                    slot_mask = self.mask(tokens, pattern, Some(*masked))?;
                    &slot_mask
                }
                _ => &plain_mask,
            };
            let (next, probs) = block.forward(&h, mask, li)?;
            h = next;
            acts.hidden.push(h.clone());
            acts.memory_slot.push(matches!(li, LayerInjection::Memory { .. }));
            if opts.capture_attention {
                acts.attention.push(probs.detach());
            }
        }
        let logits = if opts.logits {
            let mut top = self.ln_f.forward(&h)?;
            if let Some(o) = &inj.output {
                top = top.add(&o.reshape(&[b, 1, d])?)?;
            }
            Some(top.matmul(&self.wte.t()?)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            activations: acts,
        })
    }

    /// First-position hidden state at every layer, `L` tensors of `[batch, d]`.
    pub fn encode_representation(&self, tokens: &TokenGrid, pattern: &AttentionPattern) -> Result<Vec<Tensor<T>>> {
        let out = self.forward(
            tokens,
            pattern,
            &Injection::none(),
            ForwardOptions {
                logits: false,
                capture_attention: false,
            },
        )?;
        out.activations
            .hidden
            .iter()
            .map(|h| Ok(h.narrow(1, 0, 1)?.reshape(&[tokens.batch, self.hidden_dim()])?))
            .collect()
    }
}

impl<T: Element> Params<T> for Transformer<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        out.push((join(prefix, "wte"), self.wte.clone()));
        out.push((join(prefix, "wpe"), self.wpe.clone()));
        for (l, block) in self.blocks.iter().enumerate() {
            block.collect_params(&join(prefix, &format!("h{}", l + 1)), out);
        }
        self.ln_f.collect_params(&join(prefix, "ln_f"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderAttention;

    fn tiny() -> (ModelConfig, Transformer<f64>) {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            latent_dim: 4,
            vocab_size: 12,
            max_len: 10,
            encoder_attention: EncoderAttention::Causal,
            init_std: 0.3,
            ..Default::default()
        };
        let mut rng = RngState::new(1);
        let t = Transformer::new(&cfg, &mut rng);
        (cfg, t)
    }

    fn grid(rows: &[&[usize]]) -> TokenGrid {
        let len = rows[0].len();
        TokenGrid::new(rows.concat(), rows.len(), len).unwrap()
    }

    fn logits(t: &Transformer<f64>, g: &TokenGrid) -> Vec<f64> {
        t.forward(g, &AttentionPattern::Causal, &Injection::none(), ForwardOptions::default())
            .unwrap()
            .logits
            .unwrap()
            .to_vec()
    }

    #[test]
    fn logits_are_causal() {
        let (cfg, t) = tiny();
        let a = grid(&[&[1, 2, 3, 4, 5]]);
        let b = grid(&[&[1, 2, 3, 9, 0]]);
        let (la, lb) = (logits(&t, &a), logits(&t, &b));
        let v = cfg.vocab_size;
        assert_eq!(la[..3 * v], lb[..3 * v]);
        assert_ne!(la[3 * v..4 * v], lb[3 * v..4 * v]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (_, t) = tiny();
        let g = grid(&[&[1, 2, 3, 4], &[4, 3, 2, 1]]);
        let out = t
            .forward(&g, &AttentionPattern::Causal, &Injection::none(), ForwardOptions { logits: true, capture_attention: true })
            .unwrap();
        assert_eq!(out.activations.attention.len(), 2);
        for a in &out.activations.attention {
            assert_eq!(a.shape(), &[2, 2, 4, 4]);
            for row in a.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_encoder_first_state_ignores_later_tokens() {
        let (_, t) = tiny();
        let a = grid(&[&[1, 2, 3, 4]]);
        let b = grid(&[&[1, 7, 8, 9]]);
        let c = grid(&[&[5, 2, 3, 4]]);
        let ra = t.encode_representation(&a, &AttentionPattern::Causal).unwrap();
        let rb = t.encode_representation(&b, &AttentionPattern::Causal).unwrap();
        let rc = t.encode_representation(&c, &AttentionPattern::Causal).unwrap();
        for l in 0..2 {
            assert_eq!(ra[l].to_vec(), rb[l].to_vec());
        }
        assert_ne!(ra[0].to_vec(), rc[0].to_vec());
    }

    #[test]
    fn bidirectional_encoder_sees_the_whole_unpadded_input() {
        let (_, t) = tiny();
        let pat = |n: usize| AttentionPattern::Bidirectional { lengths: vec![n] };
        let a = grid(&[&[1, 2, 3, 4]]);
        let b = grid(&[&[1, 2, 3, 9]]);
        let ra = t.encode_representation(&a, &pat(4)).unwrap();
        let rb = t.encode_representation(&b, &pat(4)).unwrap();
        assert_ne!(ra[0].to_vec(), rb[0].to_vec());
        // padding beyond the length is invisible
        let ra3 = t.encode_representation(&a, &pat(3)).unwrap();
        let rb3 = t.encode_representation(&b, &pat(3)).unwrap();
        assert_eq!(ra3[1].to_vec(), rb3[1].to_vec());
    }

    #[test]
    fn masked_memory_slot_matches_plain_forward() {
        let (_, t) = tiny();
        let g = grid(&[&[1, 2, 3], &[3, 2, 1]]);
        let plain = logits(&t, &g);
        let mut rng = RngState::new(9);
        let slot = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let inj = |masked| Injection {
            input: None,
            layers: (0..2).map(|_| LayerInjection::Memory { slot: slot.clone(), masked }).collect(),
            output: None,
        };
        let opts = ForwardOptions { logits: true, capture_attention: true };
        let masked = t.forward(&g, &AttentionPattern::Causal, &inj(true), opts).unwrap();
        assert_eq!(masked.logits.unwrap().to_vec(), plain);
        let open = t.forward(&g, &AttentionPattern::Causal, &inj(false), opts).unwrap();
        assert_ne!(open.logits.unwrap().to_vec(), plain);
        let a = &open.activations.attention[0];
        assert_eq!(a.shape(), &[2, 2, 3, 4]);
        for row in a.data().chunks(4) {
            assert!(row[0] > 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequences_longer_than_max_len_are_rejected() {
        let (_, t) = tiny();
        let g = TokenGrid::new(vec![1; 11], 1, 11).unwrap();
        assert!(t.forward(&g, &AttentionPattern::Causal, &Injection::none(), ForwardOptions::default()).is_err());
    }
}
