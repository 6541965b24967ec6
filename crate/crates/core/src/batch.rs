//! Padded encoder/decoder views of a set of examples.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::harness::tokenizer::{BOS, EOS, PAD, SEP};
use crate::transformer::TokenGrid;

/// One training sample as byte ids, without special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: Vec<usize>,
    pub condition: Option<Vec<usize>>,
}

impl Example {
    pub fn unconditional(text: Vec<usize>) -> Self {
        Self { text, condition: None }
    }

    /// Encoder input `[BOS, text.., EOS]`.
    pub fn encoder_ids(text: &[usize]) -> Vec<usize> {
        let mut v = Vec::with_capacity(text.len() + 2);
        v.push(BOS);
        v.extend_from_slice(text);
        v.push(EOS);
        v
    }

    /// Decoder prefix before the first predicted token: `[BOS]` or
    /// `[BOS, condition.., SEP]`.
    pub fn decoder_prefix(condition: Option<&[usize]>) -> Vec<usize> {
        let mut v = vec![BOS];
        if let Some(c) = condition {
            v.extend_from_slice(c);
            v.push(SEP);
        }
        v
    }

    /// Tokens the decoder predicts: text followed by EOS.
    pub fn target_count(&self) -> usize {
        self.text.len() + 1
    }

    /// Longest padded length among the encoder and decoder views.
    pub fn required_len(&self) -> usize {
        let enc = self.text.len() + 2;
        let cond = self.condition.as_ref().map_or(0, |c| c.len() + 2);
        let dec = Self::decoder_prefix(self.condition.as_deref()).len() + self.text.len();
        enc.max(cond).max(dec)
    }
}

/// Left-aligned rows padded with PAD to a common length.
fn pad_rows(rows: &[Vec<usize>]) -> Result<(TokenGrid, Vec<usize>)> {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
    let mut ids = Vec::with_capacity(rows.len() * len);
    for r in rows {
        ids.extend_from_slice(r);
        ids.extend(std::iter::repeat_n(PAD, len - r.len()));
    }
    Ok((TokenGrid::new(ids, rows.len(), len)?, lengths))
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub encoder: TokenGrid,
    pub encoder_lengths: Vec<usize>,
    pub condition: Option<(TokenGrid, Vec<usize>)>,
    /// Decoder input `[BOS, (condition, SEP)?, text]`, padded.
    pub decoder: TokenGrid,
    /// Next-token targets aligned with `decoder`.
    pub targets: Vec<usize>,
    /// True on text and EOS targets.
    pub keep: Vec<bool>,
}

impl Batch {
    pub fn new(examples: &[Example], max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(contract("empty batch"));
        }
        let conditional = examples[0].condition.is_some();
        if examples.iter().any(|e| e.condition.is_some() != conditional) {
            return Err(contract("batch mixes conditional and unconditional examples"));
        }
        if let Some(e) = examples.iter().find(|e| e.required_len() > max_len) {
            return Err(contract(format!(
                "example needs length {} but max_len is {max_len}",
                e.required_len()
            )));
        }
        let (encoder, encoder_lengths) =
            pad_rows(&examples.iter().map(|e| Example::encoder_ids(&e.text)).collect::<Vec<_>>())?;
        let condition = if conditional {
            let rows: Vec<_> = examples
                .iter()
                .map(|e| Example::encoder_ids(e.condition.as_deref().unwrap_or_default()))
                .collect();
            Some(pad_rows(&rows)?)
        } else {
            None
        };
        let mut inputs = Vec::with_capacity(examples.len());
        let mut target_rows = Vec::with_capacity(examples.len());
        for e in examples {
            let prefix = Example::decoder_prefix(e.condition.as_deref());
            let mut full = prefix.clone();
            full.extend_from_slice(&e.text);
            full.push(EOS);
            let n = full.len() - 1;
            let first_kept = prefix.len() - 1;
            inputs.push(full[..n].to_vec());
            target_rows.push((full[1..].to_vec(), first_kept));
        }
        let (decoder, _) = pad_rows(&inputs)?;
        let s = decoder.len;
        let mut targets = Vec::with_capacity(examples.len() * s);
        let mut keep = Vec::with_capacity(examples.len() * s);
        for (t, first) in &target_rows {
            for j in 0..s {
                let real = j < t.len();
                targets.push(if real { t[j] } else { PAD });
                keep.push(real && j >= *first);
            }
        }
        Ok(Self {
            encoder,
            encoder_lengths,
            condition,
            decoder,
            targets,
            keep,
        })
    }

    pub fn size(&self) -> usize {
        self.encoder.batch
    }

    pub fn target_tokens(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconditional_layout() {
        let b = Batch::new(&[Example::unconditional(vec![1, 2]), Example::unconditional(vec![3])], 8).unwrap();
        assert_eq!(b.encoder.ids, vec![BOS, 1, 2, EOS, BOS, 3, EOS, PAD]);
        assert_eq!(b.encoder_lengths, vec![4, 3]);
        assert_eq!(b.decoder.ids, vec![BOS, 1, 2, BOS, 3, PAD]);
        assert_eq!(b.targets, vec![1, 2, EOS, 3, EOS, PAD]);
        assert_eq!(b.keep, vec![true, true, true, true, true, false]);
        assert_eq!(b.target_tokens(), 5);
    }

    #[test]
    fn conditional_layout_masks_the_prefix() {
        let e = Example { text: vec![7], condition: Some(vec![4, 5]) };
        let b = Batch::new(&[e], 8).unwrap();
        assert_eq!(b.decoder.ids, vec![BOS, 4, 5, SEP, 7]);
        assert_eq!(b.targets, vec![4, 5, SEP, 7, EOS]);
        assert_eq!(b.keep, vec![false, false, false, true, true]);
        assert_eq!(b.condition.unwrap().0.ids, vec![BOS, 4, 5, EOS]);
    }

    #[test]
    fn too_long_examples_are_rejected() {
        assert!(Batch::new(&[Example::unconditional(vec![1; 7])], 8).is_err());
        assert!(Batch::new(&[Example::unconditional(vec![1; 6])], 8).is_ok());
    }
}
