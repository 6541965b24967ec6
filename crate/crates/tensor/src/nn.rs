use std::rc::Rc;

use crate::broadcast::Mapping;
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::tensor::{numel, Tensor};

/// Boolean attendability mask for [`Tensor::softmax`]; `true` entries
/// participate. Its last extent must equal the input's last extent; leading
/// extents broadcast.
#[derive(Debug, Clone)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Rc<Vec<bool>>,
}

impl Mask {
    pub fn new(keep: Vec<bool>, shape: &[usize]) -> Result<Self> {
        if keep.len() != numel(shape) || shape.is_empty() {
            return Err(TensorError::BufferLength {
                len: keep.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            keep: Rc::new(keep),
        })
    }

    /// Lower-triangular `[rows, cols]` mask where query `i` may attend keys
    /// `0..=i + offset`.
    pub fn causal(rows: usize, cols: usize, offset: usize) -> Self {
        let keep = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j <= i + offset))
            .collect();
        Self {
            shape: vec![rows, cols],
            keep: Rc::new(keep),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

impl<T: Element> Tensor<T> {
    /// Softmax over the last axis with max subtraction. Masked entries get
    /// exactly zero weight; a fully masked row is all zeros.
    pub fn softmax(&self, mask: Option<&Mask>) -> Result<Self> {
        let shape = self.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "scalar input".into(),
        })?;
        let rows = self.numel() / cols;
        let row_map = match mask {
            Some(m) => {
                let ok = m.shape.len() <= shape.len()
                    && m.shape.last() == Some(&cols)
                    && crate::broadcast::broadcast_shape(&shape, &m.shape).as_deref() == Some(&shape[..]);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax",
                        lhs: shape,
                        rhs: m.shape.clone(),
                    });
                }
                Some(Mapping::new(
                    &shape[..shape.len() - 1],
                    &m.shape[..m.shape.len() - 1],
                ))
            }
            None => None,
        };
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            let keep: Option<&[bool]> = match (mask, &row_map) {
                (Some(m), Some(map)) => {
                    let mr = map.index(r);
                    Some(&m.keep[mr * cols..(mr + 1) * cols])
                }
                _ => None,
            };
            let allowed = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = T::neg_infinity();
            for j in 0..cols {
                if allowed(j) && xr[j] > max {
                    max = xr[j];
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..cols {
                if allowed(j) {
                    let e = (xr[j] - max).exp();
                    or[j] = e;
                    sum = sum + e;
                }
            }
            let inv = T::one() / sum;
            for v in or.iter_mut() {
                *v = *v * inv;
            }
        }
        drop(x);
        Tensor::from_op(
            "softmax",
            out,
            shape,
            Op::Softmax { mask: mask.cloned() },
            vec![self.clone()],
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Self> {
        let shape = self.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "log_softmax",
            shape: shape.clone(),
            reason: "scalar input".into(),
        })?;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = xr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = max + xr.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
            or.iter_mut().zip(xr).for_each(|(o, &v)| *o = v - lse);
        }
        drop(x);
        Tensor::from_op("log_softmax", out, shape, Op::LogSoftmax, vec![self.clone()])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let shape = self.shape().to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let rows = x.len() / cols;
        let inv_n = T::of_f64(1.0 / cols as f64);
        let eps = T::of_f64(eps);
        let mut out = vec![T::zero(); x.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = xr.iter().fold(T::zero(), |a, &b| a + b) * inv_n;
            let var = xr.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..cols {
                or[j] = (xr[j] - mean) * rstd * gd[j] + bd[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        drop((x, gd, bd));
        Tensor::from_op(
            "layer_norm",
            out,
            shape,
            Op::LayerNorm { mean: means, rstd: rstds },
            vec![self.clone(), gamma.clone(), beta.clone()],
        )
    }

    /// Row lookup into a `[vocab, dim]` table; output shape is
    /// `batch_shape + [dim]`.
    pub fn embedding(&self, ids: &[usize], batch_shape: &[usize]) -> Result<Self> {
        if self.rank() != 2 || numel(batch_shape) != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: self.shape().to_vec(),
                rhs: batch_shape.to_vec(),
            });
        }
        let (vocab, dim) = (self.dim(0), self.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                extent: vocab,
            });
        }
        let w = self.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&w[i * dim..(i + 1) * dim]);
        }
        drop(w);
        let mut shape = batch_shape.to_vec();
        shape.push(dim);
        Tensor::from_op(
            "embedding",
            out,
            shape,
            Op::Embedding { ids: Rc::new(ids.to_vec()) },
            vec![self.clone()],
        )
    }

    /// Picks one entry per row of the last axis: `out[r] = x[r, idx[r]]`.
    pub fn pick(&self, idx: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let cols = *shape.last().unwrap_or(&1);
        if shape.is_empty() || self.numel() / cols != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: shape.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index {
                op: "pick",
                index: bad,
                extent: cols,
            });
        }
        let x = self.data();
        let out = idx.iter().enumerate().map(|(r, &i)| x[r * cols + i]).collect();
        drop(x);
        let out_shape = shape[..shape.len() - 1].to_vec();
        Tensor::from_op(
            "pick",
            out,
            out_shape,
            Op::Pick { idx: Rc::new(idx.to_vec()) },
            vec![self.clone()],
        )
    }
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], cols: usize, _masked: bool) -> Vec<T> {
    // Masked entries carry y = 0, so their gradient vanishes on its own.
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        for j in 0..cols {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

pub(crate) fn log_softmax_backward<T: Element>(y: &[T], g: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let gsum = gr.iter().fold(T::zero(), |a, &b| a + b);
        for j in 0..cols {
            dr[j] = gr[j] - yr[j].exp() * gsum;
        }
    }
    dx
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    rstd: &[T],
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let xd = x.data();
    let gd = gamma.data();
    let cols = gd.len();
    let inv_n = T::of_f64(1.0 / cols as f64);
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for (r, (xr, gr)) in xd.chunks(cols).zip(g.chunks(cols)).enumerate() {
        let (m, s) = (mean[r], rstd[r]);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..cols {
            xhat[j] = (xr[j] - m) * s;
            dxhat[j] = gr[j] * gd[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
            dgamma[j] = dgamma[j] + gr[j] * xhat[j];
            dbeta[j] = dbeta[j] + gr[j];
        }
        mean_dxhat = mean_dxhat * inv_n;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
        let dr = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dr[j] = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    vec![Some(dx), Some(dgamma), Some(dbeta)]
}

pub(crate) fn embedding_backward<T: Element>(w_shape: &[usize], ids: &[usize], g: &[T]) -> Vec<T> {
    let dim = w_shape[1];
    let mut dw = vec![T::zero(); numel(w_shape)];
    for (r, &i) in ids.iter().enumerate() {
        let dst = &mut dw[i * dim..(i + 1) * dim];
        dst.iter_mut()
            .zip(&g[r * dim..(r + 1) * dim])
            .for_each(|(d, &s)| *d = *d + s);
    }
    dw
}

pub(crate) fn pick_backward<T: Element>(x_shape: &[usize], idx: &[usize], g: &[T]) -> Vec<T> {
    let cols = *x_shape.last().unwrap_or(&1);
    let mut dx = vec![T::zero(); numel(x_shape)];
    for (r, &i) in idx.iter().enumerate() {
        dx[r * cols + i] = g[r];
    }
    dx
}
