use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (of `shape`) into the layout obtained by reordering axes with
/// `perm`: output axis `i` is input axis `perm[i]`.
fn permute_data<T: Element>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return src.to_vec();
    }
    // The innermost output axis is walked as a strided run.
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..n / inner {
        let mut o = off;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_step;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.iter().any(|&s| s == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.rank()];
        let valid = perm.len() == self.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let data = permute_data(&self.data(), self.shape(), perm);
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Tensor::from_op("permute", data, shape, Op::Permute { perm: perm.to_vec() }, vec![self.clone()])
    }

    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Self> {
        check_axis("transpose", self.shape(), a0.max(a1))?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a0, a1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        check_axis("concat", first.shape(), axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let others_match = same_rank
                && (0..p.rank()).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !others_match {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            shape[axis] += p.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&views) {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(views);
        Tensor::from_op("concat", data, shape, Op::Concat { axis }, parts.to_vec())
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis("narrow", self.shape(), axis)?;
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", data, shape, Op::Narrow { axis, start }, vec![self.clone()])
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Self> {
        let t = self.narrow(axis, index, 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        t.reshape(&shape)
    }

    pub fn sum_all(&self) -> Result<Self> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        Tensor::from_op("sum_all", vec![s], Vec::new(), Op::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = self.numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        check_axis("sum_axis", self.shape(), axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let row = &src[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
            }
        }
        drop(src);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Tensor::from_op("sum_axis", out, out_shape, Op::SumAxis { axis }, vec![self.clone()])
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }
}

pub(crate) fn permute_backward<T: Element>(out_shape: &[usize], perm: &[usize], g: &[T]) -> Vec<T> {
    permute_data(g, out_shape, &inverse(perm))
}

pub(crate) fn concat_backward<T: Element>(
    parts: &[Tensor<T>],
    axis: usize,
    out_shape: &[usize],
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let row = out_shape[axis] * inner;
    let mut offset = 0;
    parts
        .iter()
        .map(|p| {
            let chunk = p.shape()[axis] * inner;
            let grad = p.requires_grad().then(|| {
                let mut v = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    v.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                }
                v
            });
            offset += chunk;
            grad
        })
        .collect()
}

pub(crate) fn narrow_backward<T: Element>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[T],
) -> Vec<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let extent = in_shape[axis];
    let len = out_shape[axis];
    let mut v = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        v[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    v
}

pub(crate) fn sum_axis_backward<T: Element>(in_shape: &[usize], axis: usize, g: &[T]) -> Vec<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let extent = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut v = Vec::with_capacity(numel(in_shape));
    for o in 0..outer {
        for _ in 0..extent {
            v.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    v
}
