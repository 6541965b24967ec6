use crate::element::{gemm, Element};
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::tensor::Tensor;

/// Batch layout of a recorded matrix product.
#[derive(Debug, Clone, Copy)]
pub(crate) enum MatMulKind {
    /// `[.., m, k] x [k, n]`: lhs batch dims folded into rows.
    Folded { rows: usize, k: usize, n: usize },
    /// `[m, k] x [b.., k, n]`.
    SharedLhs { batch: usize, m: usize, k: usize, n: usize },
    /// `[b.., m, k] x [b.., k, n]` with equal batch dims.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

impl<T: Element> Tensor<T> {
    /// Matrix product over the two trailing axes.
    ///
    /// Supports a 2-D right operand (lhs batch dims are folded into rows), a
    /// 2-D left operand broadcast across the right operand's batch, and equal
    /// batch dims on both sides.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (a, b) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (kind, mut shape) = if b.len() == 2 {
            let rows = self.numel() / k;
            (MatMulKind::Folded { rows, k, n }, a[..a.len() - 1].to_vec())
        } else if a.len() == 2 {
            let batch = rhs.numel() / (k * n);
            let mut s = b[..b.len() - 2].to_vec();
            s.push(m);
            (MatMulKind::SharedLhs { batch, m, k, n }, s)
        } else if a[..a.len() - 2] == b[..b.len() - 2] {
            let batch = self.numel() / (m * k);
            (MatMulKind::Batched { batch, m, k, n }, a[..a.len() - 1].to_vec())
        } else {
            return Err(mismatch());
        };
        shape.push(n);
        let (ad, bd) = (self.data(), rhs.data());
        let out = match kind {
            MatMulKind::Folded { rows, k, n } => {
                let mut c = vec![T::zero(); rows * n];
                gemm(rows, k, n, &ad, false, &bd, false, &mut c, false);
                c
            }
            MatMulKind::SharedLhs { batch, m, k, n } => {
                let mut c = vec![T::zero(); batch * m * n];
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad,
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        false,
                        &mut c[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                c
            }
            MatMulKind::Batched { batch, m, k, n } => {
                let mut c = vec![T::zero(); batch * m * n];
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        false,
                        &mut c[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                c
            }
        };
        drop((ad, bd));
        Tensor::from_op("matmul", out, shape, Op::MatMul(kind), vec![self.clone(), rhs.clone()])
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "t",
                shape: self.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        self.permute(&[1, 0])
    }
}

pub(crate) fn matmul_backward<T: Element>(
    kind: &MatMulKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let (ad, bd) = (a.data(), b.data());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    match *kind {
        MatMulKind::Folded { rows, k, n } => {
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); rows * k];
                gemm(rows, n, k, g, false, &bd, true, &mut ga, false);
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, rows, n, &ad, true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }
        MatMulKind::SharedLhs { batch, m, k, n } => {
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); m * k];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm(m, n, k, gi, false, &bd[i * k * n..(i + 1) * k * n], true, &mut ga, true);
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm(k, m, n, &ad, true, gi, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
                gb
            });
            vec![ga, gb]
        }
        MatMulKind::Batched { batch, m, k, n } => {
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        true,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        }
    }
}
