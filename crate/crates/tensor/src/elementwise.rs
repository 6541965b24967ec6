use crate::broadcast::{broadcast_shape, reduce_to, Mapping};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn binary<T: Element>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: Op<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: name,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let ma = Mapping::new(&shape, a.shape());
        let mb = Mapping::new(&shape, b.shape());
        (0..n).map(|i| f(ad[ma.index(i)], bd[mb.index(i)])).collect()
    };
    drop((ad, bd));
    Tensor::from_op(name, data, shape, op, vec![a.clone(), b.clone()])
}

fn unary<T: Element>(name: &'static str, a: &Tensor<T>, op: Op<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let data: Vec<T> = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_op(name, data, a.shape().to_vec(), op, vec![a.clone()])
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        binary("add", self, other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        binary("sub", self, other, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        binary("mul", self, other, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        if other.data().iter().any(|x| x.is_zero()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        binary("div", self, other, Op::Div, |x, y| x / y)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        let (s, b) = (T::of_f64(scale), T::of_f64(shift));
        unary("affine", self, Op::Affine(s), |x| s * x + b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Result<Self> {
        unary("neg", self, Op::Neg, |x| -x)
    }

    pub fn exp(&self) -> Result<Self> {
        unary("exp", self, Op::Exp, |x| x.exp())
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(bad) = self.data().iter().find(|x| **x <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        unary("log", self, Op::Log, |x| x.ln())
    }

    pub fn tanh(&self) -> Result<Self> {
        unary("tanh", self, Op::Tanh, |x| x.tanh())
    }

    /// GELU with the tanh approximation used by GPT-2.
    pub fn gelu(&self) -> Result<Self> {
        unary("gelu", self, Op::Gelu, |x| T::of_f64(gelu_f64(x.as_f64())))
    }

    pub fn square(&self) -> Result<Self> {
        unary("square", self, Op::Square, |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero wherever the clamp engages.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        unary("clamp", self, Op::Clamp { lo, hi }, |x| x.max(lo).min(hi))
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor engages.
    pub fn floor_at(&self, floor: f64) -> Result<Self> {
        let f = T::of_f64(floor);
        unary("floor_at", self, Op::Floor(f), |x| x.max(f))
    }
}

pub(crate) fn binary_backward<T: Element>(
    op: &Op<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let n = g.len();
    let ma = Mapping::new(out_shape, a.shape());
    let mb = Mapping::new(out_shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let (ga, gb): (Vec<T>, Vec<T>) = match op {
        Op::Add => (g.to_vec(), g.to_vec()),
        Op::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
        Op::Mul => (
            (0..n).map(|i| g[i] * bd[mb.index(i)]).collect(),
            (0..n).map(|i| g[i] * ad[ma.index(i)]).collect(),
        ),
        Op::Div => (
            (0..n).map(|i| g[i] / bd[mb.index(i)]).collect(),
            (0..n)
                .map(|i| {
                    let y = bd[mb.index(i)];
                    -g[i] * ad[ma.index(i)] / (y * y)
                })
                .collect(),
        ),
        _ => unreachable!("binary_backward on non-binary op"),
    };
    let ga = a.requires_grad().then(|| reduce_to(&ga, out_shape, a.shape()));
    let gb = b.requires_grad().then(|| reduce_to(&gb, out_shape, b.shape()));
    vec![ga, gb]
}

pub(crate) fn unary_backward<T: Element>(op: &Op<T>, x: &[T], g: &[T]) -> Vec<T> {
    let two = T::of_f64(2.0);
    x.iter()
        .zip(g)
        .map(|(&x, &g)| match op {
            Op::Log => g / x,
            Op::Gelu => g * T::of_f64(gelu_grad_f64(x.as_f64())),
            Op::Square => g * two * x,
            Op::Clamp { lo, hi } => {
                if x > *lo && x < *hi {
                    g
                } else {
                    T::zero()
                }
            }
            Op::Floor(f) => {
                if x > *f {
                    g
                } else {
                    T::zero()
                }
            }
            _ => unreachable!("unary_backward on unsupported op"),
        })
        .collect()
}
