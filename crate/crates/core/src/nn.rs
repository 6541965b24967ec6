//! Parameter containers shared by the model components.

use lvt_tensor::{Element, RngState, Tensor};

use crate::error::Result;

/// Named parameter list, in a stable order.
pub type ParamList<T> = Vec<(String, Tensor<T>)>;

pub trait Params<T: Element> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>);

    fn params(&self) -> ParamList<T> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_param<T: Element>(shape: &[usize], std: f64, rng: &mut RngState) -> Tensor<T> {
    Tensor::randn(shape, std, rng).into_param()
}

pub(crate) fn zero_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).into_param()
}

/// `y = x W (+ b)` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(input: usize, output: usize, bias: bool, std: f64, rng: &mut RngState) -> Self {
        Self {
            weight: normal_param(&[input, output], std, rng),
            bias: bias.then(|| zero_param(&[output])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.add(b)?,
            None => y,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim(1)
    }
}

impl<T: Element> Params<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]).into_param(),
            beta: zero_param(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(&self.gamma, &self.beta, Self::EPS)?)
    }
}

impl<T: Element> Params<T> for LayerNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut ParamList<T>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}
