use std::rc::Rc;

use crate::element::Element;
use crate::error::Result;
use crate::tensor::Node;
use crate::{elementwise, layout, linalg, nn, Mask};

/// Recorded operation of a graph node, with whatever forward context its
/// backward rule needs beyond the parents' values and the node output.
pub(crate) enum Op<T: Element> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine(T),
    Neg,
    Exp,
    Log,
    Tanh,
    Gelu,
    Square,
    Clamp { lo: T, hi: T },
    Floor(T),
    SumAll,
    SumAxis { axis: usize },
    MatMul(linalg::MatMulKind),
    Permute { perm: Vec<usize> },
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Softmax { mask: Option<Mask> },
    LogSoftmax,
    LayerNorm { mean: Vec<T>, rstd: Vec<T> },
    Embedding { ids: Rc<Vec<usize>> },
    Pick { idx: Rc<Vec<usize>> },
}

/// Gradients for each parent of `node` given the gradient of its output.
pub(crate) fn backward<T: Element>(node: &Node<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let p = &node.parents;
    let out = node.data.borrow();
    let grads = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            elementwise::binary_backward(&node.op, &p[0], &p[1], &node.shape, g)
        }
        Op::Affine(a) => vec![Some(g.iter().map(|&x| x * *a).collect())],
        Op::Neg => vec![Some(g.iter().map(|&x| -x).collect())],
        Op::Exp => vec![Some(g.iter().zip(out.iter()).map(|(&g, &y)| g * y).collect())],
        Op::Tanh => vec![Some(
            g.iter()
                .zip(out.iter())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
        )],
        Op::Log | Op::Gelu | Op::Square | Op::Clamp { .. } | Op::Floor(_) => {
            vec![Some(elementwise::unary_backward(&node.op, &p[0].data(), g))]
        }
        Op::SumAll => {
            let n = p[0].numel();
            vec![Some(vec![g[0]; n])]
        }
        Op::SumAxis { axis } => vec![Some(layout::sum_axis_backward(p[0].shape(), *axis, g))],
        Op::MatMul(kind) => linalg::matmul_backward(kind, &p[0], &p[1], g),
        Op::Permute { perm } => vec![Some(layout::permute_backward(&node.shape, perm, g))],
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat { axis } => layout::concat_backward(p, *axis, &node.shape, g),
        Op::Narrow { axis, start } => {
            vec![Some(layout::narrow_backward(p[0].shape(), *axis, *start, &node.shape, g))]
        }
        Op::Softmax { mask } => vec![Some(nn::softmax_backward(&out, g, node.shape[node.shape.len() - 1], mask.is_some()))],
        Op::LogSoftmax => vec![Some(nn::log_softmax_backward(&out, g, node.shape[node.shape.len() - 1]))],
        Op::LayerNorm { mean, rstd } => nn::layer_norm_backward(&p[0], &p[1], mean, rstd, g),
        Op::Embedding { ids } => vec![Some(nn::embedding_backward(p[0].shape(), ids, g))],
        Op::Pick { idx } => vec![Some(nn::pick_backward(p[0].shape(), idx, g))],
    };
    Ok(grads)
}
