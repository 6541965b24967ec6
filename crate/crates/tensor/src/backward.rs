use std::collections::{HashMap, HashSet};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::op;
use crate::tensor::{check_finite, Tensor};

/// Nodes reachable from `root` through gradient-tracking edges, parents
/// before children.
fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in &t.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

impl<T: Element> Tensor<T> {
    /// Reverse-mode pass from a one-element loss. Gradients accumulate into
    /// every reachable leaf that requires them; call [`Tensor::zero_grad`] on
    /// the leaves to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.is_leaf() {
                check_finite(&g, "backward")?;
                t.accumulate_grad(&g);
                continue;
            }
            let parent_grads = op::backward(&t.0, &g)?;
            for (p, pg) in t.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}
