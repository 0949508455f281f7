use std::collections::{HashMap, HashSet};

use crate::tensor::{BackwardCtx, Tensor};
use crate::{Result, TensorError};

/// Gradients of one scalar loss, keyed by parameter identity.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Tensor>,
}

impl Gradients {
    /// Gradient for `param`, or `None` if it was not requested.
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        self.by_id.get(&param.id())
    }
}

/// Reverse-mode gradient of the scalar `loss` with respect to each of
/// `params`, in the same order. Parameters the loss does not depend on get a
/// zero tensor of their own shape.
pub fn gradients(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let by_id = backward(loss, params)?;
    Ok(params
        .iter()
        .map(|p| by_id.by_id.get(&p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Like [`gradients`], but returns a lookup table.
pub fn backward(loss: &Tensor, params: &[Tensor]) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let wanted: HashSet<u64> = params.iter().map(Tensor::id).collect();
    let mut out = HashMap::new();
    if !loss.requires_grad() {
        return Ok(Gradients { by_id: out });
    }

    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if let Some(f) = &node.0.grad_fn {
            let needs: Vec<bool> = f.inputs.iter().map(Tensor::requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &g,
                out: node.data(),
                needs: &needs,
            };
            let input_grads = (f.backward)(&ctx);
            for (inp, gi) in f.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), inp.numel());
                match grads.get_mut(&inp.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gi) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(inp.id(), gi);
                    }
                }
            }
        }
        if wanted.contains(&node.id()) {
            out.insert(node.id(), Tensor::new(g, node.shape())?);
        }
    }
    Ok(Gradients { by_id: out })
}

/// Post-order over the gradient-carrying subgraph below `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.id());
    while let Some((node, next)) = stack.pop() {
        let inputs = node.0.grad_fn.as_ref().map(|f| f.inputs.as_slice()).unwrap_or(&[]);
        if next < inputs.len() {
            let child = inputs[next].clone();
            stack.push((node, next + 1));
            if child.requires_grad() && seen.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::param(vec![0.5, -2.0, 3.0], &[3]).unwrap();
        let g = gradients(&x.sum(), std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_gradient_is_zero_for_negative_inputs() {
        let x = Tensor::param(vec![-1.0, 2.0], &[2]).unwrap();
        let g = gradients(&x.relu().sum(), std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zeros() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = Tensor::param(vec![1.0; 6], &[2, 3]).unwrap();
        let g = gradients(&x.square().sum(), &[x.clone(), y.clone()]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert_eq!(g[1].shape(), &[2, 3]);
        assert!(g[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            gradients(&x.relu(), std::slice::from_ref(&x)),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) → 2x + 1
        let x = Tensor::param(vec![1.0, -3.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = gradients(&y.sum(), std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[3.0, -5.0]);
    }

    #[test]
    fn deep_chain_does_not_overflow_the_stack() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut y = x.clone();
        for _ in 0..50_000 {
            y = y.add_scalar(0.0);
        }
        let g = gradients(&y.sum(), std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[1.0]);
    }
}
