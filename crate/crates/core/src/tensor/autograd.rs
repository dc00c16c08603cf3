use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

impl<T: Scalar> Tensor<T> {
    /// Back-propagates from this scalar into every tracked leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for tensor in order.iter().rev() {
            let Some(grad) = pending.remove(&tensor.id()) else {
                continue;
            };
            match tensor.node() {
                None => tensor.accumulate_grad(&grad),
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.tracks_grad()).collect();
                    let parent_grads = (node.backward)(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((parent, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let (Some(g), true) = (g, need) else { continue };
                        debug_assert_eq!(g.len(), parent.numel());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes; parents precede children.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.id()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(node) = tensor.node() {
                for parent in node.parents.iter().filter(|p| p.tracks_grad()) {
                    if !visited.contains(&parent.id()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap().requires_grad();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let vals = [0.5, -1.5, 2.0, 3.25];
        let x = Tensor::<f64>::from_f64(&[4], &vals).unwrap().requires_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let expected: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), expected);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap().requires_grad();
        let loss = x.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4., 8., 12.]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::from_f64(&[2], &[1., 2.]).unwrap().requires_grad();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: loss = sum(y + y) -> grad = 4x
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, -3.0]).unwrap().requires_grad();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -12.0]);
    }
}
