use std::collections::{HashMap, HashSet};

use super::ops::vjp;
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// Post-order over the tracked part of the graph rooted at `root`.
fn topo_order<T: Real>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (tensor, parents already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Back-propagates from a scalar `loss`, adding `d loss / d t` into the grad
/// slot of every tracked tensor `t` reachable from it.
pub fn backward<T: Real>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    let order = topo_order(loss);
    let mut pending: HashMap<u64, Vec<T>> = HashMap::with_capacity(order.len());
    pending.insert(loss.id(), vec![T::ONE]);

    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else {
            continue;
        };
        if let Some(node) = &t.0.node {
            let parent_grads = vjp(&node.op, &node.parents, t, &g);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match pending.get_mut(&p.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(pg) {
                            *a += v;
                        }
                    }
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        t.accumulate_grad(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::param(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let x = p(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 7.0]);
        backward(&x.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mean_of_square() {
        let v = [0.3, -1.2, 2.5];
        let x = p(&[3], &v);
        backward(&x.square().unwrap().mean().unwrap()).unwrap();
        let g = x.grad().unwrap();
        for (gi, vi) in g.iter().zip(v) {
            assert!((gi - 2.0 * vi / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let x = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.add(&x).unwrap();
        backward(&y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        assert!(matches!(backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let x = p(&[2], &[1.0, 2.0]);
        let c = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        backward(&x.mul(&c).unwrap().sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = p(&[2], &[1.0, 2.0]);
        let y = x.mul(&x.detach()).unwrap().sum().unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }
}
