//! Reverse-mode differentiation over the recorded operation graph.

use std::collections::HashSet;
use std::rc::Rc;

use super::{grad_enabled, numel, Buffer, Node, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-parent gradient contributions returned by a backward function.
/// `None` skips a parent (it does not require a gradient).
pub(crate) type Contributions<T> = Vec<Option<Vec<T>>>;

/// Context handed to a backward function.
pub(crate) struct BackwardArgs<'a, T: Scalar> {
    /// Adjoint (dL/d(output)) of the node being replayed.
    pub adjoint: &'a [T],
    /// Forward value of the node being replayed.
    pub out_data: &'a [T],
    pub parents: &'a [Tensor<T>],
}

impl<T: Scalar> BackwardArgs<'_, T> {
    /// Whether parent `i` wants a contribution; lets kernels skip work.
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].node.requires_grad
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Contributions<T>>;

/// A recorded differentiable operation: parent handles plus the adjoint rule.
pub(crate) struct OpRecord<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

/// Create an op output node. Records the backward rule only when gradients
/// are globally enabled and at least one parent participates in the graph.
pub(crate) fn from_op<T: Scalar>(
    data: Vec<T>,
    shape: Vec<usize>,
    parents: &[&Tensor<T>],
    backward: impl Fn(&BackwardArgs<'_, T>) -> Contributions<T> + 'static,
) -> Tensor<T> {
    debug_assert_eq!(data.len(), numel(&shape));
    let record = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
    let op = record.then(|| OpRecord {
        parents: parents.iter().map(|p| (*p).clone()).collect(),
        backward: Box::new(backward) as BackwardFn<T>,
    });
    Tensor {
        node: Rc::new(Node {
            id: super::NEXT_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            data: Buffer::new(data),
            shape,
            requires_grad: record,
            grad: std::cell::RefCell::new(None),
            op,
        }),
    }
}

/// The ordered record of operations reachable from one root, newest first.
///
/// Replaying the adjoints in this order is deterministic: node ids increase
/// monotonically at creation, so sorting by id reproduces reverse execution
/// order no matter how the graph was traversed.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    root: Tensor<T>,
}

impl<T: Scalar> Tape<T> {
    /// Collect every recorded operation reachable from `root`.
    pub fn for_root(root: &Tensor<T>) -> Result<Self> {
        if root.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            if let Some(op) = &t.node.op {
                for p in &op.parents {
                    if p.node.requires_grad && !seen.contains(&p.node.id) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        Ok(Tape {
            nodes,
            root: root.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Replay adjoints in reverse record order, accumulating gradients into
    /// every reachable tensor that requires one.
    pub fn replay(&self) -> Result<()> {
        self.root.accumulate_grad(&[T::one()]);
        for t in &self.nodes {
            let Some(op) = &t.node.op else { continue };
            let adjoint = match t.node.grad.borrow().as_ref() {
                Some(g) => g.to_vec(),
                // Not on any path that received an adjoint.
                None => continue,
            };
            let args = BackwardArgs {
                adjoint: &adjoint,
                out_data: &t.node.data,
                parents: &op.parents,
            };
            let contribs = (op.backward)(&args);
            debug_assert_eq!(contribs.len(), op.parents.len());
            for (parent, contrib) in op.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if parent.node.requires_grad {
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Populate gradients of everything reachable from the scalar `loss`.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    Tape::for_root(loss)?.replay()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(vec![1.0f64, -2.0, 3.0, 0.5], &[2, 2])
            .unwrap()
            .requires_grad();
        let loss = ops::sum(&x);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_gradient_uses_both_parent_slots() {
        // loss = sum(x*x) at x=[1,2,3] -> grad [2,4,6]
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3])
            .unwrap()
            .requires_grad();
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::sum(&sq);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2])
            .unwrap()
            .requires_grad();
        let y = ops::relu(&x);
        assert!(backward(&y).is_err());
    }

    #[test]
    fn replay_is_repeatable_after_reset() {
        let x = Tensor::from_vec(vec![0.3f32, -1.7, 2.2], &[3])
            .unwrap()
            .requires_grad();
        let y = ops::tanh(&ops::mul(&x, &x).unwrap());
        let loss = ops::sum(&y);
        let tape = Tape::for_root(&loss).unwrap();
        tape.replay().unwrap();
        let g1 = x.grad().unwrap();
        // Reset every grad the tape touched, then replay again.
        x.zero_grad();
        y.zero_grad();
        loss.zero_grad();
        for n in &tape.nodes {
            n.zero_grad();
        }
        tape.replay().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::from_vec(vec![1.0f32, 2.0], &[2])
            .unwrap()
            .requires_grad();
        let y = crate::tensor::no_grad(|| ops::relu(&x));
        assert!(!y.is_requires_grad());
        assert!(y.node.op.is_none());
    }
}
