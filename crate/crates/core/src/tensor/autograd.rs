//! Reverse-mode pass over the recorded graph.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Given dLoss/dOutput, add each parent's contribution into the matching
/// zeroed buffer (same order as `Node::parents`).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut [Vec<f64>])>;

pub(crate) struct Node {
    pub len: usize,
    pub parents: Vec<Rc<Node>>,
    pub backward: Option<BackwardFn>,
    pub grad: RefCell<Option<Vec<f64>>>,
    /// Leaf-only: accumulator owned by the parameter this leaf mirrors.
    pub sink: Option<Rc<RefCell<Vec<f64>>>>,
}

impl Node {
    pub fn leaf(len: usize, sink: Rc<RefCell<Vec<f64>>>) -> Node {
        Node { len, parents: Vec::new(), backward: None, grad: RefCell::new(None), sink: Some(sink) }
    }

    pub fn op(len: usize, parents: Vec<Rc<Node>>, backward: BackwardFn) -> Node {
        Node { len, parents, backward: Some(backward), grad: RefCell::new(None), sink: None }
    }
}

/// Run the reverse pass from a scalar loss. Every leaf reachable from the
/// loss gets dLoss/dLeaf accumulated into its parameter's grad buffer.
pub fn backward(loss: &Tensor) -> Result<()> {
    let root = loss
        .node()
        .ok_or_else(|| Error::contract("backward: loss is not attached to the graph"))?;
    if !loss.is_scalar() {
        return Err(Error::contract(format!(
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }

    let order = topo_order(root);

    *root.grad.borrow_mut() = Some(vec![1.0]);

    // Reverse topological order: a node's grad is complete before it runs.
    for node in order.iter().rev() {
        let grad = match node.grad.borrow_mut().take() {
            Some(g) => g,
            None => continue, // no path contributed (cannot happen for reachable nodes)
        };
        if let Some(back) = &node.backward {
            let mut bufs: Vec<Vec<f64>> = node.parents.iter().map(|p| vec![0.0; p.len]).collect();
            back(&grad, &mut bufs);
            for (parent, buf) in node.parents.iter().zip(bufs) {
                let mut slot = parent.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
                    None => *slot = Some(buf),
                }
            }
        }
        if let Some(sink) = &node.sink {
            sink.borrow_mut().iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
        }
    }
    Ok(())
}

/// Post-order DFS over parent edges; reversing the result yields an order
/// where every node precedes its parents.
fn topo_order(root: &Rc<Node>) -> Vec<Rc<Node>> {
    let mut order: Vec<Rc<Node>> = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Rc<Node>, usize)> = vec![(Rc::clone(root), 0)];
    visited.insert(Rc::as_ptr(root));

    while let Some((node, idx)) = stack.pop() {
        if idx < node.parents.len() {
            let parent = Rc::clone(&node.parents[idx]);
            stack.push((node, idx + 1));
            if visited.insert(Rc::as_ptr(&parent)) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    // Post-order places parents before children; we want children first when
    // iterating in reverse, so the natural order is already "parents early".
    order
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = super::set_grad_enabled(false);
    let out = f();
    super::set_grad_enabled(prev);
    out
}
