//! Reverse-mode differentiation over an eagerly evaluated computation graph.
//!
//! Every op produces a [`Var`]: the computed value plus, when any input
//! requires gradients, the parent links and a backward rule. `backward` walks
//! the graph once in reverse topological order and accumulates gradients
//! additively across fan-out.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: given the gradient flowing into this node, produce the
/// gradient contribution for each parent (aligned with `parents`; `None`
/// for parents that need no gradient).
pub type BackwardRule = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

pub struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    rule: Option<BackwardRule>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf node (no parents). `requires_grad` marks it as a gradient sink.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            rule: None,
        }))
    }

    /// An op output. If no parent requires gradients the parents and rule are
    /// dropped so intermediate values can be freed eagerly.
    pub fn from_op(value: Tensor, parents: Vec<Var>, rule: BackwardRule) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Var::leaf(value, false);
        }
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            parents,
            rule: Some(rule),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.parents.is_empty()
    }

    /// Severs the graph: same value, no history, no gradient flow.
    pub fn detach(&self) -> Var {
        Var::leaf(self.0.value.clone(), false)
    }
}

/// Gradients keyed by leaf id after a backward pass.
pub struct GradMap {
    grads: HashMap<u64, Tensor>,
    rules_executed: usize,
}

impl GradMap {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id())
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.grads.remove(&v.id())
    }

    /// Number of backward rules run during the pass (one per non-leaf node).
    pub fn rules_executed(&self) -> usize {
        self.rules_executed
    }
}

/// Reverse-mode sweep from a scalar root. Each reachable node's backward rule
/// runs exactly once; only leaf gradients are retained.
pub fn backward(root: &Var) -> Result<GradMap> {
    if !root.value().is_scalar() {
        return Err(Error::contract(format!(
            "backward root must be scalar, got shape {:?}",
            root.shape()
        )));
    }

    // Iterative post-order DFS over nodes that require grad.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    while let Some((node, child_idx)) = stack.pop() {
        if child_idx == 0 {
            if visited.contains_key(&node.id()) {
                continue;
            }
        }
        let parents = &node.0.parents;
        let mut advanced = false;
        for i in child_idx..parents.len() {
            let p = &parents[i];
            if p.requires_grad() && !visited.contains_key(&p.id()) {
                stack.push((node.clone(), i + 1));
                stack.push((p.clone(), 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            visited.insert(node.id(), ());
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::ones(vec![1]));
    let mut rules_executed = 0usize;

    for node in order.iter().rev() {
        let Some(rule) = &node.0.rule else { continue };
        let Some(grad_out) = grads.remove(&node.id()) else { continue };
        let parent_grads = rule(&grad_out);
        rules_executed += 1;
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, g) in node.0.parents.iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            if !parent.requires_grad() {
                continue;
            }
            match grads.get_mut(&parent.id()) {
                Some(acc) => acc.accumulate(&g),
                None => {
                    grads.insert(parent.id(), g);
                }
            }
        }
    }

    // Non-leaf gradients are scratch space; discard them.
    grads.retain(|id, _| {
        order
            .iter()
            .find(|n| n.id() == *id)
            .map(|n| n.is_leaf() && n.requires_grad())
            .unwrap_or(false)
    });

    Ok(GradMap { grads, rules_executed })
}
