//! Recorded computation order for reverse-mode differentiation.
//!
//! Each primitive pushes its output value together with a backward closure
//! that maps the output gradient to gradients of its inputs. `backward` walks
//! the tape in reverse recording order.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Data handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input needs a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    param: Option<String>,
    label: &'static str,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are dropped.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Leaf that receives a gradient but is not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        let needs = self.grad_enabled;
        self.leaf(value, needs, None)
    }

    /// Leaf bound to the named parameter; its gradient is routed back by `Gradients::accumulate_into`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let needs = self.grad_enabled;
        Ok(self.leaf(value, needs, Some(name.to_string())))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
            param,
            label: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an op output. The value is checked for non-finite entries.
    pub fn push_op<F>(
        &mut self,
        label: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> + 'static,
    {
        value.ensure_finite(label)?;
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward: Option<BackwardFn> = if needs_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            needs_grad,
            param: None,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a single-element output, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, Tensor::new(value.shape(), vec![1.0])?)
    }

    /// Reverse pass from `out` seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::State("backward on a no-grad tape".into()));
        }
        self.value(out).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect(),
            };
            let input_grads = backward(&ctx)?;
            debug_assert_eq!(input_grads.len(), node.parents.len(), "{}", node.label);
            for (&p, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                g.ensure_finite(node.label)?;
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .take(out.0 + 1)
            .filter(|(_, n)| n.backward.is_none() && n.needs_grad)
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        let mut leaf_grads = Vec::with_capacity(leaves.len());
        for i in leaves {
            let g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            leaf_grads.push((i, self.nodes[i].param.clone(), g));
        }
        Ok(Gradients { leaf_grads })
    }
}

/// Gradients of the leaves of a tape with respect to the output passed to `backward`.
pub struct Gradients {
    leaf_grads: Vec<(usize, Option<String>, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads
            .iter()
            .find(|(i, _, _)| *i == v.0)
            .map(|(_, _, g)| g)
    }

    /// Adds every parameter-bound leaf gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (_, name, g) in &self.leaf_grads {
            if let Some(name) = name {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
