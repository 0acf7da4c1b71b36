use crate::error::{bail, Result};
use crate::numerics::DenseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Given the operation's inputs, its output and the upstream gradient, returns
/// one gradient per input (or `None` when an input receives nothing).
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&DenseMatrix],
        output: &DenseMatrix,
        grad: &DenseMatrix,
    ) -> Vec<Option<DenseMatrix>>;
}

struct Node {
    value: DenseMatrix,
    parents: Vec<Var>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Values are computed eagerly when an op is recorded; [`Tape::backward`]
/// walks the nodes in reverse insertion order, which is a valid topological
/// order because every node's parents were recorded before it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            func: None,
            requires_grad: true,
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            func: None,
            requires_grad: false,
        })
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op whose forward value the caller already computed.
    pub fn record(
        &mut self,
        value: DenseMatrix,
        parents: &[Var],
        func: impl Function + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents: parents.to_vec(),
            func: requires_grad.then(|| Box::new(func) as Box<dyn Function>),
            requires_grad,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            bail!(Internal, "backward called twice on the same tape");
        }
        if self.value(loss).shape() != (1, 1) {
            bail!(
                Internal,
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            );
        }
        self.consumed = true;
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(func) = &node.func {
                if node.parents.iter().any(|p| p.0 >= idx) {
                    bail!(Internal, "tape cycle at node {idx} ({})", func.name());
                }
                let inputs: Vec<&DenseMatrix> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = func.backward(&inputs, &node.value, &grad);
                if parent_grads.len() != node.parents.len() {
                    bail!(Internal, "{} returned wrong gradient count", func.name());
                }
                for (p, g) in node.parents.iter().zip(parent_grads) {
                    let (Some(g), true) = (g, self.nodes[p.0].requires_grad) else {
                        continue;
                    };
                    debug_assert_eq!(
                        g.shape(),
                        self.nodes[p.0].value.shape(),
                        "{} gradient shape",
                        func.name()
                    );
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every tape node that required one.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_backward_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(DenseMatrix::scalar(2.0));
        let y = tape.half_sq_norm(w);
        assert!(tape.backward(y).is_ok());
        assert!(matches!(tape.backward(y), Err(crate::Error::Internal(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(DenseMatrix::zeros(2, 2));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(DenseMatrix::filled(1, 3, 1.5));
        let c = tape.detach(w);
        let s = tape.add(w, c);
        let loss = tape.half_sq_norm(s);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0, 3.0]);
    }
}
