use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one primitive.
///
/// Returns one entry per input, `None` where `needs[i]` is false or the
/// input does not influence the output.
pub trait Vjp<T: Scalar> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T, F> Vjp<T> for F
where
    T: Scalar,
    F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        self(grad, inputs, output, needs)
    }
}

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Vjp<T>>>,
    requires_grad: bool,
}

/// Define-by-run, append-only record of a forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: "leaf", value, parents: Vec::new(), rule: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append the result of primitive `op` applied to `inputs`.
    pub fn record<R: Vjp<T> + 'static>(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        rule: R,
    ) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Tape(format!("{op}: input {} is not on the tape", bad.0)));
        }
        value.check_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: inputs.to_vec(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Vjp<T>>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.nodes.get(loss.0).ok_or_else(|| Error::Tape(format!("loss {} not on tape", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(shape_err!("backward from non-scalar loss of shape {:?}", root.value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![T::from_f64(1.0)]));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.rule.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = rule.backward(&grad, &inputs, &node.value, &needs)?;
            if parent_grads.len() != node.parents.len() {
                return Err(Error::Tape(format!(
                    "{}: vjp returned {} gradients for {} inputs",
                    node.op,
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if pg.shape() != self.nodes[parent.0].value.shape() {
                    return Err(Error::Tape(format!(
                        "{}: gradient shape {:?} for input of shape {:?}",
                        node.op,
                        pg.shape(),
                        self.nodes[parent.0].value.shape()
                    )));
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep gradients; interior ones were consumed above.
        Ok(Gradients { grads })
    }
}

/// Gradients of the requires-grad leaves reachable from a loss.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
