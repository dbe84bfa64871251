use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
///
/// `inputs` are the forward input values, `output` the forward result and
/// `grad` the upstream gradient (same length as `output`). Returns one entry
/// per input; entries whose `needs` flag is false may be `None`.
pub trait Function<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<T>>>,
}

/// Append-only tape of tensor ops.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `func` producing `value` from `inputs`. The backward rule is
    /// dropped when no input needs a gradient.
    pub fn record(
        &mut self,
        func: impl Function<T> + 'static,
        inputs: &[Var],
        value: Tensor<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let func: Option<Box<dyn Function<T>>> = if requires_grad {
            Some(Box::new(func))
        } else {
            None
        };
        self.push(value, requires_grad, inputs.to_vec(), func)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        inputs: Vec<Var>,
        func: Option<Box<dyn Function<T>>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            func,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0usize;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = func.backward(&inputs, &node.value, &upstream, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                debug_assert_eq!(
                    g.len(),
                    self.nodes[input.0].value.numel(),
                    "{}",
                    func.name()
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            grads,
            ops_visited: visited,
        })
    }
}

/// Result of [`Graph::backward`]: d(loss)/d(value) for every tracked value
/// reachable from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    ops_visited: usize,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of recorded ops whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}
