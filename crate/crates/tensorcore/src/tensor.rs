//! The tensor handle and the reverse-mode engine.
//!
//! Every operation produces a new immutable [`Tensor`] that remembers its
//! inputs and a backward closure. Calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse topological order and accumulates
//! gradients into every tensor that requires them.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};

/// Backward closure: `(grad_out, inputs, out_data, sink)`.
///
/// Closures must not capture [`Tensor`]s; everything they need from the
/// inputs is reachable through the `inputs` slice.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64], &mut GradSink<'_>)>;

pub(crate) struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

impl Drop for Node {
    // Long recurrent chains would otherwise overflow the stack through
    // recursive `Rc` drops.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = match self.grad_fn.take() {
            Some(gf) => gf.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(gf) = node.grad_fn.take() {
                    stack.extend(gf.inputs);
                }
            }
        }
    }
}

/// Dense row-major `f64` tensor with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Write access to the gradient buffers of an op's inputs during backward.
pub struct GradSink<'a> {
    inputs: &'a [Tensor],
}

impl GradSink<'_> {
    pub fn wants(&self, input: usize) -> bool {
        self.inputs[input].0.requires_grad
    }

    /// Runs `f` on the (zero-initialised on first use) gradient buffer of
    /// input `input`. Inputs that do not require gradients are skipped.
    pub fn accumulate(&mut self, input: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.inputs[input].0;
        if !node.requires_grad {
            return;
        }
        let mut slot = node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; node.data.len()]);
        f(buf);
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "tensor",
                format!("{} values do not fill shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        })))
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A leaf that collects gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel(shape)], shape, false).expect("shape product matches")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(vec![value; numel(shape)], shape, false).expect("shape product matches")
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], &[], false).expect("scalar")
    }

    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64], &[Tensor], &[f64], &mut GradSink<'_>) + 'static,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape), "{op} produced inconsistent data");
        let requires_grad = inputs.iter().any(|t| t.0.requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, `None` for leaves and
    /// constants.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    /// Accumulated gradient, absent until a backward pass reaches this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Copy of the values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), &self.0.shape, false).expect("same shape")
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Nodes requiring grad reachable from `self`, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for input in &gf.inputs {
                    if input.0.requires_grad && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate, so calling
    /// this twice on the same graph doubles every leaf gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        {
            let mut seed = self.0.grad.borrow_mut();
            match seed.as_mut() {
                Some(g) => g[0] += 1.0,
                None => *seed = Some(vec![1.0]),
            }
        }
        for node in order.iter().rev() {
            let Some(gf) = &node.0.grad_fn else { continue };
            let grad = node.0.grad.borrow();
            let Some(grad) = grad.as_ref() else { continue };
            let mut sink = GradSink { inputs: &gf.inputs };
            (gf.backward)(grad, &gf.inputs, &node.0.data, &mut sink);
        }
        Ok(())
    }

    /// Number of distinct nodes in the graph below `self` that carry gradients.
    pub fn graph_len(&self) -> usize {
        self.topo_order().len()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
