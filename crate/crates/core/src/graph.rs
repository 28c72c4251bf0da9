use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One executed operation on the tape. Implementations hold handles to their
/// input and output tensors plus whatever intermediate values backward needs.
pub trait TapeOp<S: Scalar> {
    /// Propagate the output gradient into the inputs. Called in reverse
    /// execution order; must accumulate (sum), never overwrite.
    fn backward(&self) -> Result<()>;

    fn name(&self) -> &'static str;
}

/// Append-only record of executed ops. Built once per forward pass; the
/// append order is the topological order that backward replays in reverse.
pub struct Graph<S: Scalar> {
    ops: Vec<Box<dyn TapeOp<S>>>,
    recording: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A recording graph for training and gradient checks.
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// A non-recording graph: forward values only, no backward possible.
    pub fn inference() -> Self {
        Graph {
            ops: Vec::new(),
            recording: false,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Record an op if the graph is recording and the op's output can carry
    /// gradient. Ops whose output does not require grad are dead weight on
    /// the tape and are dropped.
    pub fn record(&mut self, output_needs_grad: bool, op: impl FnOnce() -> Box<dyn TapeOp<S>>) {
        if self.recording && output_needs_grad {
            self.ops.push(op());
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// tensor on the tape that requires grad; parameters not reachable from
    /// the loss keep whatever their buffers already hold (zeros after
    /// `zero_grad`).
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CoreError::Autograd(format!(
                "backward requires a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        if self.backward_done {
            return Err(CoreError::Autograd(
                "backward already ran on this graph; call reset() or build a new graph".into(),
            ));
        }
        self.backward_done = true;
        loss.accumulate_grad(&[S::one()]);
        for op in self.ops.iter().rev() {
            op.backward()?;
        }
        Ok(())
    }

    /// Drop all recorded ops and allow backward to run again.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.backward_done = false;
    }
}

/// Zero the gradient buffers of a parameter list. Call between optimizer
/// steps; gradient accumulation is summation by design.
pub fn zero_grads<S: Scalar>(params: &[Tensor<S>]) {
    for p in params {
        p.zero_grad();
    }
}
