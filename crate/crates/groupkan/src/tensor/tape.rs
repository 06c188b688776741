//! The gradient tape: an ordered record of executed operations.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Node {
    /// Output tensor of the recorded op (used to reset intermediate
    /// gradients when backward is replayed).
    output: Tensor,
    /// Reads the output gradient and accumulates input gradients.
    backward: Box<dyn Fn()>,
}

/// Records operations in execution order. Nodes are replayed in reverse by
/// [`Tape::backward`], which accumulates gradients additively into every
/// tensor reachable from the loss that has `requires_grad` set.
///
/// One tape is single-threaded; separate tapes share nothing and may run
/// concurrently.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Tape {
    /// A recording tape for forward+backward passes.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording tape: forward passes run at full speed and keep no
    /// backward state. `backward` on it is a contract error.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn push(&self, output: Tensor, backward: Box<dyn Fn()>) {
        debug_assert!(self.recording);
        self.nodes.borrow_mut().push(Node { output, backward });
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of leaf tensors accumulate additively across calls;
    /// intermediate gradients are reset at the start of each sweep so a
    /// second call contributes exactly one more copy of each gradient.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract(
                "backward on an empty tape (no recorded operations)".into(),
            ));
        }
        for node in nodes.iter() {
            node.output.zero_grad();
        }
        loss.accumulate_grad(&[1.0]);
        for node in nodes.iter().rev() {
            (node.backward)();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().as_param();
        let y = ops::relu(&tape, &x);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0])
            .unwrap()
            .as_param();
        let loss = ops::sum_all(&tape, &ops::mul(&tape, &x, &x).unwrap());
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, -4.0, 6.0]);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![4.0, -8.0, 12.0]);
    }
}
