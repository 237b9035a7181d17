//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each
//! operation appends a node and hands back a [`Var`]; [`Tape::backward`]
//! replays the record in reverse, accumulating adjoints into per-node
//! buffers. Adjoints of interior nodes are freed the moment they have
//! been propagated; leaves registered through [`Tape::param`] keep
//! theirs for the optimizer to read, and [`Tape::retain_all_grads`]
//! keeps everything when a test wants to inspect the interior.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to one node of a [`Tape`]. Only meaningful on the tape that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// Statistics source for [`Tape::batchnorm2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with fresh batch statistics and fold them into the
    /// running buffers in place.
    Train,
    /// Normalize with the running buffers, leaving them untouched.
    Eval,
}

/// Operation record. Fields beyond the input handles are whatever the
/// reverse rule needs that would be wasteful to recompute.
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// `mean` / `invstd` are the statistics the forward normalized
    /// with, whichever mode produced them.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        invstd: Vec<F>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    BilinearUp {
        x: Var,
    },
    HardSigmSte {
        x: Var,
    },
    BinarizeSte {
        x: Var,
    },
    ScaleByGate {
        x: Var,
        g: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Bce {
        p: Var,
        target: F,
    },
    Scale {
        x: Var,
        c: F,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

impl<F: Scalar> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::BilinearUp { .. } => "bilinear_upsample",
            Op::HardSigmSte { .. } => "hard_sigm_ste",
            Op::BinarizeSte { .. } => "binarize_ste",
            Op::ScaleByGate { .. } => "scale_by_gate",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Bce { .. } => "binary_cross_entropy",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
        }
    }
}

pub(crate) struct Node<F: Scalar> {
    pub op: Op<F>,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub param: bool,
}

pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    /// One adjoint slot per node, populated during `backward`.
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
    retain_all: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            retain_all: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a non-trainable leaf (network input, constant).
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Registers a non-trainable leaf from raw parts without copying.
    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tape::input_from",
                format!("shape {:?} does not cover {} values", shape, data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Registers a trainable leaf whose adjoint survives `backward`.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub(crate) fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>, param: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{} shape/value", op.name());
        #[cfg(debug_assertions)]
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            panic!(
                "non-finite value out of {} at flat index {bad} (node {})",
                op.name(),
                self.nodes.len()
            );
        }
        assert!(self.nodes.len() < u32::MAX as usize, "tape full");
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            shape,
            value,
            param,
        });
        id
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index()].shape
    }

    pub fn scalar_value(&self, v: Var) -> Result<F> {
        match self.nodes[v.index()].value.as_slice() {
            [single] => Ok(*single),
            other => Err(Error::Tape(format!(
                "expected a scalar node, got {} values",
                other.len()
            ))),
        }
    }

    /// Adjoint of `v` if one was produced and kept.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, densified: a node the loss never touched has
    /// gradient zero.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<F> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![F::ZERO; self.nodes[v.index()].value.len()],
        }
    }

    /// Keeps every node's adjoint alive through `backward` instead of
    /// freeing interior ones after propagation.
    pub fn retain_all_grads(&mut self) {
        self.retain_all = true;
    }

    /// Reverse sweep from a scalar loss. One shot per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape".to_string(),
            ));
        }
        let li = loss.index();
        if li >= self.nodes.len() {
            return Err(Error::Tape("loss var is not on this tape".to_string()));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[li] = Some(vec![F::ONE]);
        for id in (0..=li).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                ops::backward_op(&self.nodes, &mut self.grads, id, &gout);
            }
            if self.retain_all || self.nodes[id].param {
                self.grads[id] = Some(gout);
            }
        }
        Ok(())
    }
}
