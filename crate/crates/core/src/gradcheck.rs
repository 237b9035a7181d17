//! Finite-difference gradient verification.
//!
//! The oracle only ever runs the forward pass: central differences of
//! the loss are compared against whatever `backward` produced, so a
//! broken backward cannot vouch for itself. Checks are meant to run on
//! `f64` tapes; tolerances below assume that width.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Acceptance bound on the worst relative error in 64-bit mode.
pub const GRAD_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so exact zeros compare clean.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst disagreement found by [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Index into the checked tensor list.
    pub tensor: usize,
    /// Flat coordinate within that tensor.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Graph builder under test: registers nothing itself, wires the given
/// leaf vars into a scalar loss.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape<f64>, leaves: &[Var]) -> Result<Var>;
}

impl<B> LossBuilder for B
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape<f64>, leaves: &[Var]) -> Result<Var> {
        self(tape, leaves)
    }
}

fn eval_loss<B: LossBuilder>(build: &B, point: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    let loss = build.build(&mut tape, &leaves)?;
    Ok(tape.scalar_value(loss)?.to_f64())
}

use crate::scalar::Scalar as _;

/// Central-difference check of every coordinate of every leaf.
///
/// Runs backward once at `base` to collect analytic gradients, then
/// perturbs each coordinate by `±eps` and compares `(f(+) - f(-)) /
/// (2 eps)` against the analytic value. Returns the worst offender;
/// deciding whether it is acceptable is the caller's business, which
/// lets tests assert both "gradients agree" and "a wrong gradient gets
/// caught".
pub fn finite_diff_check<B: LossBuilder>(
    build: &B,
    base: &[Tensor<f64>],
    eps: f64,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = base.iter().map(|t| tape.param(t)).collect();
    let loss = build.build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    drop(tape);

    let mut worst = GradReport {
        max_rel_err: 0.0,
        tensor: 0,
        coord: 0,
        analytic: if analytic.is_empty() || analytic[0].is_empty() {
            0.0
        } else {
            analytic[0][0]
        },
        numeric: 0.0,
    };
    let mut point: Vec<Tensor<f64>> = base.to_vec();
    for ti in 0..point.len() {
        for ci in 0..point[ti].numel() {
            let orig = point[ti].data()[ci];
            point[ti].data_mut()[ci] = orig + eps;
            let up = eval_loss(build, &point)?;
            point[ti].data_mut()[ci] = orig - eps;
            let down = eval_loss(build, &point)?;
            point[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[ti][ci], numeric);
            if err > worst.max_rel_err {
                worst = GradReport {
                    max_rel_err: err,
                    tensor: ti,
                    coord: ci,
                    analytic: analytic[ti][ci],
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Graph builder over a whole parameter set: wires a (possibly mutated)
/// copy of the network into a scalar loss and reports the leaf vars in
/// [`NetworkParams::param_entries`] order.
pub trait NetLossBuilder {
    fn build(&self, tape: &mut Tape<f64>, params: &mut NetworkParams<f64>)
        -> Result<(Var, Vec<Var>)>;
}

impl<B> NetLossBuilder for B
where
    B: Fn(&mut Tape<f64>, &mut NetworkParams<f64>) -> Result<(Var, Vec<Var>)>,
{
    fn build(
        &self,
        tape: &mut Tape<f64>,
        params: &mut NetworkParams<f64>,
    ) -> Result<(Var, Vec<Var>)> {
        self(tape, params)
    }
}

use crate::net::NetworkParams;

/// [`finite_diff_check`] for a full network: perturbs every coordinate of
/// every learned parameter. Each evaluation gets a fresh clone of `base`,
/// so builders that mutate running statistics stay honest.
pub fn finite_diff_check_params<B: NetLossBuilder>(
    build: &B,
    base: &NetworkParams<f64>,
    eps: f64,
) -> Result<GradReport> {
    let mut p0 = base.clone();
    let mut tape = Tape::new();
    let (loss, pvars) = build.build(&mut tape, &mut p0)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = pvars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    drop(tape);

    let shapes: Vec<usize> = base.param_entries().iter().map(|(_, t)| t.numel()).collect();
    if analytic.len() != shapes.len() {
        return Err(crate::error::Error::Tape(format!(
            "builder returned {} leaf vars for {} parameters",
            analytic.len(),
            shapes.len()
        )));
    }

    let eval = |ti: usize, ci: usize, delta: f64| -> Result<f64> {
        let mut p = base.clone();
        p.param_entries_mut()[ti].1.data_mut()[ci] += delta;
        let mut tape = Tape::new();
        let (loss, _) = build.build(&mut tape, &mut p)?;
        Ok(tape.scalar_value(loss)?)
    };

    let mut worst = GradReport {
        max_rel_err: 0.0,
        tensor: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (ti, len) in shapes.iter().enumerate() {
        for ci in 0..*len {
            let numeric = (eval(ti, ci, eps)? - eval(ti, ci, -eps)?) / (2.0 * eps);
            let err = rel_err(analytic[ti][ci], numeric);
            if err > worst.max_rel_err {
                worst = GradReport {
                    max_rel_err: err,
                    tensor: ti,
                    coord: ci,
                    analytic: analytic[ti][ci],
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
