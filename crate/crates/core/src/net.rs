//! The two-branch skipping classifier.
//!
//! A shared stem conv feeds two structurally identical branches. Each
//! branch alternates densely connected blocks with 1x1-conv transitions;
//! every dense layer carries a small gating network whose scalar output
//! (per sample) scales the layer's contribution, so a closed gate skips
//! the layer. The local branch classifies the small constituent digit,
//! the global branch the large composite one. An optional guide link
//! feeds the global branch's final features back into the local branch's
//! last transition.
//!
//! Parameters live in plain tensors ([`NetworkParams`]); every forward
//! binds them onto a fresh tape. The canonical parameter order (the one
//! [`NetworkParams::param_entries`] yields and
//! [`ForwardOutput::param_vars`] mirrors) is the contract that keeps
//! optimizer state and checkpoints aligned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Branch, ChannelPlan, MergeType, NetworkConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::Tensor;

/// Fraction of the previous running statistic kept per batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ConvParams<F: Scalar> {
    /// Kernel, shape `[out_c, in_c, kh, kw]`.
    pub weight: Tensor<F>,
    /// Per-output-channel bias, shape `[out_c]`.
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct BnParams<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    /// Running per-channel mean; state, not a learned parameter.
    pub running_mean: Vec<F>,
    /// Running per-channel (biased) variance; state, not a learned parameter.
    pub running_var: Vec<F>,
}

impl<F: Scalar> BnParams<F> {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], F::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![F::ZERO; channels],
            running_var: vec![F::ONE; channels],
        }
    }
}

/// Pre-activation dense layer: bn -> relu -> 3x3 conv (pad 1).
#[derive(Debug, Clone)]
pub struct DenseLayerParams<F: Scalar> {
    pub bn: BnParams<F>,
    pub conv: ConvParams<F>,
}

/// Affine gate on the pooled layer input: one scalar per sample.
#[derive(Debug, Clone)]
pub struct GateParams<F: Scalar> {
    /// Shape `[in_channels, 1]`; consumed by a linear map on the pooled input.
    pub weight: Tensor<F>,
    /// Shape `[1]`.
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct SkipLayerParams<F: Scalar> {
    pub dense: DenseLayerParams<F>,
    pub gate: GateParams<F>,
}

#[derive(Debug, Clone)]
pub struct SkipDenseBlockParams<F: Scalar> {
    pub layers: Vec<SkipLayerParams<F>>,
}

/// Between-block reducer: bn -> relu -> 1x1 conv -> 2x2 avg pool.
#[derive(Debug, Clone)]
pub struct TransitionParams<F: Scalar> {
    pub bn: BnParams<F>,
    pub conv: ConvParams<F>,
}

#[derive(Debug, Clone)]
pub struct LinearParams<F: Scalar> {
    /// Shape `[in_features, classes]`.
    pub weight: Tensor<F>,
    /// Shape `[classes]`.
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct BranchParams<F: Scalar> {
    pub blocks: Vec<SkipDenseBlockParams<F>>,
    pub transitions: Vec<TransitionParams<F>>,
    pub head: LinearParams<F>,
}

#[derive(Debug, Clone)]
pub struct NetworkParams<F: Scalar> {
    pub stem: ConvParams<F>,
    pub local: BranchParams<F>,
    pub global: BranchParams<F>,
}

impl<F: Scalar> NetworkParams<F> {
    pub fn branch(&self, branch: Branch) -> &BranchParams<F> {
        match branch {
            Branch::Local => &self.local,
            Branch::Global => &self.global,
        }
    }

    /// Learned parameters in canonical order. This order is load-bearing:
    /// checkpoints, optimizer velocities, and [`ForwardOutput::param_vars`]
    /// all index into it.
    pub fn param_entries(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        out.push(("stem.conv.weight".to_string(), &self.stem.weight));
        out.push(("stem.conv.bias".to_string(), &self.stem.bias));
        for (branch, bp) in [("local", &self.local), ("global", &self.global)] {
            let blocks = bp.blocks.len();
            for (b, block) in bp.blocks.iter().enumerate() {
                for (l, layer) in block.layers.iter().enumerate() {
                    let p = format!("{branch}.block{b}.layer{l}");
                    out.push((format!("{p}.bn.gamma"), &layer.dense.bn.gamma));
                    out.push((format!("{p}.bn.beta"), &layer.dense.bn.beta));
                    out.push((format!("{p}.conv.weight"), &layer.dense.conv.weight));
                    out.push((format!("{p}.conv.bias"), &layer.dense.conv.bias));
                    out.push((format!("{p}.gate.weight"), &layer.gate.weight));
                    out.push((format!("{p}.gate.bias"), &layer.gate.bias));
                }
                if b + 1 < blocks {
                    let t = &bp.transitions[b];
                    let p = format!("{branch}.trans{b}");
                    out.push((format!("{p}.bn.gamma"), &t.bn.gamma));
                    out.push((format!("{p}.bn.beta"), &t.bn.beta));
                    out.push((format!("{p}.conv.weight"), &t.conv.weight));
                    out.push((format!("{p}.conv.bias"), &t.conv.bias));
                }
            }
            out.push((format!("{branch}.head.weight"), &bp.head.weight));
            out.push((format!("{branch}.head.bias"), &bp.head.bias));
        }
        out
    }

    /// Mutable view of the learned parameters, same order as
    /// [`Self::param_entries`].
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        out.push(("stem.conv.weight".to_string(), &mut self.stem.weight));
        out.push(("stem.conv.bias".to_string(), &mut self.stem.bias));
        for (branch, bp) in [("local", &mut self.local), ("global", &mut self.global)] {
            let blocks = bp.blocks.len();
            let mut trans = bp.transitions.iter_mut();
            for (b, block) in bp.blocks.iter_mut().enumerate() {
                for (l, layer) in block.layers.iter_mut().enumerate() {
                    let p = format!("{branch}.block{b}.layer{l}");
                    out.push((format!("{p}.bn.gamma"), &mut layer.dense.bn.gamma));
                    out.push((format!("{p}.bn.beta"), &mut layer.dense.bn.beta));
                    out.push((format!("{p}.conv.weight"), &mut layer.dense.conv.weight));
                    out.push((format!("{p}.conv.bias"), &mut layer.dense.conv.bias));
                    out.push((format!("{p}.gate.weight"), &mut layer.gate.weight));
                    out.push((format!("{p}.gate.bias"), &mut layer.gate.bias));
                }
                if b + 1 < blocks {
                    let t = trans.next().expect("transition per non-final block");
                    let p = format!("{branch}.trans{b}");
                    out.push((format!("{p}.bn.gamma"), &mut t.bn.gamma));
                    out.push((format!("{p}.bn.beta"), &mut t.bn.beta));
                    out.push((format!("{p}.conv.weight"), &mut t.conv.weight));
                    out.push((format!("{p}.conv.bias"), &mut t.conv.bias));
                }
            }
            out.push((format!("{branch}.head.weight"), &mut bp.head.weight));
            out.push((format!("{branch}.head.bias"), &mut bp.head.bias));
        }
        out
    }

    /// Batch-norm running statistics in canonical order (separate from the
    /// learned parameters; saved alongside them in checkpoints).
    pub fn state_entries(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = Vec::new();
        for (branch, bp) in [("local", &self.local), ("global", &self.global)] {
            let blocks = bp.blocks.len();
            for (b, block) in bp.blocks.iter().enumerate() {
                for (l, layer) in block.layers.iter().enumerate() {
                    let p = format!("{branch}.block{b}.layer{l}.bn");
                    out.push((format!("{p}.running_mean"), &layer.dense.bn.running_mean));
                    out.push((format!("{p}.running_var"), &layer.dense.bn.running_var));
                }
                if b + 1 < blocks {
                    let t = &bp.transitions[b];
                    let p = format!("{branch}.trans{b}.bn");
                    out.push((format!("{p}.running_mean"), &t.bn.running_mean));
                    out.push((format!("{p}.running_var"), &t.bn.running_var));
                }
            }
        }
        out
    }

    /// Mutable view of the running statistics, same order as
    /// [`Self::state_entries`].
    pub fn state_entries_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        for (branch, bp) in [("local", &mut self.local), ("global", &mut self.global)] {
            let blocks = bp.blocks.len();
            let mut trans = bp.transitions.iter_mut();
            for (b, block) in bp.blocks.iter_mut().enumerate() {
                for (l, layer) in block.layers.iter_mut().enumerate() {
                    let p = format!("{branch}.block{b}.layer{l}.bn");
                    out.push((format!("{p}.running_mean"), &mut layer.dense.bn.running_mean[..]));
                    out.push((format!("{p}.running_var"), &mut layer.dense.bn.running_var[..]));
                }
                if b + 1 < blocks {
                    let t = trans.next().expect("transition per non-final block");
                    let p = format!("{branch}.trans{b}.bn");
                    out.push((format!("{p}.running_mean"), &mut t.bn.running_mean[..]));
                    out.push((format!("{p}.running_var"), &mut t.bn.running_var[..]));
                }
            }
        }
        out
    }

    /// Total learned scalar count.
    pub fn num_params(&self) -> usize {
        self.param_entries().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Builds a freshly initialized network.
///
/// Convolutions and heads draw from a normal with std `sqrt(2 / fan_in)`,
/// conv and head biases start at zero, batch norm starts as the identity
/// (gamma 1, beta 0), and gates start saturated open (weight 0, bias 1).
/// The draw order is fixed, so a seed fully determines every parameter.
pub fn build_network<F: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<F>> {
    let plan = ChannelPlan::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = conv_init(&mut rng, cfg.stem_channels, cfg.input_channels, 3);
    let local = branch_init(&mut rng, cfg, &plan.local, cfg.num_local_classes);
    let global = branch_init(&mut rng, cfg, &plan.global, cfg.num_global_classes);
    Ok(NetworkParams {
        stem,
        local,
        global,
    })
}

fn branch_init<F: Scalar>(
    rng: &mut ChaCha8Rng,
    cfg: &NetworkConfig,
    plan: &crate::config::BranchPlan,
    classes: usize,
) -> BranchParams<F> {
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    let mut transitions = Vec::with_capacity(cfg.num_blocks - 1);
    for b in 0..cfg.num_blocks {
        let mut layers = Vec::with_capacity(cfg.layers_per_block);
        let mut c = plan.block_in[b];
        for _ in 0..cfg.layers_per_block {
            let out_c = match cfg.merge {
                MergeType::Concat => cfg.growth_rate,
                MergeType::Add => c,
            };
            layers.push(SkipLayerParams {
                dense: DenseLayerParams {
                    bn: BnParams::new(c),
                    conv: conv_init(rng, out_c, c, 3),
                },
                gate: GateParams {
                    weight: Tensor::zeros(&[c, 1]),
                    bias: Tensor::full(&[1], F::ONE),
                },
            });
            if cfg.merge == MergeType::Concat {
                c += cfg.growth_rate;
            }
        }
        blocks.push(SkipDenseBlockParams { layers });
        if b + 1 < cfg.num_blocks {
            transitions.push(TransitionParams {
                bn: BnParams::new(plan.trans_in[b]),
                conv: conv_init(rng, plan.trans_out[b], plan.trans_in[b], 1),
            });
        }
    }
    let d = plan.block_out[cfg.num_blocks - 1];
    let head = LinearParams {
        weight: he_normal(rng, vec![d, classes], d),
        bias: Tensor::zeros(&[classes]),
    };
    BranchParams {
        blocks,
        transitions,
        head,
    }
}

fn conv_init<F: Scalar>(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ConvParams<F> {
    ConvParams {
        weight: he_normal(rng, vec![out_c, in_c, k, k], in_c * k * k),
        bias: Tensor::zeros(&[out_c]),
    }
}

fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("dimensions agree by construction")
}

/// How gates behave during a forward pass.
#[derive(Debug, Clone)]
pub enum GateMode<F: Scalar> {
    /// Bypass gating entirely: every layer runs ungated and gate
    /// parameters stay off the computation graph. Used for warm-up
    /// training and as the all-open reference.
    Open,
    /// Soft gates: features are scaled by the hard-sigmoid output.
    Continuous { k: F },
    /// Hard gates: the continuous value is thresholded to exactly 0 or 1.
    Discrete { k: F, threshold: F },
    /// Externally supplied gate values in `[0, 1]`, one vector of
    /// per-sample values per dense layer; local branch layers first in
    /// block order, then global. Gate parameters stay unused.
    Forced { gates: Vec<Vec<F>> },
}

/// One gating decision: which layer it belongs to and what the gate
/// produced for each sample of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord<F: Scalar> {
    pub block: usize,
    pub layer: usize,
    /// Continuous gate value per sample, in `[0, 1]`.
    pub continuous: Vec<F>,
    /// Per-sample decision: 1 keeps the layer, 0 skips it. Present only
    /// for discrete-mode forwards.
    pub decisions: Option<Vec<u8>>,
    pub threshold: Option<F>,
}

/// Gate activity of one forward pass, per branch in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateTrace<F: Scalar> {
    pub local: Vec<GateRecord<F>>,
    pub global: Vec<GateRecord<F>>,
}

impl<F: Scalar> GateTrace<F> {
    pub fn branch(&self, branch: Branch) -> &[GateRecord<F>] {
        match branch {
            Branch::Local => &self.local,
            Branch::Global => &self.global,
        }
    }
}

/// Result of [`gating_forward`].
pub struct GateOutcome<F: Scalar> {
    /// Node to scale the layer output with (thresholded when discrete).
    pub gate: Var,
    /// Continuous per-sample values, read back off the tape.
    pub continuous: Vec<F>,
    /// Present in discrete mode: 1 keeps, 0 skips.
    pub decisions: Option<Vec<u8>>,
}

/// Everything a forward pass produces besides tape state.
#[derive(Debug)]
pub struct ForwardOutput<F: Scalar> {
    pub local_logits: Var,
    pub global_logits: Var,
    pub trace: GateTrace<F>,
    /// Leaf vars of every learned parameter, aligned with
    /// [`NetworkParams::param_entries`]. Read gradients through these
    /// after `backward`.
    pub param_vars: Vec<Var>,
    /// Named activations for visualization: the stem output
    /// (`shared_conv`) and each transition output
    /// (`local.transition0`, `global.transition1`, ...).
    pub taps: Vec<(String, Var)>,
}

#[derive(Clone, Copy)]
struct BnVars {
    gamma: Var,
    beta: Var,
}

#[derive(Clone, Copy)]
struct PairVars {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct DenseVars {
    bn: BnVars,
    conv: PairVars,
}

#[derive(Clone, Copy)]
struct LayerVars {
    dense: DenseVars,
    gate: PairVars,
}

#[derive(Clone, Copy)]
struct TransVars {
    bn: BnVars,
    conv: PairVars,
}

struct BranchVars {
    blocks: Vec<Vec<LayerVars>>,
    trans: Vec<TransVars>,
    head: PairVars,
}

struct NetVars {
    stem: PairVars,
    local: BranchVars,
    global: BranchVars,
}

fn reg<F: Scalar>(tape: &mut Tape<F>, flat: &mut Vec<Var>, t: &Tensor<F>) -> Var {
    let v = tape.param(t);
    flat.push(v);
    v
}

fn bind_bn<F: Scalar>(tape: &mut Tape<F>, flat: &mut Vec<Var>, bn: &BnParams<F>) -> BnVars {
    BnVars {
        gamma: reg(tape, flat, &bn.gamma),
        beta: reg(tape, flat, &bn.beta),
    }
}

fn bind_branch<F: Scalar>(
    tape: &mut Tape<F>,
    flat: &mut Vec<Var>,
    bp: &BranchParams<F>,
) -> BranchVars {
    let blocks_n = bp.blocks.len();
    let mut blocks = Vec::with_capacity(blocks_n);
    let mut trans = Vec::with_capacity(bp.transitions.len());
    for (b, block) in bp.blocks.iter().enumerate() {
        let mut layers = Vec::with_capacity(block.layers.len());
        for layer in &block.layers {
            layers.push(LayerVars {
                dense: DenseVars {
                    bn: bind_bn(tape, flat, &layer.dense.bn),
                    conv: PairVars {
                        w: reg(tape, flat, &layer.dense.conv.weight),
                        b: reg(tape, flat, &layer.dense.conv.bias),
                    },
                },
                gate: PairVars {
                    w: reg(tape, flat, &layer.gate.weight),
                    b: reg(tape, flat, &layer.gate.bias),
                },
            });
        }
        blocks.push(layers);
        if b + 1 < blocks_n {
            let t = &bp.transitions[b];
            trans.push(TransVars {
                bn: bind_bn(tape, flat, &t.bn),
                conv: PairVars {
                    w: reg(tape, flat, &t.conv.weight),
                    b: reg(tape, flat, &t.conv.bias),
                },
            });
        }
    }
    let head = PairVars {
        w: reg(tape, flat, &bp.head.weight),
        b: reg(tape, flat, &bp.head.bias),
    };
    BranchVars {
        blocks,
        trans,
        head,
    }
}

/// Binds every learned parameter as a tape leaf, in canonical order.
fn bind_network<F: Scalar>(
    tape: &mut Tape<F>,
    params: &NetworkParams<F>,
    flat: &mut Vec<Var>,
) -> NetVars {
    let stem = PairVars {
        w: reg(tape, flat, &params.stem.weight),
        b: reg(tape, flat, &params.stem.bias),
    };
    let local = bind_branch(tape, flat, &params.local);
    let global = bind_branch(tape, flat, &params.global);
    NetVars {
        stem,
        local,
        global,
    }
}

/// Computes per-sample gate values for one layer from pre-bound gate
/// parameters: pooled input -> affine -> hard sigmoid, optionally
/// thresholded to a hard 0/1 decision.
fn gating_bound<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    weight: Var,
    bias: Var,
    k: F,
    threshold: Option<F>,
) -> Result<GateOutcome<F>> {
    let xs = tape.shape(x);
    if xs.len() != 4 {
        return Err(Error::shape(
            "gating_forward",
            format!("input must be [N,C,H,W], got {xs:?}"),
        ));
    }
    let (n, c) = (xs[0], xs[1]);
    if tape.shape(weight) != &[c, 1] {
        return Err(Error::shape(
            "gating_forward",
            format!(
                "gate weight shape {:?} does not match {c} input channels",
                tape.shape(weight)
            ),
        ));
    }
    let pooled = tape.global_avg_pool(x)?;
    let z = tape.linear(pooled, weight, Some(bias))?;
    let z = tape.reshape(z, &[n])?;
    let cont = tape.hard_sigm_ste(z, k)?;
    let continuous = tape.value(cont).to_vec();
    match threshold {
        None => Ok(GateOutcome {
            gate: cont,
            continuous,
            decisions: None,
        }),
        Some(t) => {
            let hard = tape.binarize_ste(cont, t)?;
            let decisions = tape
                .value(hard)
                .iter()
                .map(|v| u8::from(*v != F::ZERO))
                .collect();
            Ok(GateOutcome {
                gate: hard,
                continuous,
                decisions: Some(decisions),
            })
        }
    }
}

/// Standalone gating op; binds the gate parameters itself. `threshold`
/// `None` means continuous mode.
pub fn gating_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    gate: &GateParams<F>,
    k: F,
    threshold: Option<F>,
) -> Result<GateOutcome<F>> {
    let w = tape.param(&gate.weight);
    let b = tape.param(&gate.bias);
    gating_bound(tape, x, w, b, k, threshold)
}

fn dense_bound<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: DenseVars,
    running_mean: &mut [F],
    running_var: &mut [F],
    gate: Option<Var>,
    merge: MergeType,
    bn_mode: BnMode,
) -> Result<Var> {
    let y = tape.batchnorm2d(
        x,
        vars.bn.gamma,
        vars.bn.beta,
        running_mean,
        running_var,
        bn_mode,
        F::from_f64(BN_MOMENTUM),
        F::from_f64(BN_EPS),
    )?;
    let y = tape.relu(y);
    let kh = tape.shape(vars.conv.w)[2];
    let f = tape.conv2d(y, vars.conv.w, Some(vars.conv.b), 1, kh / 2)?;
    let f = match gate {
        Some(g) => tape.scale_by_gate(f, g)?,
        None => f,
    };
    match merge {
        MergeType::Concat => tape.concat_channels(x, f),
        MergeType::Add => tape.add(x, f),
    }
}

/// One dense layer: bn -> relu -> conv, scaled by `gate` if given, then
/// merged with the input. Standalone variant that binds its own
/// parameters; `layer` is mutable only for the running statistics.
pub fn dense_layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    layer: &mut DenseLayerParams<F>,
    gate: Option<Var>,
    merge: MergeType,
    bn_mode: BnMode,
) -> Result<Var> {
    let vars = DenseVars {
        bn: BnVars {
            gamma: tape.param(&layer.bn.gamma),
            beta: tape.param(&layer.bn.beta),
        },
        conv: PairVars {
            w: tape.param(&layer.conv.weight),
            b: tape.param(&layer.conv.bias),
        },
    };
    dense_bound(
        tape,
        x,
        vars,
        &mut layer.bn.running_mean,
        &mut layer.bn.running_var,
        gate,
        merge,
        bn_mode,
    )
}

fn transition_bound<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: TransVars,
    running_mean: &mut [F],
    running_var: &mut [F],
    bn_mode: BnMode,
) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 4 {
        return Err(Error::shape(
            "transition_forward",
            format!("input must be [N,C,H,W], got {xs:?}"),
        ));
    }
    let (h, w) = (xs[2], xs[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "transition_forward",
            format!("spatial size {h}x{w} too small to pool"),
        ));
    }
    let y = tape.batchnorm2d(
        x,
        vars.bn.gamma,
        vars.bn.beta,
        running_mean,
        running_var,
        bn_mode,
        F::from_f64(BN_MOMENTUM),
        F::from_f64(BN_EPS),
    )?;
    let y = tape.relu(y);
    let y = tape.conv2d(y, vars.conv.w, Some(vars.conv.b), 1, 0)?;
    tape.avg_pool2d(y, 2, 2)
}

/// Standalone transition op: bn -> relu -> 1x1 conv -> 2x2 avg pool,
/// halving the spatial size (floor). `t` is mutable only for the running
/// statistics.
pub fn transition_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    t: &mut TransitionParams<F>,
    bn_mode: BnMode,
) -> Result<Var> {
    let vars = TransVars {
        bn: BnVars {
            gamma: tape.param(&t.bn.gamma),
            beta: tape.param(&t.bn.beta),
        },
        conv: PairVars {
            w: tape.param(&t.conv.weight),
            b: tape.param(&t.conv.bias),
        },
    };
    transition_bound(
        tape,
        x,
        vars,
        &mut t.bn.running_mean,
        &mut t.bn.running_var,
        bn_mode,
    )
}

#[allow(clippy::too_many_arguments)]
fn block_bound<F: Scalar>(
    tape: &mut Tape<F>,
    mut x: Var,
    block: &mut SkipDenseBlockParams<F>,
    vars: &[LayerVars],
    merge: MergeType,
    mode: &GateMode<F>,
    bn_mode: BnMode,
    block_index: usize,
    forced_base: usize,
    records: &mut Vec<GateRecord<F>>,
) -> Result<Var> {
    for (l, (layer, lv)) in block.layers.iter_mut().zip(vars).enumerate() {
        let gate = match mode {
            GateMode::Open => None,
            GateMode::Continuous { k } => {
                let out = gating_bound(tape, x, lv.gate.w, lv.gate.b, *k, None)?;
                records.push(GateRecord {
                    block: block_index,
                    layer: l,
                    continuous: out.continuous,
                    decisions: None,
                    threshold: None,
                });
                Some(out.gate)
            }
            GateMode::Discrete { k, threshold } => {
                let out = gating_bound(tape, x, lv.gate.w, lv.gate.b, *k, Some(*threshold))?;
                records.push(GateRecord {
                    block: block_index,
                    layer: l,
                    continuous: out.continuous,
                    decisions: out.decisions,
                    threshold: Some(*threshold),
                });
                Some(out.gate)
            }
            GateMode::Forced { gates } => {
                let idx = forced_base + l;
                let n = tape.shape(x)[0];
                let g = gates.get(idx).ok_or_else(|| {
                    Error::arg(
                        "network_forward",
                        format!("forced gate list ends before layer index {idx}"),
                    )
                })?;
                if g.len() != n {
                    return Err(Error::arg(
                        "network_forward",
                        format!(
                            "forced gate {idx} has {} values for a batch of {n}",
                            g.len()
                        ),
                    ));
                }
                if g.iter().any(|v| !(*v >= F::ZERO && *v <= F::ONE)) {
                    return Err(Error::arg(
                        "network_forward",
                        format!("forced gate {idx} has values outside [0, 1]"),
                    ));
                }
                let gv = tape.input_from(vec![n], g.clone())?;
                records.push(GateRecord {
                    block: block_index,
                    layer: l,
                    continuous: g.clone(),
                    decisions: None,
                    threshold: None,
                });
                Some(gv)
            }
        };
        let st = &mut layer.dense.bn;
        x = dense_bound(
            tape,
            x,
            lv.dense,
            &mut st.running_mean,
            &mut st.running_var,
            gate,
            merge,
            bn_mode,
        )?;
    }
    Ok(x)
}

/// Standalone skip-dense block: gating plus dense layer, sequentially.
/// For `GateMode::Forced` the gate list is indexed by layer position
/// within this block. Appends one record per gated layer to `records`.
pub fn skip_dense_block_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    block: &mut SkipDenseBlockParams<F>,
    merge: MergeType,
    mode: &GateMode<F>,
    bn_mode: BnMode,
    block_index: usize,
    records: &mut Vec<GateRecord<F>>,
) -> Result<Var> {
    let mut vars = Vec::with_capacity(block.layers.len());
    for layer in &block.layers {
        vars.push(LayerVars {
            dense: DenseVars {
                bn: BnVars {
                    gamma: tape.param(&layer.dense.bn.gamma),
                    beta: tape.param(&layer.dense.bn.beta),
                },
                conv: PairVars {
                    w: tape.param(&layer.dense.conv.weight),
                    b: tape.param(&layer.dense.conv.bias),
                },
            },
            gate: PairVars {
                w: tape.param(&layer.gate.weight),
                b: tape.param(&layer.gate.bias),
            },
        });
    }
    block_bound(
        tape, x, block, &vars, merge, mode, bn_mode, block_index, 0, records,
    )
}

struct BranchOut {
    logits: Var,
    /// Output of the final block, before pooling; the guide link taps
    /// this on the global branch.
    last_block: Var,
}

#[allow(clippy::too_many_arguments)]
fn branch_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bp: &mut BranchParams<F>,
    bv: &BranchVars,
    cfg: &NetworkConfig,
    branch: Branch,
    stem_out: Var,
    mode: &GateMode<F>,
    bn_mode: BnMode,
    guide_in: Option<Var>,
    records: &mut Vec<GateRecord<F>>,
    taps: &mut Vec<(String, Var)>,
    forced_base: usize,
) -> Result<BranchOut> {
    let mut x = stem_out;
    for b in 0..cfg.num_blocks {
        x = block_bound(
            tape,
            x,
            &mut bp.blocks[b],
            &bv.blocks[b],
            cfg.merge,
            mode,
            bn_mode,
            b,
            forced_base + b * cfg.layers_per_block,
            records,
        )?;
        if b + 1 < cfg.num_blocks {
            if b + 2 == cfg.num_blocks {
                if let Some(g) = guide_in {
                    x = tape.concat_channels(x, g)?;
                }
            }
            let t = &mut bp.transitions[b];
            x = transition_bound(
                tape,
                x,
                bv.trans[b],
                &mut t.bn.running_mean,
                &mut t.bn.running_var,
                bn_mode,
            )?;
            taps.push((format!("{}.transition{b}", branch.name()), x));
        }
    }
    let last_block = x;
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.linear(pooled, bv.head.w, Some(bv.head.b))?;
    Ok(BranchOut { logits, last_block })
}

/// Full forward pass: stem, global branch, optional guide link, local
/// branch, both heads. The global branch runs first so its final features
/// are available to the guide link.
///
/// `params` is mutable only for batch-norm running statistics (updated in
/// train mode, read in eval mode).
pub fn network_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &mut NetworkParams<F>,
    cfg: &NetworkConfig,
    images: &Tensor<F>,
    mode: &GateMode<F>,
    bn_mode: BnMode,
) -> Result<ForwardOutput<F>> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "network_forward",
            format!("images must be [N,C,H,W], got {shape:?}"),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 {
        return Err(Error::shape("network_forward", "empty batch"));
    }
    if c != cfg.input_channels {
        return Err(Error::shape(
            "network_forward",
            format!("got {c} input channels, config expects {}", cfg.input_channels),
        ));
    }
    let ds = cfg.total_downsample();
    if h % ds != 0 || w % ds != 0 {
        return Err(Error::shape(
            "network_forward",
            format!("spatial size {h}x{w} not divisible by the total downsample factor {ds}"),
        ));
    }
    let per_branch = cfg.layers_per_branch();
    if let GateMode::Forced { gates } = mode {
        if gates.len() != 2 * per_branch {
            return Err(Error::arg(
                "network_forward",
                format!(
                    "forced mode needs {} gate vectors (local then global), got {}",
                    2 * per_branch,
                    gates.len()
                ),
            ));
        }
    }

    let mut param_vars = Vec::new();
    let vars = bind_network(tape, params, &mut param_vars);
    let img = tape.input(images);
    let stem_out = tape.conv2d(img, vars.stem.w, Some(vars.stem.b), 1, 1)?;

    let mut taps = vec![("shared_conv".to_string(), stem_out)];
    let mut trace = GateTrace::default();

    let global_out = branch_forward(
        tape,
        &mut params.global,
        &vars.global,
        cfg,
        Branch::Global,
        stem_out,
        mode,
        bn_mode,
        None,
        &mut trace.global,
        &mut taps,
        per_branch,
    )?;

    let guide_in = if cfg.guide_enabled {
        // The local branch's last transition sees spatial size
        // h / 2^(num_blocks - 2); the global features arrive one halving
        // smaller, so this is a 2x upsample.
        let th = h >> (cfg.num_blocks - 2);
        let tw = w >> (cfg.num_blocks - 2);
        Some(tape.bilinear_upsample(global_out.last_block, th, tw)?)
    } else {
        None
    };

    let local_out = branch_forward(
        tape,
        &mut params.local,
        &vars.local,
        cfg,
        Branch::Local,
        stem_out,
        mode,
        bn_mode,
        guide_in,
        &mut trace.local,
        &mut taps,
        0,
    )?;

    Ok(ForwardOutput {
        local_logits: local_out.logits,
        global_logits: global_out.logits,
        trace,
        param_vars,
        taps,
    })
}

/// Mean fraction of skipped layers in one branch, averaged over samples.
/// Only defined for traces whose records carry hard decisions.
pub fn skip_ratio<F: Scalar>(trace: &GateTrace<F>, branch: Branch) -> Result<f64> {
    let records = trace.branch(branch);
    if records.is_empty() {
        return Err(Error::arg(
            "skip_ratio",
            format!("trace holds no gate records for the {} branch", branch.name()),
        ));
    }
    let layers = records.len();
    let samples = records[0].continuous.len();
    let mut skipped_per_sample = vec![0usize; samples];
    for rec in records {
        let decisions = rec.decisions.as_ref().ok_or_else(|| {
            Error::arg(
                "skip_ratio",
                "trace has continuous gate values only; run a discrete-mode forward",
            )
        })?;
        if decisions.len() != samples {
            return Err(Error::arg(
                "skip_ratio",
                "gate records disagree on the sample count",
            ));
        }
        for (s, d) in decisions.iter().enumerate() {
            if *d == 0 {
                skipped_per_sample[s] += 1;
            }
        }
    }
    let mean: f64 = skipped_per_sample
        .iter()
        .map(|&k| k as f64 / layers as f64)
        .sum::<f64>()
        / samples as f64;
    Ok(mean)
}
