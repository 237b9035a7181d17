//! Architecture-level oracles: the tape-built network against an
//! independent plain-loop reference, finite differences over whole
//! parameter sets, and the gating semantics (open, forced, discrete).

mod common;

use common::{max_rel_diff, reference_forward};
use dualskip_core::config::{Branch, MergeType, NetworkConfig};
use dualskip_core::gradcheck::{finite_diff_check_params, DEFAULT_EPS, GRAD_TOL};
use dualskip_core::net::{
    build_network, dense_layer_forward, gating_forward, network_forward, skip_dense_block_forward,
    skip_ratio, transition_forward, BnParams, ConvParams, GateMode, GateParams, NetworkParams,
    TransitionParams,
};
use dualskip_core::tape::{BnMode, Tape, Var};
use dualskip_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data = (0..n * c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}

fn fill(t: &mut Tensor<f64>, r: &mut ChaCha8Rng, lo: f64, hi: f64) {
    for v in t.data_mut() {
        *v = r.gen_range(lo..hi);
    }
}

/// Moves every identity-initialized quantity (bn affine, biases, running
/// stats) off its default so equivalence checks cannot pass by accident.
fn randomize_aux(net: &mut NetworkParams<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in net.param_entries_mut() {
        if name.ends_with("bn.gamma") {
            fill(t, &mut r, 0.5, 1.5);
        } else if name.ends_with("bn.beta") || name.ends_with("conv.bias") || name.ends_with("head.bias") {
            fill(t, &mut r, -0.3, 0.3);
        }
    }
    for (name, s) in net.state_entries_mut() {
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 2.0)
        } else {
            (-0.5, 0.5)
        };
        for v in s.iter_mut() {
            *v = r.gen_range(lo..hi);
        }
    }
}

fn param_index(net: &NetworkParams<f64>, name: &str) -> usize {
    net.param_entries()
        .iter()
        .position(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
}

fn guide_cfg() -> NetworkConfig {
    NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        merge: MergeType::Concat,
        compression: 0.75,
        guide_enabled: true,
        num_local_classes: 3,
        num_global_classes: 5,
        input_channels: 2,
        stem_channels: 8,
    }
}

fn all_open_gates(cfg: &NetworkConfig, n: usize) -> GateMode<f64> {
    GateMode::Forced {
        gates: vec![vec![1.0; n]; 2 * cfg.layers_per_branch()],
    }
}

#[test]
fn open_gates_match_reference_on_100_inputs() {
    let cfg = guide_cfg();
    let mut net = build_network::<f64>(&cfg, 42).unwrap();
    randomize_aux(&mut net, 43);

    for batch in 0..4 {
        let images = rand_images(25, 2, 12, 12, 100 + batch);
        let mut tape = Tape::new();
        let out = network_forward(&mut tape, &mut net, &cfg, &images, &GateMode::Open, BnMode::Eval)
            .unwrap();
        let (ref_local, ref_global) = reference_forward(&mut net.clone(), &cfg, &images, false);

        let d_local = max_rel_diff(tape.value(out.local_logits), &ref_local);
        let d_global = max_rel_diff(tape.value(out.global_logits), &ref_global);
        assert!(d_local <= 1e-6, "local logits diverge: {d_local}");
        assert!(d_global <= 1e-6, "global logits diverge: {d_global}");

        // Forcing every gate to exactly 1 must not change a single bit.
        let mut tape_f = Tape::new();
        let out_f = network_forward(
            &mut tape_f,
            &mut net,
            &cfg,
            &images,
            &all_open_gates(&cfg, 25),
            BnMode::Eval,
        )
        .unwrap();
        assert_eq!(tape.value(out.local_logits), tape_f.value(out_f.local_logits));
        assert_eq!(tape.value(out.global_logits), tape_f.value(out_f.global_logits));
    }
}

#[test]
fn open_gates_match_reference_in_train_mode() {
    let cfg = guide_cfg();
    let mut net = build_network::<f64>(&cfg, 5).unwrap();
    randomize_aux(&mut net, 6);
    let mut ref_net = net.clone();

    let images = rand_images(6, 2, 12, 12, 7);
    let mut tape = Tape::new();
    let out =
        network_forward(&mut tape, &mut net, &cfg, &images, &GateMode::Open, BnMode::Train).unwrap();
    let (ref_local, ref_global) = reference_forward(&mut ref_net, &cfg, &images, true);

    assert!(max_rel_diff(tape.value(out.local_logits), &ref_local) <= 1e-6);
    assert!(max_rel_diff(tape.value(out.global_logits), &ref_global) <= 1e-6);

    // Both implementations must have blended the same batch statistics
    // into their running estimates.
    let state_a = net.state_entries();
    let state_b = ref_net.state_entries();
    assert_eq!(state_a.len(), state_b.len());
    for ((na, sa), (nb, sb)) in state_a.iter().zip(&state_b) {
        assert_eq!(na, nb);
        assert!(max_rel_diff(sa, sb) <= 1e-9, "{na} drifted");
    }
}

#[test]
fn add_merge_matches_reference() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 2,
        growth_rate: 6,
        merge: MergeType::Add,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 4,
        num_global_classes: 4,
        input_channels: 1,
        stem_channels: 6,
    };
    let mut net = build_network::<f64>(&cfg, 17).unwrap();
    randomize_aux(&mut net, 18);
    let images = rand_images(8, 1, 8, 8, 19);
    let mut tape = Tape::new();
    let out =
        network_forward(&mut tape, &mut net, &cfg, &images, &GateMode::Open, BnMode::Eval).unwrap();
    let (ref_local, ref_global) = reference_forward(&mut net.clone(), &cfg, &images, false);
    assert!(max_rel_diff(tape.value(out.local_logits), &ref_local) <= 1e-6);
    assert!(max_rel_diff(tape.value(out.global_logits), &ref_global) <= 1e-6);
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 2,
        growth_rate: 2,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 3,
        num_global_classes: 3,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut base = build_network::<f64>(&cfg, 11).unwrap();
    // Park the gates in the linear region of the hard sigmoid, where the
    // pass-through backward (slope treated as 1) is the true derivative,
    // so central differences are meaningful along the gate path too.
    let mut r = rng(12);
    for (name, t) in base.param_entries_mut() {
        if name.ends_with("gate.weight") {
            fill(t, &mut r, -0.05, 0.05);
        } else if name.ends_with("gate.bias") {
            fill(t, &mut r, 0.2, 0.2 + 1e-9);
        }
    }
    let images = rand_images(2, 1, 8, 8, 21);
    let labels_l = vec![0usize, 2];
    let labels_g = vec![1usize, 0];
    let mode = GateMode::Continuous { k: 1.0 };

    // The check is only honest while no gate saturates at the base point.
    {
        let mut p = base.clone();
        let mut tape = Tape::new();
        let out = network_forward(&mut tape, &mut p, &cfg, &images, &mode, BnMode::Train).unwrap();
        for rec in out.trace.local.iter().chain(&out.trace.global) {
            for v in &rec.continuous {
                assert!(
                    *v > 0.05 && *v < 0.95,
                    "gate saturated at the expansion point: {v}"
                );
            }
        }
    }

    let build = |tape: &mut Tape<f64>, p: &mut NetworkParams<f64>| -> dualskip_core::Result<(Var, Vec<Var>)> {
        let out = network_forward(tape, p, &cfg, &images, &mode, BnMode::Train)?;
        let ll = tape.softmax_cross_entropy(out.local_logits, &labels_l)?;
        let lg = tape.softmax_cross_entropy(out.global_logits, &labels_g)?;
        let loss = tape.add(ll, lg)?;
        Ok((loss, out.param_vars))
    };
    let report = finite_diff_check_params(&build, &base, DEFAULT_EPS).unwrap();
    assert!(
        report.max_rel_err <= GRAD_TOL,
        "worst gradient disagreement: {report:?}"
    );
}

#[test]
fn discrete_forward_equals_forced_binarized_bitwise() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 3,
        growth_rate: 2,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 4,
        num_global_classes: 4,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 31).unwrap();
    randomize_aux(&mut net, 32);
    let mut r = rng(33);
    for (name, t) in net.param_entries_mut() {
        if name.ends_with("gate.weight") {
            fill(t, &mut r, -0.8, 0.8);
        } else if name.ends_with("gate.bias") {
            fill(t, &mut r, -0.2, 0.6);
        }
    }
    let images = rand_images(5, 1, 8, 8, 34);
    let mode = GateMode::Discrete {
        k: 2.0,
        threshold: 0.5,
    };
    let mut tape_d = Tape::new();
    let out_d =
        network_forward(&mut tape_d, &mut net, &cfg, &images, &mode, BnMode::Eval).unwrap();

    // The oracle only bites if the decisions are mixed.
    let mut all: Vec<u8> = Vec::new();
    let mut forced: Vec<Vec<f64>> = Vec::new();
    for rec in out_d.trace.local.iter().chain(&out_d.trace.global) {
        let d = rec.decisions.as_ref().expect("discrete trace");
        all.extend_from_slice(d);
        forced.push(d.iter().map(|&b| f64::from(b)).collect());
    }
    assert!(all.iter().any(|&d| d == 0) && all.iter().any(|&d| d == 1));

    let mut tape_f = Tape::new();
    let out_f = network_forward(
        &mut tape_f,
        &mut net,
        &cfg,
        &images,
        &GateMode::Forced { gates: forced },
        BnMode::Eval,
    )
    .unwrap();
    assert_eq!(
        tape_d.value(out_d.local_logits),
        tape_f.value(out_f.local_logits)
    );
    assert_eq!(
        tape_d.value(out_d.global_logits),
        tape_f.value(out_f.global_logits)
    );
}

#[test]
fn all_eight_gate_patterns_run_on_a_three_layer_block() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 3,
        growth_rate: 2,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 2,
        num_global_classes: 2,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 55).unwrap();
    let images = rand_images(2, 1, 8, 8, 56);
    for pattern in 0u32..8 {
        let per_branch: Vec<Vec<f64>> = (0..3)
            .map(|l| vec![f64::from((pattern >> l) & 1); 2])
            .collect();
        let mut gates = per_branch.clone();
        gates.extend(per_branch);
        let mut tape = Tape::new();
        let out = network_forward(
            &mut tape,
            &mut net,
            &cfg,
            &images,
            &GateMode::Forced { gates },
            BnMode::Eval,
        )
        .unwrap_or_else(|e| panic!("pattern {pattern:03b} failed: {e}"));
        assert_eq!(tape.shape(out.local_logits), &[2, 2]);
        assert_eq!(tape.shape(out.global_logits), &[2, 2]);
    }
}

#[test]
fn guide_link_carries_gradient_from_local_loss_into_global_branch() {
    let mut cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 1,
        growth_rate: 2,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: true,
        num_local_classes: 3,
        num_global_classes: 3,
        input_channels: 1,
        stem_channels: 4,
    };
    let labels = vec![0usize, 1, 2];
    let images = rand_images(3, 1, 8, 8, 62);
    let probe = "global.block0.layer0.conv.weight";

    let grads_for = |cfg: &NetworkConfig, local_loss: bool| -> (Vec<f64>, Vec<f64>) {
        let mut net = build_network::<f64>(cfg, 61).unwrap();
        randomize_aux(&mut net, 63);
        let gi = param_index(&net, probe);
        let li = param_index(&net, "local.block0.layer0.conv.weight");
        let mut tape = Tape::new();
        let out =
            network_forward(&mut tape, &mut net, cfg, &images, &GateMode::Open, BnMode::Train)
                .unwrap();
        let logits = if local_loss {
            out.local_logits
        } else {
            out.global_logits
        };
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.grad_or_zeros(out.param_vars[gi]),
            tape.grad_or_zeros(out.param_vars[li]),
        )
    };

    // Guide on: the local loss reaches the global branch through the
    // upsampled feature link, and only through it.
    let (global_grad, local_grad) = grads_for(&cfg, true);
    assert!(global_grad.iter().any(|v| *v != 0.0));
    assert!(local_grad.iter().any(|v| *v != 0.0));

    // The reverse direction stays closed: the global head never sees the
    // local branch.
    let (_, local_from_global) = grads_for(&cfg, false);
    assert!(local_from_global.iter().all(|v| *v == 0.0));

    // Guide off: the local loss cannot reach the global branch at all.
    cfg.guide_enabled = false;
    let (global_grad_off, _) = grads_for(&cfg, true);
    assert!(global_grad_off.iter().all(|v| *v == 0.0));
}

#[test]
fn closed_gate_blocks_conv_gradient_but_not_gate_gradient() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 1,
        growth_rate: 2,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 3,
        num_global_classes: 3,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 71).unwrap();
    // Gate pre-activation 0 -> continuous value exactly 0.5; threshold
    // 0.7 closes every gate.
    for (name, t) in net.param_entries_mut() {
        if name.ends_with("gate.bias") {
            t.data_mut()[0] = 0.0;
        }
    }
    let images = rand_images(3, 1, 8, 8, 72);
    let mut tape = Tape::new();
    let out = network_forward(
        &mut tape,
        &mut net,
        &cfg,
        &images,
        &GateMode::Discrete {
            k: 1.0,
            threshold: 0.7,
        },
        BnMode::Train,
    )
    .unwrap();
    assert_eq!(skip_ratio(&out.trace, Branch::Local).unwrap(), 1.0);
    assert_eq!(skip_ratio(&out.trace, Branch::Global).unwrap(), 1.0);

    let labels = vec![0usize, 1, 2];
    let ll = tape.softmax_cross_entropy(out.local_logits, &labels).unwrap();
    let lg = tape.softmax_cross_entropy(out.global_logits, &labels).unwrap();
    let loss = tape.add(ll, lg).unwrap();
    tape.backward(loss).unwrap();

    for branch in ["local", "global"] {
        let conv = param_index(&net, &format!("{branch}.block0.layer0.conv.weight"));
        let gamma = param_index(&net, &format!("{branch}.block0.layer0.bn.gamma"));
        let gate_w = param_index(&net, &format!("{branch}.block0.layer0.gate.weight"));
        let gate_b = param_index(&net, &format!("{branch}.block0.layer0.gate.bias"));
        let stem = param_index(&net, "stem.conv.weight");

        // A skipped layer contributes nothing, so nothing flows back into
        // its convolution or its normalization.
        assert!(tape.grad_or_zeros(out.param_vars[conv]).iter().all(|v| *v == 0.0));
        assert!(tape.grad_or_zeros(out.param_vars[gamma]).iter().all(|v| *v == 0.0));
        // The straight-through rule keeps the gate itself trainable.
        assert!(tape.grad_or_zeros(out.param_vars[gate_w]).iter().any(|v| *v != 0.0));
        assert!(tape.grad_or_zeros(out.param_vars[gate_b]).iter().any(|v| *v != 0.0));
        assert!(tape.grad_or_zeros(out.param_vars[stem]).iter().any(|v| *v != 0.0));
    }
}

#[test]
fn concat_block_channel_arithmetic() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 3,
        growth_rate: 6,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 2,
        num_global_classes: 2,
        input_channels: 1,
        stem_channels: 12,
    };
    let mut net = build_network::<f64>(&cfg, 81).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(&rand_images(2, 12, 8, 8, 82));
    let mut records = Vec::new();
    let y = skip_dense_block_forward(
        &mut tape,
        x,
        &mut net.local.blocks[0],
        MergeType::Concat,
        &GateMode::Open,
        BnMode::Eval,
        0,
        &mut records,
    )
    .unwrap();
    assert_eq!(tape.shape(y), &[2, 12 + 3 * 6, 8, 8]);
    assert!(records.is_empty());

    // Wrong input width must fail, not mangle channels.
    let bad = tape.input(&rand_images(2, 13, 8, 8, 83));
    assert!(skip_dense_block_forward(
        &mut tape,
        bad,
        &mut net.local.blocks[0],
        MergeType::Concat,
        &GateMode::Open,
        BnMode::Eval,
        0,
        &mut Vec::new(),
    )
    .is_err());
}

#[test]
fn closed_gates_with_add_merge_are_identity() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 2,
        growth_rate: 4,
        merge: MergeType::Add,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 2,
        num_global_classes: 2,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 91).unwrap();
    let mut tape = Tape::new();
    let images = rand_images(3, 4, 8, 8, 92);
    let x = tape.input(&images);
    let y = skip_dense_block_forward(
        &mut tape,
        x,
        &mut net.local.blocks[0],
        MergeType::Add,
        &GateMode::Forced {
            gates: vec![vec![0.0; 3]; 2],
        },
        BnMode::Eval,
        0,
        &mut Vec::new(),
    )
    .unwrap();
    assert_eq!(tape.value(y), images.data());
}

#[test]
fn closed_gate_zeroes_new_concat_channels() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 1,
        growth_rate: 3,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 2,
        num_global_classes: 2,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 93).unwrap();
    let layer = &mut net.local.blocks[0].layers[0];
    let mut tape = Tape::new();
    let images = rand_images(2, 4, 5, 5, 94);
    let x = tape.input(&images);
    let zero_gate = tape.input(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = dense_layer_forward(
        &mut tape,
        x,
        &mut layer.dense,
        Some(zero_gate),
        MergeType::Concat,
        BnMode::Eval,
    )
    .unwrap();
    assert_eq!(tape.shape(y), &[2, 7, 5, 5]);
    let out = tape.value(y);
    for n in 0..2 {
        let base = n * 7 * 25;
        assert_eq!(&out[base..base + 4 * 25], &images.data()[n * 100..(n + 1) * 100]);
        assert!(out[base + 4 * 25..base + 7 * 25].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn unit_gate_matches_ungated_layer_bitwise() {
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 1,
        growth_rate: 3,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 2,
        num_global_classes: 2,
        input_channels: 1,
        stem_channels: 4,
    };
    let mut net = build_network::<f64>(&cfg, 95).unwrap();
    let layer = &mut net.local.blocks[0].layers[0];
    let mut tape = Tape::new();
    let x = tape.input(&rand_images(2, 4, 5, 5, 96));
    let one_gate = tape.input(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let gated = dense_layer_forward(
        &mut tape,
        x,
        &mut layer.dense,
        Some(one_gate),
        MergeType::Concat,
        BnMode::Eval,
    )
    .unwrap();
    let plain =
        dense_layer_forward(&mut tape, x, &mut layer.dense, None, MergeType::Concat, BnMode::Eval)
            .unwrap();
    assert_eq!(tape.value(gated), tape.value(plain));
}

#[test]
fn gating_matches_hand_values() {
    let mut tape = Tape::new();
    let x = tape.input(&rand_images(3, 4, 2, 2, 97));
    let open = GateParams::<f64> {
        weight: Tensor::zeros(&[4, 1]),
        bias: Tensor::full(&[1], 1.0),
    };
    let out = gating_forward(&mut tape, x, &open, 1.0, None).unwrap();
    assert_eq!(out.continuous, vec![1.0; 3]);

    let mid = GateParams::<f64> {
        weight: Tensor::zeros(&[4, 1]),
        bias: Tensor::zeros(&[1]),
    };
    let out = gating_forward(&mut tape, x, &mid, 1.0, None).unwrap();
    assert_eq!(out.continuous, vec![0.5; 3]);
    // At the threshold itself the layer is kept.
    let out = gating_forward(&mut tape, x, &mid, 1.0, Some(0.5)).unwrap();
    assert_eq!(out.decisions, Some(vec![1, 1, 1]));

    // Just below the threshold the layer is skipped.
    let low = GateParams::<f64> {
        weight: Tensor::zeros(&[4, 1]),
        bias: Tensor::full(&[1], -0.01),
    };
    let out = gating_forward(&mut tape, x, &low, 1.0, Some(0.5)).unwrap();
    assert!(out.continuous.iter().all(|v| *v < 0.5));
    assert_eq!(out.decisions, Some(vec![0, 0, 0]));

    // Channel mismatch is an error, not a truncation.
    let wrong = GateParams::<f64> {
        weight: Tensor::zeros(&[5, 1]),
        bias: Tensor::zeros(&[1]),
    };
    assert!(gating_forward(&mut tape, x, &wrong, 1.0, None).is_err());
}

fn identity_bn(c: usize) -> BnParams<f64> {
    BnParams {
        gamma: Tensor::full(&[c], 1.0),
        beta: Tensor::zeros(&[c]),
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
    }
}

#[test]
fn transition_halves_spatial_and_compresses_channels() {
    let mut r = rng(98);
    let mut w = Tensor::zeros(&[30, 30, 1, 1]);
    fill(&mut w, &mut r, -0.5, 0.5);
    let mut t30 = TransitionParams {
        bn: identity_bn(30),
        conv: ConvParams {
            weight: w,
            bias: Tensor::zeros(&[30]),
        },
    };
    let mut tape = Tape::new();
    let x = tape.input(&rand_images(2, 30, 6, 6, 99));
    let y = transition_forward(&mut tape, x, &mut t30, BnMode::Eval).unwrap();
    assert_eq!(tape.shape(y), &[2, 30, 3, 3]);

    let mut w15 = Tensor::zeros(&[15, 30, 1, 1]);
    fill(&mut w15, &mut r, -0.5, 0.5);
    let mut t15 = TransitionParams {
        bn: identity_bn(30),
        conv: ConvParams {
            weight: w15,
            bias: Tensor::zeros(&[15]),
        },
    };
    let y = transition_forward(&mut tape, x, &mut t15, BnMode::Eval).unwrap();
    assert_eq!(tape.shape(y), &[2, 15, 3, 3]);

    // Too small to pool.
    let tiny = tape.input(&rand_images(2, 30, 1, 4, 100));
    assert!(transition_forward(&mut tape, tiny, &mut t15, BnMode::Eval).is_err());
}

#[test]
fn transition_keeps_constants_constant() {
    // Identity 1x1 kernel; constant positive input stays constant through
    // bn (identity stats), relu, conv, and pooling.
    let c = 4;
    let mut w = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        w.data_mut()[i * c + i] = 1.0;
    }
    let mut t = TransitionParams {
        bn: identity_bn(c),
        conv: ConvParams {
            weight: w,
            bias: Tensor::zeros(&[c]),
        },
    };
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::full(&[1, c, 4, 4], 3.0));
    let y = transition_forward(&mut tape, x, &mut t, BnMode::Eval).unwrap();
    let vals = tape.value(y);
    assert!(vals.iter().all(|v| (*v - vals[0]).abs() == 0.0));
    assert!((vals[0] - 3.0).abs() < 1e-4);
}

#[test]
fn identical_branches_give_identical_logits() {
    let cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 1,
        growth_rate: 3,
        merge: MergeType::Concat,
        compression: 1.0,
        guide_enabled: false,
        num_local_classes: 4,
        num_global_classes: 4,
        input_channels: 1,
        stem_channels: 6,
    };
    let mut net = build_network::<f64>(&cfg, 101).unwrap();
    randomize_aux(&mut net, 102);
    net.global = net.local.clone();
    let images = rand_images(4, 1, 8, 8, 103);
    let mut tape = Tape::new();
    let out =
        network_forward(&mut tape, &mut net, &cfg, &images, &GateMode::Open, BnMode::Eval).unwrap();
    assert_eq!(tape.value(out.local_logits), tape.value(out.global_logits));
}

#[test]
fn full_preset_runs_and_counts_twelve_layers_per_branch() {
    let cfg = NetworkConfig::full();
    let mut net = build_network::<f64>(&cfg, 104).unwrap();
    let images = rand_images(2, 1, 56, 56, 105);
    let mut tape = Tape::new();
    let out = network_forward(
        &mut tape,
        &mut net,
        &cfg,
        &images,
        &GateMode::Continuous { k: 1.0 },
        BnMode::Train,
    )
    .unwrap();
    assert_eq!(out.trace.local.len(), 12);
    assert_eq!(out.trace.global.len(), 12);
    assert_eq!(tape.shape(out.local_logits), &[2, 10]);
    assert_eq!(tape.shape(out.global_logits), &[2, 10]);
    // Freshly built gates saturate open on any input.
    for rec in out.trace.local.iter().chain(&out.trace.global) {
        assert!(rec.continuous.iter().all(|v| *v == 1.0));
    }
}

#[test]
fn guide_widens_the_last_local_transition_parameters() {
    let cfg = guide_cfg();
    let net = build_network::<f64>(&cfg, 106).unwrap();
    // Concat plan: stem 8 -> block 16; global transition conv 16 -> 12;
    // local sees 16 + guide 24 (block_out of the widened last block is
    // local-specific); recompute: global block1 out = 12 + 8 = 20...
    // The plan itself is asserted in config tests; here we check the
    // built tensors agree with it.
    let plan = dualskip_core::config::ChannelPlan::new(&cfg).unwrap();
    assert_eq!(
        net.local.transitions[0].conv.weight.shape(),
        &[plan.local.trans_out[0], plan.local.trans_in[0], 1, 1]
    );
    assert_eq!(
        net.global.transitions[0].conv.weight.shape(),
        &[plan.global.trans_out[0], plan.global.trans_in[0], 1, 1]
    );
    assert_eq!(plan.local.trans_in[0], plan.global.trans_in[0] + plan.guide_channels);
}

#[test]
fn forward_is_deterministic_given_params_and_input() {
    let cfg = NetworkConfig::desk();
    let mut net = build_network::<f32>(&cfg, 107).unwrap();
    let mut r = rng(108);
    let data: Vec<f32> = (0..2 * 56 * 56).map(|_| r.gen_range(-1.0..1.0) as f32).collect();
    let images = Tensor::new(vec![2, 1, 56, 56], data).unwrap();
    let run = |net: &mut NetworkParams<f32>| -> (Vec<f32>, Vec<f32>) {
        let mut tape = Tape::new();
        let out = network_forward(
            &mut tape,
            net,
            &cfg,
            &images,
            &GateMode::Discrete {
                k: 1.0,
                threshold: 0.5,
            },
            BnMode::Eval,
        )
        .unwrap();
        (
            tape.value(out.local_logits).to_vec(),
            tape.value(out.global_logits).to_vec(),
        )
    };
    let a = run(&mut net);
    let b = run(&mut net);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any structurally valid small config must build and run; invalid
    /// channel arithmetic must fail at build, never panic mid-forward.
    #[test]
    fn arbitrary_small_configs_build_and_run(
        blocks in 1usize..=3,
        layers in 1usize..=2,
        growth in 1usize..=3,
        add_merge in any::<bool>(),
        guide in any::<bool>(),
        comp in prop::sample::select(vec![0.5f64, 0.75, 1.0]),
        seed in 0u64..1000,
    ) {
        let cfg = NetworkConfig {
            num_blocks: blocks,
            layers_per_block: layers,
            growth_rate: growth,
            merge: if add_merge { MergeType::Add } else { MergeType::Concat },
            compression: comp,
            guide_enabled: guide,
            num_local_classes: 3,
            num_global_classes: 2,
            input_channels: 1,
            stem_channels: 2 * growth,
        };
        match build_network::<f64>(&cfg, seed) {
            Err(_) => {} // rejected cleanly at build time
            Ok(mut net) => {
                let images = rand_images(2, 1, 8, 8, seed.wrapping_add(1));
                let mut tape = Tape::new();
                let out = network_forward(
                    &mut tape,
                    &mut net,
                    &cfg,
                    &images,
                    &GateMode::Continuous { k: 1.0 },
                    BnMode::Train,
                )
                .unwrap();
                prop_assert_eq!(tape.shape(out.local_logits), &[2usize, 3][..]);
                prop_assert_eq!(tape.shape(out.global_logits), &[2usize, 2][..]);
                prop_assert_eq!(out.trace.local.len(), blocks * layers);
                prop_assert_eq!(out.trace.global.len(), blocks * layers);
                for rec in out.trace.local.iter().chain(&out.trace.global) {
                    for v in &rec.continuous {
                        prop_assert!((0.0..=1.0).contains(v));
                    }
                }
            }
        }
    }
}
