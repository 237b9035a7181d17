//! Network and training configuration plus the channel bookkeeping
//! derived from it.
//!
//! Everything that can be validated without touching tensor data is
//! validated here, so a bad configuration fails at build time instead of
//! mid-forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a dense layer's output joins its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeType {
    /// Channel concatenation; each layer adds `growth_rate` channels.
    Concat,
    /// Elementwise addition; channel count stays fixed.
    Add,
}

/// Static description of the two-branch network.
///
/// Both branches share the same block/layer/growth structure; they differ
/// only in their heads and, when the guide link is enabled, in the input
/// width of the local branch's last transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub merge: MergeType,
    /// Transition compression factor; channels map to floor(compression * c).
    pub compression: f64,
    /// Feed the global branch's final features into the local branch's
    /// last transition (upsampled and channel-concatenated).
    pub guide_enabled: bool,
    pub num_local_classes: usize,
    pub num_global_classes: usize,
    pub input_channels: usize,
    /// Output channels of the shared stem conv. Conventionally twice the
    /// growth rate; any positive value is accepted.
    pub stem_channels: usize,
}

impl NetworkConfig {
    /// Full-size configuration: 4 blocks of 3 dense layers, growth 6,
    /// sized for 112x112 composite-digit images.
    pub fn full() -> Self {
        NetworkConfig {
            num_blocks: 4,
            layers_per_block: 3,
            growth_rate: 6,
            merge: MergeType::Concat,
            compression: 1.0,
            guide_enabled: false,
            num_local_classes: 10,
            num_global_classes: 10,
            input_channels: 1,
            stem_channels: 12,
        }
    }

    /// Small configuration for single-machine CPU training on 56x56
    /// composite-digit images: 3 blocks of 2 dense layers, growth 8.
    pub fn desk() -> Self {
        NetworkConfig {
            num_blocks: 3,
            layers_per_block: 2,
            growth_rate: 8,
            merge: MergeType::Concat,
            compression: 1.0,
            guide_enabled: false,
            num_local_classes: 10,
            num_global_classes: 10,
            input_channels: 1,
            stem_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::config("num_blocks must be at least 1"));
        }
        if self.layers_per_block == 0 {
            return Err(Error::config("layers_per_block must be at least 1"));
        }
        if self.growth_rate == 0 {
            return Err(Error::config("growth_rate must be at least 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be at least 1"));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("stem_channels must be at least 1"));
        }
        if self.num_local_classes == 0 || self.num_global_classes == 0 {
            return Err(Error::config("class counts must be at least 1"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!(
                "compression must lie in (0, 1], got {}",
                self.compression
            )));
        }
        if self.guide_enabled && self.num_blocks < 2 {
            return Err(Error::config(
                "guide link needs a transition to feed into; requires num_blocks >= 2",
            ));
        }
        Ok(())
    }

    /// Stride the whole network applies: one factor of 2 per transition.
    pub fn total_downsample(&self) -> usize {
        1 << (self.num_blocks - 1)
    }

    /// Dense layers per branch.
    pub fn layers_per_branch(&self) -> usize {
        self.num_blocks * self.layers_per_block
    }
}

/// Per-branch channel counts at every block and transition boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchPlan {
    /// Input channels of each block.
    pub block_in: Vec<usize>,
    /// Output channels of each block.
    pub block_out: Vec<usize>,
    /// Input channels of each transition (after any guide concat).
    pub trans_in: Vec<usize>,
    /// Output channels of each transition.
    pub trans_out: Vec<usize>,
}

/// Channel bookkeeping for both branches, resolved from a config.
///
/// Computing the plan is also the structural validity check: impossible
/// channel arithmetic (compression collapsing a transition to zero
/// channels) surfaces here, before any tensor is allocated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    pub local: BranchPlan,
    pub global: BranchPlan,
    /// Channels the guide link appends to the local branch's last
    /// transition input; zero when the guide is disabled.
    pub guide_channels: usize,
}

impl ChannelPlan {
    pub fn new(cfg: &NetworkConfig) -> Result<ChannelPlan> {
        cfg.validate()?;
        let global = Self::branch_plan(cfg, 0)?;
        let guide_channels = if cfg.guide_enabled {
            global.block_out[cfg.num_blocks - 1]
        } else {
            0
        };
        let local = Self::branch_plan(cfg, guide_channels)?;
        Ok(ChannelPlan {
            local,
            global,
            guide_channels,
        })
    }

    fn branch_plan(cfg: &NetworkConfig, guide_channels: usize) -> Result<BranchPlan> {
        let blocks = cfg.num_blocks;
        let mut plan = BranchPlan {
            block_in: Vec::with_capacity(blocks),
            block_out: Vec::with_capacity(blocks),
            trans_in: Vec::with_capacity(blocks.saturating_sub(1)),
            trans_out: Vec::with_capacity(blocks.saturating_sub(1)),
        };
        let mut c = cfg.stem_channels;
        for b in 0..blocks {
            plan.block_in.push(c);
            if cfg.merge == MergeType::Concat {
                c += cfg.layers_per_block * cfg.growth_rate;
            }
            plan.block_out.push(c);
            if b + 1 < blocks {
                let mut t_in = c;
                if b + 2 == blocks {
                    // Last transition; the guide link (if any) lands here.
                    t_in += guide_channels;
                }
                let t_out = (cfg.compression * t_in as f64).floor() as usize;
                if t_out == 0 {
                    return Err(Error::config(format!(
                        "compression {} collapses transition {} ({} channels) to zero",
                        cfg.compression, b, t_in
                    )));
                }
                plan.trans_in.push(t_in);
                plan.trans_out.push(t_out);
                c = t_out;
            }
        }
        Ok(plan)
    }

    pub fn branch(&self, branch: Branch) -> &BranchPlan {
        match branch {
            Branch::Local => &self.local,
            Branch::Global => &self.global,
        }
    }
}

/// Which of the two branches a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Fine branch; classifies the small constituent digit.
    Local,
    /// Coarse branch; classifies the large composite digit.
    Global,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Local => "local",
            Branch::Global => "global",
        }
    }
}

/// Hyperparameters for the two-phase training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs with every gate forced open.
    pub epochs_phase1: usize,
    /// Epochs with continuous gating and slope annealing.
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Initial hard-sigmoid slope for phase 2.
    pub k0: f64,
    /// Per-epoch slope increment during phase 2.
    pub dk: f64,
    /// Weight of the gate-diversity term.
    pub aux_weight: f64,
    /// Weights of the (local, global) classification losses.
    pub loss_weights: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 6,
            epochs_phase2: 4,
            batch_size: 32,
            lr_max: 0.1,
            lr_min: 1e-3,
            momentum: 0.9,
            clip_norm: 1.0,
            k0: 1.0,
            dk: 0.25,
            aux_weight: 0.01,
            loss_weights: (1.0, 1.0),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_phase1 + self.epochs_phase2 == 0 {
            return Err(Error::config("at least one epoch required across both phases"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (batch norm needs more than one element)",
            ));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::config("lr_max must be positive and finite"));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("lr_min must lie in [0, lr_max]"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive and finite"));
        }
        if !(self.k0.is_finite() && self.k0 >= 1.0) {
            return Err(Error::config("k0 must be at least 1"));
        }
        if !(self.dk.is_finite() && self.dk >= 0.0) {
            return Err(Error::config("dk must be nonnegative and finite"));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::config("aux_weight must be nonnegative and finite"));
        }
        let (wl, wg) = self.loss_weights;
        if !(wl.is_finite() && wg.is_finite() && wl >= 0.0 && wg >= 0.0 && wl + wg > 0.0) {
            return Err(Error::config(
                "loss_weights must be nonnegative, finite, and not both zero",
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }
}
