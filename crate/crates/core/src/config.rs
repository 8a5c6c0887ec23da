//! Architecture and training configuration, presets and ablation variants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;

/// What a convolutional branch does after its last stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPool {
    None,
    /// Global average pool followed by a linear projection to the model width.
    GlobalAvg,
}

/// One convolutional patch-embedding branch.
///
/// Stage 0 is an ordinary convolution from RGB (the stem); every later stage
/// is an inverted-residual block with squeeze-excitation. Kernel size and
/// padding follow from the stride, see [`kernel_for_stride`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub target_grid: (usize, usize),
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub expansion: usize,
    pub se_reduction: usize,
    pub final_pool: FinalPool,
}

/// `(kernel, padding)` used for a spatial stage of the given stride: 3×3 with
/// padding 1 for strides 1 and 2, otherwise a `s×s` kernel without padding.
pub fn kernel_for_stride(stride: usize) -> (usize, usize) {
    if stride <= 2 {
        (3, 1)
    } else {
        (stride, 0)
    }
}

/// Output extent of a convolution, `None` when not positive.
pub fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = extent + 2 * pad;
    (span >= kernel && stride > 0).then(|| (span - kernel) / stride + 1)
}

impl BranchSpec {
    /// Spatial extent after each stage, starting from `input` pixels.
    pub fn extents(&self, input: usize) -> Result<Vec<usize>> {
        let mut h = input;
        let mut out = Vec::with_capacity(self.stage_strides.len());
        for (i, &s) in self.stage_strides.iter().enumerate() {
            let (k, p) = kernel_for_stride(s);
            h = conv_out(h, k, s, p).ok_or_else(|| {
                Error::config(format!("stage {i} (stride {s}) has nonpositive output extent"))
            })?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn tokens(&self) -> usize {
        self.target_grid.0 * self.target_grid.1
    }

    pub fn validate(&self, input: usize, channel: usize) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config(format!(
                "branch has {} stage channels but {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_strides.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::config("branch strides and channels must be positive"));
        }
        if self.expansion == 0 || self.se_reduction == 0 {
            return Err(Error::config("expansion and se_reduction must be positive"));
        }
        for &c in &self.stage_channels[..self.stage_channels.len() - 1] {
            if c * self.expansion / self.se_reduction == 0 {
                return Err(Error::config("squeeze-excitation bottleneck would be empty"));
            }
        }
        let (gh, gw) = self.target_grid;
        if gh != gw {
            return Err(Error::config("only square token grids are supported"));
        }
        let last = *self.extents(input)?.last().expect("nonempty");
        match self.final_pool {
            FinalPool::None => {
                let prod: usize = self.stage_strides.iter().product();
                if last != gh || prod * gh != input {
                    return Err(Error::config(format!(
                        "branch reaches a {last}x{last} grid from {input} (stride product {prod}), expected {gh}x{gw}"
                    )));
                }
                if *self.stage_channels.last().expect("nonempty") != channel {
                    return Err(Error::config(format!(
                        "unpooled branch must end at the model channel {channel}"
                    )));
                }
            }
            FinalPool::GlobalAvg => {
                if self.target_grid != (1, 1) {
                    return Err(Error::config("a pooled branch yields a 1x1 grid"));
                }
            }
        }
        Ok(())
    }
}

/// Patch-embedding stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedConfig {
    /// Non-overlapping `patch×patch` blocks, flattened and projected.
    Naive { patch: usize },
    /// One convolutional trunk ending at a token grid.
    Conv { branch: BranchSpec },
    /// Parallel branches with different receptive fields, tokens concatenated
    /// in branch order.
    Irregular { branches: Vec<BranchSpec> },
}

impl EmbedConfig {
    pub fn grids(&self, input: usize) -> Vec<(usize, usize)> {
        match self {
            EmbedConfig::Naive { patch } => {
                let g = if *patch == 0 { 0 } else { input / patch };
                vec![(g, g)]
            }
            EmbedConfig::Conv { branch } => vec![branch.target_grid],
            EmbedConfig::Irregular { branches } => branches.iter().map(|b| b.target_grid).collect(),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            EmbedConfig::Naive { .. } => "naive",
            EmbedConfig::Conv { .. } => "conv",
            EmbedConfig::Irregular { .. } => "ipe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Apm,
    AvgPool,
    ClassToken,
}

impl MergeMode {
    pub const ALL: [MergeMode; 3] = [MergeMode::ClassToken, MergeMode::AvgPool, MergeMode::Apm];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Apm => "apm",
            MergeMode::AvgPool => "avg_pool",
            MergeMode::ClassToken => "class_token",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset_name: String,
    pub input_size: usize,
    pub channel: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub merge: MergeMode,
    pub positional: bool,
    pub droppath_max: f64,
    pub num_classes: usize,
    pub embed: EmbedConfig,
}

pub const PRESET_NAMES: [&str; 5] = ["880M", "610M", "310M", "desk-64", "desk-32"];

/// `(name, channel, depth, heads, mlp_ratio, stem base width)` for the full
/// presets. The first four columns are the published architecture table.
const FULL_PRESETS: [(&str, usize, usize, usize, usize, usize); 3] = [
    ("880M", 300, 8, 12, 4, 16),
    ("610M", 264, 6, 12, 4, 16),
    ("310M", 210, 5, 10, 4, 12),
];

/// Published MAC budget for a full preset.
pub fn preset_budget(name: &str) -> Option<u64> {
    match name {
        "880M" => Some(880_000_000),
        "610M" => Some(610_000_000),
        "310M" => Some(310_000_000),
        _ => None,
    }
}

fn branch(grid: usize, channels: Vec<usize>, strides: Vec<usize>, pool: bool) -> BranchSpec {
    BranchSpec {
        target_grid: (grid, grid),
        stage_channels: channels,
        stage_strides: strides,
        expansion: 4,
        se_reduction: 4,
        final_pool: if pool {
            FinalPool::GlobalAvg
        } else {
            FinalPool::None
        },
    }
}

/// The three-branch 7×7 + 4×4 + 1×1 stem for 224-pixel input.
pub fn full_ipe(channel: usize, width: usize) -> EmbedConfig {
    let w = width;
    EmbedConfig::Irregular {
        branches: vec![
            branch(7, vec![w, 2 * w, 4 * w, 8 * w, channel], vec![2, 2, 2, 2, 2], false),
            branch(4, vec![w, 2 * w, 4 * w, channel], vec![2, 2, 2, 7], false),
            branch(1, vec![w, 2 * w, 4 * w, 8 * w], vec![2, 2, 2, 2], true),
        ],
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        if let Some(&(n, c, d, h, r, w)) = FULL_PRESETS.iter().find(|p| p.0 == name) {
            return Ok(Self {
                preset_name: n.to_string(),
                input_size: 224,
                channel: c,
                depth: d,
                heads: h,
                mlp_ratio: r,
                merge: MergeMode::Apm,
                positional: true,
                droppath_max: 0.1,
                num_classes: 1000,
                embed: full_ipe(c, w),
            });
        }
        match name {
            "desk-64" => Ok(Self {
                preset_name: name.to_string(),
                input_size: 64,
                channel: 64,
                depth: 2,
                heads: 4,
                mlp_ratio: 4,
                merge: MergeMode::Apm,
                positional: true,
                droppath_max: 0.1,
                num_classes: 10,
                embed: EmbedConfig::Irregular {
                    branches: vec![
                        branch(4, vec![8, 16, 32, 64], vec![2, 2, 2, 2], false),
                        branch(2, vec![8, 16, 32, 64], vec![2, 2, 2, 4], false),
                        branch(1, vec![8, 16, 32, 64], vec![2, 2, 2, 2], true),
                    ],
                },
            }),
            "desk-32" => Ok(Self {
                preset_name: name.to_string(),
                input_size: 32,
                channel: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 4,
                merge: MergeMode::Apm,
                positional: true,
                droppath_max: 0.1,
                num_classes: 10,
                embed: EmbedConfig::Irregular {
                    branches: vec![
                        branch(2, vec![8, 16, 32, 32], vec![2, 2, 2, 2], false),
                        branch(1, vec![8, 16, 32], vec![2, 2, 2], true),
                    ],
                },
            }),
            _ => Err(Error::config(format!(
                "unknown preset {name}; known presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// Tokens emitted by the patch embedding.
    pub fn num_patches(&self) -> usize {
        self.embed
            .grids(self.input_size)
            .iter()
            .map(|(h, w)| h * w)
            .sum()
    }

    /// Tokens seen by the transformer blocks (patches plus class token).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.merge == MergeMode::ClassToken)
    }

    pub fn head_dim(&self) -> usize {
        self.channel / self.heads.max(1)
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.channel
    }

    /// DropPath rate of block `i`, ramped linearly from 0 to `droppath_max`.
    pub fn droppath_rate(&self, block: usize) -> f64 {
        if self.depth <= 1 {
            0.0
        } else {
            self.droppath_max * block as f64 / (self.depth - 1) as f64
        }
    }

    /// Token layout such as `49+16+1`.
    pub fn token_layout(&self) -> String {
        let parts: Vec<String> = self
            .embed
            .grids(self.input_size)
            .iter()
            .map(|(h, w)| format!("{}", h * w))
            .collect();
        parts.join("+")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.channel == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            problems.push("channel, depth, heads and mlp_ratio must be positive".into());
        } else if !self.channel.is_multiple_of(self.heads) {
            problems.push(format!(
                "channel {} is not divisible by heads {}",
                self.channel, self.heads
            ));
        }
        if self.merge == MergeMode::Apm && self.channel < 4 {
            problems.push("adaptive merging needs channel >= 4".into());
        }
        if !(0.0..1.0).contains(&self.droppath_max) {
            problems.push(format!("droppath_max {} outside [0, 1)", self.droppath_max));
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".into());
        }
        if self.input_size == 0 {
            problems.push("input_size must be positive".into());
        }
        if let Some(&(_, c, d, h, r, _)) = FULL_PRESETS.iter().find(|p| p.0 == self.preset_name) {
            if (self.channel, self.depth, self.heads, self.mlp_ratio) != (c, d, h, r) {
                problems.push(format!(
                    "preset {} requires channel={c} depth={d} heads={h} mlp_ratio={r}",
                    self.preset_name
                ));
            }
        }
        match &self.embed {
            EmbedConfig::Naive { patch } => {
                if *patch == 0 || !self.input_size.is_multiple_of(*patch) {
                    problems.push(format!(
                        "input {} is not divisible by patch {patch}",
                        self.input_size
                    ));
                }
            }
            EmbedConfig::Conv { branch } => {
                if branch.final_pool != FinalPool::None {
                    problems.push("convolutional embedding must not pool".into());
                }
                if let Err(e) = branch.validate(self.input_size, self.channel) {
                    problems.push(e.to_string());
                }
            }
            EmbedConfig::Irregular { branches } => {
                if branches.is_empty() {
                    problems.push("irregular embedding needs at least one branch".into());
                }
                for (k, b) in branches.iter().enumerate() {
                    if let Err(e) = b.validate(self.input_size, self.channel) {
                        problems.push(format!("branch {k}: {e}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn variant_name(&self, embed: &EmbedConfig, merge: MergeMode) -> String {
        format!("{}/{}+{}", self.preset_name, embed.short_name(), merge.as_str())
    }
}

/// Naive patch size and convolutional-trunk grid used for the baselines:
/// 16-pixel patches (a 14×14 grid) at 224 input, an 8×8 grid below that.
fn baseline_grid(input: usize) -> (usize, usize) {
    if input >= 224 {
        (16, input / 16)
    } else {
        (input / 8, 8)
    }
}

/// A single convolutional trunk reaching `grid` from `input` pixels: a
/// stride-2 stem, stride-2 stages while they fit, stride 1 afterwards.
fn conv_trunk(input: usize, grid: usize, channel: usize, width: usize) -> Result<BranchSpec> {
    if grid == 0 || !input.is_multiple_of(grid) || !(input / grid).is_power_of_two() || input / grid < 2 {
        return Err(Error::config(format!(
            "cannot reach a {grid}x{grid} grid from {input} with stride-2 stages"
        )));
    }
    let halvings = (input / grid).trailing_zeros() as usize;
    let stages = halvings.max(3);
    let strides: Vec<usize> = (0..stages).map(|i| if i < halvings { 2 } else { 1 }).collect();
    let mut channels: Vec<usize> = (0..stages - 1).map(|i| width << i).collect();
    channels.push(channel);
    Ok(branch(grid, channels, strides, false))
}

/// Tolerance on MACs when matching ablation variants to the base budget.
pub const ABLATION_MAC_TOLERANCE: f64 = 0.15;

/// The {naive, conv, irregular} × {class token, average pool, adaptive merge}
/// matrix around `base`.
///
/// The irregular embedding of `base` is kept as is; the naive and convolutional
/// baselines reuse its stem width. For every variant, width and depth are
/// re-searched (heads and MLP ratio fixed) so that its MAC count is as close
/// as possible to the base model's, within [`ABLATION_MAC_TOLERANCE`].
pub fn ablation_variants(base: &ModelConfig) -> Result<Vec<ModelConfig>> {
    base.validate()?;
    let target = flops::count(base)?.total_macs;
    let width = match &base.embed {
        EmbedConfig::Irregular { branches } => branches[0].stage_channels[0],
        EmbedConfig::Conv { branch } => branch.stage_channels[0],
        EmbedConfig::Naive { .. } => 16,
    };
    let ipe = match &base.embed {
        e @ EmbedConfig::Irregular { .. } => e.clone(),
        _ => return Err(Error::config("ablation base must use the irregular embedding")),
    };
    let (patch, grid) = baseline_grid(base.input_size);

    let mut out = Vec::with_capacity(9);
    for kind in 0..3 {
        for merge in MergeMode::ALL {
            let make = |channel: usize, depth: usize| -> Result<ModelConfig> {
                let embed = match kind {
                    0 => EmbedConfig::Naive { patch },
                    1 => EmbedConfig::Conv {
                        branch: conv_trunk(base.input_size, grid, channel, width)?,
                    },
                    _ => retarget_channel(&ipe, channel),
                };
                let mut cfg = base.clone();
                cfg.preset_name = base.variant_name(&embed, merge);
                cfg.channel = channel;
                cfg.depth = depth;
                cfg.merge = merge;
                cfg.embed = embed;
                Ok(cfg)
            };
            out.push(match_budget(base, target, make)?);
        }
    }
    Ok(out)
}

fn retarget_channel(embed: &EmbedConfig, channel: usize) -> EmbedConfig {
    match embed {
        EmbedConfig::Irregular { branches } => EmbedConfig::Irregular {
            branches: branches
                .iter()
                .map(|b| {
                    let mut b = b.clone();
                    if b.final_pool == FinalPool::None {
                        *b.stage_channels.last_mut().expect("nonempty") = channel;
                    }
                    b
                })
                .collect(),
        },
        other => other.clone(),
    }
}

fn match_budget(
    base: &ModelConfig,
    target: u64,
    make: impl Fn(usize, usize) -> Result<ModelConfig>,
) -> Result<ModelConfig> {
    // channel must divide into heads and, for merging, quarters
    let step = lcm(base.heads, 4);
    let mut best: Option<(f64, usize, ModelConfig)> = None;
    let max_channel = 3 * base.channel;
    for depth in 1..=2 * base.depth {
        let mut channel = step;
        while channel <= max_channel {
            let cfg = make(channel, depth)?;
            if cfg.validate().is_ok() {
                let macs = flops::count(&cfg)?.total_macs as f64;
                let rel = (macs - target as f64).abs() / target as f64;
                // prefer the smallest error, then the depth closest to base
                let key = (rel, depth.abs_diff(base.depth));
                let better = match &best {
                    None => true,
                    Some((r, d, _)) => key.0 < *r - 1e-12 || ((key.0 - *r).abs() <= 1e-12 && key.1 < *d),
                };
                if better {
                    best = Some((rel, key.1, cfg));
                }
            }
            channel += step;
        }
    }
    let (rel, _, cfg) = best.ok_or_else(|| Error::config("no ablation variant fits the budget"))?;
    if rel > ABLATION_MAC_TOLERANCE {
        return Err(Error::config(format!(
            "variant {} misses the MAC budget by {:.1}%",
            cfg.preset_name,
            100.0 * rel
        )));
    }
    Ok(cfg)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub seed: u64,
    /// Rescale `lr` by `batch·world / autoscale_denominator`.
    pub autoscale: bool,
    pub world: usize,
    pub autoscale_denominator: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 300,
            batch: 128,
            warmup_epochs: 5,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            seed: 0,
            autoscale: false,
            world: 1,
            autoscale_denominator: 512,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        if self.autoscale {
            self.lr * (self.batch * self.world) as f64 / self.autoscale_denominator as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr,
            self.weight_decay,
            self.eps,
            self.label_smoothing,
            self.mixup_alpha,
            self.cutmix_alpha,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("training rates must be finite and nonnegative"));
        }
        if self.label_smoothing >= 1.0 {
            return Err(Error::config("label_smoothing must be < 1"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.batch == 0 || self.world == 0 || self.autoscale_denominator == 0 {
            return Err(Error::config("batch, world and autoscale_denominator must be positive"));
        }
        Ok(())
    }
}
