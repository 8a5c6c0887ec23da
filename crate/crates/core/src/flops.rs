//! Static multiply-accumulate and parameter counts.
//!
//! One MAC is one multiply-add. Convolutions cost `Cout·Cin/g·kh·kw·H'·W'`,
//! linear maps `din·dout` per row, attention adds `2·N²·C` for scores and
//! mixing. Normalization, activations, softmax and elementwise gates are free.
//! Layer names mirror the parameter names of a built model so the parameter
//! column can be checked against a checkpoint.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::{kernel_for_stride, BranchSpec, EmbedConfig, FinalPool, MergeMode, ModelConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub preset: String,
    pub per_layer: Vec<LayerCount>,
    pub total_macs: u64,
    pub total_params: u64,
}

struct Acc(Vec<LayerCount>);

impl Acc {
    fn push(&mut self, name: String, macs: usize, params: usize) {
        self.0.push(LayerCount {
            name,
            macs: macs as u64,
            params: params as u64,
        });
    }

    /// Linear map over `rows` rows, with bias.
    fn linear(&mut self, name: String, rows: usize, din: usize, dout: usize) {
        self.push(name, rows * din * dout, din * dout + dout);
    }

    /// Convolution with bias producing an `out×out` map.
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, groups: usize, out: usize) {
        let per_pixel = cout * (cin / groups) * k * k;
        self.push(name, per_pixel * out * out, per_pixel + cout);
    }
}

fn count_branch(acc: &mut Acc, prefix: &str, b: &BranchSpec, input: usize, channel: usize) -> Result<()> {
    let extents = b.extents(input)?;
    let (k0, _) = kernel_for_stride(b.stage_strides[0]);
    acc.conv(format!("{prefix}.stem"), 3, b.stage_channels[0], k0, 1, extents[0]);
    for i in 1..b.stage_channels.len() {
        let (cin, cout) = (b.stage_channels[i - 1], b.stage_channels[i]);
        let hid = cin * b.expansion;
        let squeeze = hid / b.se_reduction;
        let (k, _) = kernel_for_stride(b.stage_strides[i]);
        let (h_in, h_out) = (extents[i - 1], extents[i]);
        let p = format!("{prefix}.stages.{i}");
        acc.conv(format!("{p}.expand"), cin, hid, 1, 1, h_in);
        acc.conv(format!("{p}.dw"), hid, hid, k, hid, h_out);
        acc.linear(format!("{p}.se.fc1"), 1, hid, squeeze);
        acc.linear(format!("{p}.se.fc2"), 1, squeeze, hid);
        acc.conv(format!("{p}.project"), hid, cout, 1, 1, h_out);
    }
    if b.final_pool == FinalPool::GlobalAvg {
        let last = *b.stage_channels.last().expect("validated");
        acc.linear(format!("{prefix}.proj"), 1, last, channel);
    }
    Ok(())
}

/// Costs of one transformer block over `n` tokens.
fn count_block(acc: &mut Acc, i: usize, n: usize, c: usize, hidden: usize) {
    let p = format!("blocks.{i}");
    acc.push(format!("{p}.norm1"), 0, 2 * c);
    acc.linear(format!("{p}.attn.qkv"), n, c, 3 * c);
    acc.push(format!("{p}.attn.scores"), n * n * c, 0);
    acc.push(format!("{p}.attn.mix"), n * n * c, 0);
    acc.linear(format!("{p}.attn.proj"), n, c, c);
    acc.push(format!("{p}.norm2"), 0, 2 * c);
    acc.linear(format!("{p}.mlp.fc1"), n, c, hidden);
    acc.linear(format!("{p}.mlp.fc2"), n, hidden, c);
}

/// Per-image counts for a configuration.
pub fn count(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let c = cfg.channel;
    let mut acc = Acc(Vec::new());
    match &cfg.embed {
        EmbedConfig::Naive { patch } => {
            let n = cfg.num_patches();
            acc.linear("patch_embed.proj".into(), n, 3 * patch * patch, c);
        }
        EmbedConfig::Conv { branch } => {
            count_branch(&mut acc, "patch_embed.branches.0", branch, cfg.input_size, c)?;
        }
        EmbedConfig::Irregular { branches } => {
            for (k, b) in branches.iter().enumerate() {
                count_branch(&mut acc, &format!("patch_embed.branches.{k}"), b, cfg.input_size, c)?;
            }
        }
    }
    let n = cfg.seq_len();
    if cfg.merge == MergeMode::ClassToken {
        acc.push("cls_token".into(), 0, c);
    }
    if cfg.positional {
        acc.push("pos_embed".into(), 0, n * c);
    }
    for i in 0..cfg.depth {
        count_block(&mut acc, i, n, c, cfg.hidden_dim());
    }
    acc.push("norm".into(), 0, 2 * c);
    if cfg.merge == MergeMode::Apm {
        let np = cfg.num_patches();
        acc.linear("merge.fc1".into(), np, c, c / 4);
        acc.linear("merge.fc2".into(), np, c / 4, 1);
        acc.push("merge.global_logits".into(), 0, np);
    }
    acc.linear("head".into(), 1, c, cfg.num_classes);

    let per_layer = acc.0;
    Ok(FlopsReport {
        preset: cfg.preset_name.clone(),
        total_macs: per_layer.iter().map(|l| l.macs).sum(),
        total_params: per_layer.iter().map(|l| l.params).sum(),
        per_layer,
    })
}

impl FlopsReport {
    /// MACs of layers whose name starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| l.macs)
            .sum()
    }

    /// Aligned text table with one row per layer and a total line.
    pub fn render_table(&self) -> String {
        let width = self
            .per_layer
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>12}", "layer", "macs", "params");
        for l in &self.per_layer {
            let _ = writeln!(s, "{:<width$}  {:>14}  {:>12}", l.name, l.macs, l.params);
        }
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>12}", "total", self.total_macs, self.total_params);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveRow {
    pub preset: String,
    pub macs: u64,
    pub params: u64,
}

/// One row per config, sorted by MACs (largest first). Duplicates are kept.
pub fn compression_curve(cfgs: &[ModelConfig]) -> Result<Vec<CurveRow>> {
    let mut rows = cfgs
        .iter()
        .map(|c| {
            count(c).map(|r| CurveRow {
                preset: r.preset,
                macs: r.total_macs,
                params: r.total_params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| core::cmp::Reverse(r.macs));
    Ok(rows)
}

pub fn render_curve(rows: &[CurveRow]) -> String {
    let mut s = String::new();
    if rows.is_empty() {
        return s;
    }
    let width = rows.iter().map(|r| r.preset.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(s, "{:<width$}  {:>14}  {:>12}", "preset", "macs", "params");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>12}", r.preset, r.macs, r.params);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset_budget;

    #[test]
    fn linear_over_tokens() {
        let mut acc = Acc(Vec::new());
        acc.linear("x".into(), 66, 300, 1200);
        assert_eq!(acc.0[0].macs, 23_760_000);
    }

    #[test]
    fn totals_are_sums() {
        let r = count(&ModelConfig::preset("desk-64").unwrap()).unwrap();
        assert_eq!(r.total_macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn presets_within_budget() {
        let mut last = u64::MAX;
        for name in ["880M", "610M", "310M"] {
            let r = count(&ModelConfig::preset(name).unwrap()).unwrap();
            let budget = preset_budget(name).unwrap() as f64;
            let rel = (r.total_macs as f64 - budget).abs() / budget;
            assert!(rel <= 0.15, "{name}: {} MACs", r.total_macs);
            assert!(r.total_macs < last);
            last = r.total_macs;
        }
    }

    #[test]
    fn curve_sorts_descending_and_keeps_duplicates() {
        let cfgs: Vec<ModelConfig> = ["310M", "880M", "310M"]
            .iter()
            .map(|n| ModelConfig::preset(n).unwrap())
            .collect();
        let rows = compression_curve(&cfgs).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].preset, "880M");
        assert_eq!(rows[1], rows[2]);
        assert!(render_curve(&[]).is_empty());
    }
}
