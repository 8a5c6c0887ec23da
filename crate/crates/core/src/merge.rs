//! Readouts from the final token sequence to one feature per image.
//!
//! Adaptive patch merging multiplies two gates per token: an image-dependent
//! one, `sigmoid(MLP(token))` with a shared `C → C/4 → 1` MLP, and a learned
//! image-independent one, `sigmoid(global_logits)`. The products are
//! normalized to sum to 1 and used as token weights.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::embed::Provenance;
use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear, ParamId};

/// Smallest raw weight sum that can be normalized.
pub const MIN_WEIGHT_SUM: f64 = 1e-12;

/// Per-image merge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub weights: Vec<f64>,
    pub adaptive_logits: Vec<f64>,
    pub global_logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Apm {
    pub fc1: Linear,
    pub fc2: Linear,
    pub global_logits: ParamId,
    pub tokens: usize,
}

/// Graph nodes produced by [`Apm::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ApmOutput {
    /// `[B×C]`
    pub feature: Var,
    /// `[B×N]`, rows sum to 1.
    pub weights: Var,
    /// `[B×N]`
    pub adaptive_logits: Var,
    /// `[N]`, after any token permutation.
    pub global_logits: Var,
}

impl Apm {
    pub fn new(b: &mut Builder<'_>, channel: usize, tokens: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), channel, channel / 4, true)?,
            fc2: Linear::new(&mut b.sub("fc2"), channel / 4, 1, true)?,
            global_logits: b.param("global_logits", &[tokens], Init::Zeros, false)?,
            tokens,
        })
    }

    /// `tokens: [B×N×C]`. When the tokens were permuted, pass the same
    /// permutation so the global logits follow their tokens.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var, perm: Option<&[usize]>) -> Result<ApmOutput> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != self.tokens {
            return Err(Error::config(format!(
                "merge expects {} tokens, got shape {s:?}",
                self.tokens
            )));
        }
        let (b, n) = (s[0], s[1]);
        let h = self.fc1.forward(g, tokens)?;
        let h = g.relu(h);
        let a = self.fc2.forward(g, h)?;
        let adaptive_logits = g.reshape(a, &[b, n])?;
        let mut gl = g.param(self.global_logits);
        if let Some(p) = perm {
            gl = g.index_select(gl, 0, p)?;
        }
        let (feature, weights) = merge_with_logits(g, tokens, adaptive_logits, gl)?;
        Ok(ApmOutput {
            feature,
            weights,
            adaptive_logits,
            global_logits: gl,
        })
    }

    /// Copies the per-image weights of a forward pass out of the graph.
    pub fn weights(g: &Graph<'_>, out: &ApmOutput) -> Vec<MergeWeights> {
        let s = g.shape(out.weights);
        let (b, n) = (s[0], s[1]);
        let w = g.value(out.weights).data();
        let a = g.value(out.adaptive_logits).data();
        let gl = g.value(out.global_logits).data();
        (0..b)
            .map(|i| MergeWeights {
                weights: w[i * n..(i + 1) * n].to_vec(),
                adaptive_logits: a[i * n..(i + 1) * n].to_vec(),
                global_logits: gl.to_vec(),
            })
            .collect()
    }
}

/// Gate, normalize and merge: returns `(feature [B×C], weights [B×N])`.
///
/// `adaptive_logits: [B×N]`, `global_logits: [N]`.
pub fn merge_with_logits(
    g: &mut Graph<'_>,
    tokens: Var,
    adaptive_logits: Var,
    global_logits: Var,
) -> Result<(Var, Var)> {
    let s = g.shape(tokens).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let a = g.sigmoid(adaptive_logits);
    let gg = g.sigmoid(global_logits);
    let raw = g.mul(a, gg)?;
    let weights = normalize_rows(g, raw)?;
    let w3 = g.reshape(weights, &[b, 1, n])?;
    let f = g.bmm(w3, tokens)?;
    let feature = g.reshape(f, &[b, c])?;
    Ok((feature, weights))
}

/// Divides each row of nonnegative `raw: [B×N]` by its sum.
pub fn normalize_rows(g: &mut Graph<'_>, raw: Var) -> Result<Var> {
    let b = g.shape(raw)[0];
    let sum = g.sum_axis(raw, 1)?;
    // negated so that NaN counts as bad
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if let Some(bad) = g.value(sum).data().iter().find(|&&z| !(z >= MIN_WEIGHT_SUM)) {
        return Err(Error::Numerical(format!(
            "merge weights sum to {bad:e}, cannot normalize"
        )));
    }
    let inv = g.recip(sum);
    let inv = g.reshape(inv, &[b, 1])?;
    g.mul(raw, inv)
}

/// Unweighted token mean `[B×N×C] → [B×C]`.
pub fn avg_pool_merge(g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
    g.mean_axis(tokens, 1)
}

/// Token 0 of `[B×(N+1)×C]`.
pub fn class_token_readout(g: &mut Graph<'_>, tokens: Var, has_class_token: bool) -> Result<Var> {
    if !has_class_token {
        return Err(Error::config("class-token readout on a model without a class token"));
    }
    let s = g.shape(tokens).to_vec();
    let t = g.narrow(tokens, 1, 0, 1)?;
    g.reshape(t, &[s[0], s[2]])
}

/// One grayscale grid per branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayGrid {
    pub branch: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, 0 is black.
    pub pixels: Vec<u8>,
}

/// Gray level used when every weight of an image is equal.
pub const MID_GRAY: u8 = 128;

/// Lays one image's weights onto its branch grids, min-max normalized over
/// the whole image so that the largest weight is white.
pub fn weight_grids(weights: &[f64], provenance: &[Provenance], grids: &[(usize, usize)]) -> Result<Vec<GrayGrid>> {
    if weights.len() != provenance.len() {
        return Err(Error::dim("weight_grids", &[weights.len()], &[provenance.len()]));
    }
    let mut out: Vec<GrayGrid> = grids
        .iter()
        .enumerate()
        .map(|(branch, &(height, width))| GrayGrid {
            branch,
            height,
            width,
            pixels: alloc::vec![0; height * width],
        })
        .collect();
    let mut covered: Vec<Vec<bool>> = out.iter().map(|g| alloc::vec![false; g.pixels.len()]).collect();
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let flat = !(hi > lo);
    for (w, p) in weights.iter().zip(provenance) {
        let grid = out.get_mut(p.branch).ok_or(Error::Index {
            index: p.branch,
            bound: grids.len(),
        })?;
        if p.row >= grid.height || p.col >= grid.width {
            return Err(Error::Index {
                index: p.row * grid.width + p.col,
                bound: grid.pixels.len(),
            });
        }
        let idx = p.row * grid.width + p.col;
        grid.pixels[idx] = if flat {
            MID_GRAY
        } else {
            libm::round(255.0 * (w - lo) / (hi - lo)) as u8
        };
        covered[p.branch][idx] = true;
    }
    if covered.iter().flatten().any(|c| !c) {
        return Err(Error::config("provenance does not cover every grid cell"));
    }
    Ok(out)
}
