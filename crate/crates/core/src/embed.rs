//! Patch embeddings: naive flattened patches, a single convolutional trunk,
//! and the irregular multi-branch stem.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{kernel_for_stride, BranchSpec, EmbedConfig, FinalPool};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Linear};

/// Grid cell a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: usize,
    pub row: usize,
    pub col: usize,
}

/// Row-major provenance of every token, branch after branch.
pub fn provenance(grids: &[(usize, usize)]) -> Vec<Provenance> {
    let mut out = Vec::new();
    for (branch, &(gh, gw)) in grids.iter().enumerate() {
        for row in 0..gh {
            for col in 0..gw {
                out.push(Provenance { branch, row, col });
            }
        }
    }
    out
}

/// Embedded tokens `[B×N×C]` with their grid provenance.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub provenance: Vec<Provenance>,
}

/// Channel gate: global pool, bottleneck MLP, sigmoid, channel-wise scale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let squeeze = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), channels, squeeze, true)?,
            fc2: Linear::new(&mut b.sub("fc2"), squeeze, channels, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let pooled = g.global_avg_pool2d(x)?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let gate = g.sigmoid(h);
        let gate = g.reshape(gate, &[s[0], s[1], 1, 1])?;
        g.mul(x, gate)
    }
}

/// Expand (1×1) → depth-wise → SE → project (1×1), with relu after the
/// first two convolutions and a skip when shape is preserved.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub se: SqueezeExcite,
    pub project: Conv2d,
    pub skip: bool,
}

impl InvertedResidual {
    pub fn new(
        b: &mut Builder<'_>,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        let hid = cin * expansion;
        let (k, pad) = kernel_for_stride(stride);
        Ok(Self {
            expand: Conv2d::new(&mut b.sub("expand"), cin, hid, 1, 1, 0, 1)?,
            dw: Conv2d::new(&mut b.sub("dw"), hid, hid, k, stride, pad, hid)?,
            se: SqueezeExcite::new(&mut b.sub("se"), hid, se_reduction)?,
            project: Conv2d::new(&mut b.sub("project"), hid, cout, 1, 1, 0, 1)?,
            skip: stride == 1 && cin == cout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.relu(h);
        let h = self.dw.forward(g, h)?;
        let h = g.relu(h);
        let h = self.se.forward(g, h)?;
        let h = self.project.forward(g, h)?;
        if self.skip {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }
}

/// One convolutional branch: stem, inverted-residual stages, optional pool.
#[derive(Clone, Debug)]
pub struct Branch {
    pub spec: BranchSpec,
    pub stem: Conv2d,
    pub stages: Vec<InvertedResidual>,
    pub proj: Option<Linear>,
}

impl Branch {
    pub fn new(b: &mut Builder<'_>, spec: &BranchSpec, channel: usize) -> Result<Self> {
        let (k, pad) = kernel_for_stride(spec.stage_strides[0]);
        let stem = Conv2d::new(&mut b.sub("stem"), 3, spec.stage_channels[0], k, spec.stage_strides[0], pad, 1)?;
        let mut stages = Vec::new();
        for i in 1..spec.stage_channels.len() {
            stages.push(InvertedResidual::new(
                &mut b.sub(&format!("stages.{i}")),
                spec.stage_channels[i - 1],
                spec.stage_channels[i],
                spec.stage_strides[i],
                spec.expansion,
                spec.se_reduction,
            )?);
        }
        let proj = match spec.final_pool {
            FinalPool::GlobalAvg => {
                let last = *spec.stage_channels.last().expect("validated");
                Some(Linear::new(&mut b.sub("proj"), last, channel, true)?)
            }
            FinalPool::None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
            proj,
        })
    }

    /// `[B×3×S×S]` images to `[B×gh·gw×C]` tokens.
    pub fn forward(&self, g: &mut Graph<'_>, images: Var) -> Result<Var> {
        let batch = g.shape(images)[0];
        let h = self.stem.forward(g, images)?;
        let mut h = g.relu(h);
        for stage in &self.stages {
            h = stage.forward(g, h)?;
        }
        let (gh, gw) = self.spec.target_grid;
        match &self.proj {
            Some(proj) => {
                let pooled = g.global_avg_pool2d(h)?;
                let t = proj.forward(g, pooled)?;
                let c = g.shape(t)[1];
                g.reshape(t, &[batch, 1, c])
            }
            None => {
                let s = g.shape(h).to_vec();
                if s[2] != gh || s[3] != gw {
                    return Err(Error::config(format!(
                        "branch produced a {}x{} grid, expected {gh}x{gw}",
                        s[2], s[3]
                    )));
                }
                let flat = g.reshape(h, &[batch, s[1], gh * gw])?;
                g.permute(flat, &[0, 2, 1])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum PatchEmbed {
    Naive { proj: Linear, patch: usize },
    Branches(Vec<Branch>),
}

impl PatchEmbed {
    pub fn new(b: &mut Builder<'_>, cfg: &EmbedConfig, channel: usize) -> Result<Self> {
        Ok(match cfg {
            EmbedConfig::Naive { patch } => PatchEmbed::Naive {
                proj: Linear::new(&mut b.sub("proj"), 3 * patch * patch, channel, true)?,
                patch: *patch,
            },
            EmbedConfig::Conv { branch } => {
                PatchEmbed::Branches(alloc::vec![Branch::new(&mut b.sub("branches.0"), branch, channel)?])
            }
            EmbedConfig::Irregular { branches } => PatchEmbed::Branches(
                branches
                    .iter()
                    .enumerate()
                    .map(|(k, spec)| Branch::new(&mut b.sub(&format!("branches.{k}")), spec, channel))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Runs the stem; branch token grids are flattened row-major and
    /// concatenated in branch order.
    pub fn forward(&self, g: &mut Graph<'_>, images: Var) -> Result<TokenSet> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("patch_embed", &s, &[0, 3, 0, 0]));
        }
        match self {
            PatchEmbed::Naive { proj, patch } => {
                let tokens = naive_patch_embed(g, images, *patch, proj)?;
                let grid = s[2] / patch;
                Ok(TokenSet {
                    tokens,
                    provenance: provenance(&[(grid, grid)]),
                })
            }
            PatchEmbed::Branches(branches) => {
                let parts = branches
                    .iter()
                    .map(|b| b.forward(g, images))
                    .collect::<Result<Vec<_>>>()?;
                let tokens = if parts.len() == 1 {
                    parts[0]
                } else {
                    g.concat(&parts, 1)?
                };
                let grids: Vec<_> = branches.iter().map(|b| b.spec.target_grid).collect();
                Ok(TokenSet {
                    tokens,
                    provenance: provenance(&grids),
                })
            }
        }
    }
}

/// Splits `[B×3×H×W]` into `patch×patch` blocks, each flattened as
/// (channel, row, col) and projected: `[B×(H/p)(W/p)×C]`.
pub fn naive_patch_embed(g: &mut Graph<'_>, images: Var, patch: usize, proj: &Linear) -> Result<Var> {
    let flat = flatten_patches(g, images, patch)?;
    proj.forward(g, flat)
}

/// The raw `[B×N×3p²]` patch matrix before projection.
pub fn flatten_patches(g: &mut Graph<'_>, images: Var, patch: usize) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::config(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            s.get(2).copied().unwrap_or(0),
            s.get(3).copied().unwrap_or(0)
        )));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / patch, s[3] / patch);
    let x = g.reshape(images, &[b, c, gh, patch, gw, patch])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[b, gh * gw, c * patch * patch])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn naive_token_counts() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 224, 224]));
        let f = flatten_patches(&mut g, x, 16).unwrap();
        assert_eq!(g.shape(f), &[1, 196, 768]);
        let x = g.input(Tensor::zeros(&[1, 3, 32, 32]));
        let f = flatten_patches(&mut g, x, 16).unwrap();
        assert_eq!(g.shape(f), &[1, 4, 768]);
        let x = g.input(Tensor::zeros(&[1, 3, 30, 30]));
        assert!(matches!(flatten_patches(&mut g, x, 16), Err(Error::Config(_))));
    }

    #[test]
    fn naive_identity_embedding_round_trips() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Linear::new(&mut Builder::new(&mut store, &mut rng), 12, 12, true).unwrap();
        store.get_mut(proj.weight).value = Tensor::eye(12);
        let img = randn(&[1, 3, 4, 4], 1);
        let mut g = Graph::with_params(&store);
        let x = g.input(img.clone());
        let t = naive_patch_embed(&mut g, x, 2, &proj).unwrap();
        // inverse reshape back to an image
        let back = g.reshape(t, &[1, 2, 2, 3, 2, 2]).unwrap();
        let back = g.permute(back, &[0, 3, 1, 4, 2, 5]).unwrap();
        let back = g.reshape(back, &[1, 3, 4, 4]).unwrap();
        assert_eq!(g.value(back), &img);

        let constant = Tensor::full(&[1, 3, 4, 4], 0.3);
        let x = g.input(constant);
        let t = naive_patch_embed(&mut g, x, 2, &proj).unwrap();
        let d = g.value(t).data();
        assert!((0..4).all(|n| d[n * 12..(n + 1) * 12] == d[..12]));
    }

    #[test]
    fn se_with_zero_gate_halves() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let se = SqueezeExcite::new(&mut Builder::new(&mut store, &mut rng), 8, 4).unwrap();
        store.get_mut(se.fc2.weight).value = Tensor::zeros(&[8, 2]);
        let mut g = Graph::with_params(&store);
        let xt = randn(&[2, 8, 3, 3], 4);
        let x = g.input(xt.clone());
        let y = se.forward(&mut g, x).unwrap();
        let want: Vec<f64> = xt.data().iter().map(|v| v * 0.5).collect();
        assert_eq!(g.value(y).data(), want.as_slice());
    }

    #[test]
    fn inverted_residual_zero_inner_is_skip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blk = InvertedResidual::new(&mut Builder::new(&mut store, &mut rng), 4, 4, 1, 4, 4).unwrap();
        assert!(blk.skip);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut g = Graph::with_params(&store);
        let xt = randn(&[1, 4, 5, 5], 2);
        let x = g.input(xt.clone());
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn conv_trunk_is_translation_equivariant_inside() {
        let spec = BranchSpec {
            target_grid: (8, 8),
            stage_channels: alloc::vec![4, 8, 16],
            stage_strides: alloc::vec![2, 2, 1],
            expansion: 2,
            se_reduction: 2,
            final_pool: FinalPool::None,
        };
        spec.validate(32, 16).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let branch = Branch::new(&mut b, &spec, 16).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::full(&[1, 3, 32, 32], 0.7));
        let t = branch.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[1, 64, 16]);
        let d = g.value(t).data();
        // rows/cols 2..=6 of the 8×8 grid never see padding
        let cell = |r: usize, c: usize| &d[(r * 8 + c) * 16..(r * 8 + c + 1) * 16];
        for (r, c) in [(2, 6), (6, 2), (4, 4), (6, 6)] {
            let diff: f64 = cell(r, c).iter().zip(cell(2, 2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "cell {r},{c}: {diff}");
        }
    }

    #[test]
    fn full_stem_emits_66_tokens() {
        let cfg = ModelConfig::preset("880M").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pe = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), &cfg.embed, cfg.channel).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(randn(&[1, 3, 224, 224], 3));
        let ts = pe.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(ts.tokens), &[1, 66, 300]);
        assert_eq!(ts.provenance.len(), 66);
        assert_eq!(ts.provenance[49], Provenance { branch: 1, row: 0, col: 0 });
        assert_eq!(ts.provenance[65], Provenance { branch: 2, row: 0, col: 0 });
    }
}
