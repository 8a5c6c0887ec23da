//! The full classifier: patch embedding, optional class token and
//! positional table, transformer blocks, final norm, readout and head.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::{MergeMode, ModelConfig};
use crate::embed::{PatchEmbed, Provenance, TokenSet};
use crate::error::{Error, Result};
use crate::merge::{self, Apm, ApmOutput, MergeWeights};
use crate::nn::{uniform, Builder, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::{substream, Purpose};
use crate::tensor::Tensor;
use crate::transformer::{Block, DropMasks};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode<'a> {
    Eval,
    /// DropPath active. Sample `i` of the batch draws its masks from the
    /// substream keyed by `(seed, epoch, sample_ids[i])`.
    Train {
        seed: u64,
        epoch: u64,
        sample_ids: &'a [u64],
    },
}

#[derive(Clone, Debug)]
pub enum Readout {
    ClassToken,
    AvgPool,
    Apm(Apm),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub cls_token: Option<ParamId>,
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub readout: Readout,
    pub head: Linear,
    pub provenance: Vec<Provenance>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B×K]`
    pub logits: Var,
    /// Tokens after the final norm, `[B×L×C]`.
    pub tokens: Var,
    pub apm: Option<ApmOutput>,
}

/// Builds and initializes a model; equal seeds give bitwise-equal parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = substream(seed, Purpose::Init, 0, 0);
    let mut b = Builder::new(&mut store, &mut rng);
    let c = cfg.channel;

    let embed = PatchEmbed::new(&mut b.sub("patch_embed"), &cfg.embed, c)?;
    let cls_token = if cfg.merge == MergeMode::ClassToken {
        Some(b.param("cls_token", &[1, c], Init::TruncNormal(0.02), false)?)
    } else {
        None
    };
    let pos_embed = if cfg.positional {
        Some(b.param("pos_embed", &[cfg.seq_len(), c], Init::TruncNormal(0.02), false)?)
    } else {
        None
    };
    let blocks = (0..cfg.depth)
        .map(|i| {
            Block::new(
                &mut b.sub(&format!("blocks.{i}")),
                c,
                cfg.heads,
                cfg.mlp_ratio,
                cfg.droppath_rate(i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = LayerNorm::new(&mut b.sub("norm"), c)?;
    let readout = match cfg.merge {
        MergeMode::ClassToken => Readout::ClassToken,
        MergeMode::AvgPool => Readout::AvgPool,
        MergeMode::Apm => Readout::Apm(Apm::new(&mut b.sub("merge"), c, cfg.num_patches())?),
    };
    let head = Linear::new(&mut b.sub("head"), c, cfg.num_classes, true)?;
    let provenance = crate::embed::provenance(&cfg.embed.grids(cfg.input_size));
    Ok(Model {
        cfg: cfg.clone(),
        store,
        embed,
        cls_token,
        pos_embed,
        blocks,
        norm,
        readout,
        head,
        provenance,
    })
}

impl Model {
    /// Images `[B×3×S×S]` to patch tokens `[B×N×C]`.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, images: Var) -> Result<TokenSet> {
        let s = g.shape(images);
        let want = [s.first().copied().unwrap_or(0), 3, self.cfg.input_size, self.cfg.input_size];
        if s.len() != 4 || s[1..] != want[1..] || s[0] == 0 {
            return Err(Error::dim("forward", s, &want));
        }
        self.embed.forward(g, images)
    }

    /// Everything after the patch embedding. `perm`, if the caller reordered
    /// the patch tokens, is applied to the merge's global logits too; the
    /// positional table is not permuted.
    pub fn forward_tokens(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        perm: Option<&[usize]>,
        mode: ForwardMode<'_>,
    ) -> Result<Forward> {
        let s = g.shape(tokens).to_vec();
        let (batch, c) = (s[0], self.cfg.channel);
        if s.len() != 3 || s[1] != self.cfg.num_patches() || s[2] != c {
            return Err(Error::dim("forward_tokens", &s, &[batch, self.cfg.num_patches(), c]));
        }
        let mut x = tokens;
        if let Some(id) = self.cls_token {
            let cls = g.param(id);
            let cls = g.reshape(cls, &[1, 1, c])?;
            let cls = g.broadcast_to(cls, &[batch, 1, c])?;
            x = g.concat(&[cls, x], 1)?;
        }
        if let Some(id) = self.pos_embed {
            let pos = g.param(id);
            x = g.add(x, pos)?;
        }
        let masks = self.drop_masks(mode, batch)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(g, x, masks.as_ref().map(|m| &m[i]))?;
        }
        let x = self.norm.forward(g, x)?;
        let (feature, apm) = match &self.readout {
            Readout::ClassToken => (merge::class_token_readout(g, x, true)?, None),
            Readout::AvgPool => (merge::avg_pool_merge(g, x)?, None),
            Readout::Apm(apm) => {
                let out = apm.forward(g, x, perm)?;
                (out.feature, Some(out))
            }
        };
        let logits = self.head.forward(g, feature)?;
        Ok(Forward {
            logits,
            tokens: x,
            apm,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, images: Var, mode: ForwardMode<'_>) -> Result<Forward> {
        let ts = self.embed_tokens(g, images)?;
        self.forward_tokens(g, ts.tokens, None, mode)
    }

    /// Evaluation-mode logits `[B×K]` and, for adaptive merging, the
    /// per-image merge weights.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Vec<MergeWeights>)> {
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, ForwardMode::Eval)?;
        let weights = self.merge_weights(&g, &out);
        Ok((g.value(out.logits).clone(), weights))
    }

    pub fn merge_weights(&self, g: &Graph<'_>, out: &Forward) -> Vec<MergeWeights> {
        out.apm.as_ref().map(|a| Apm::weights(g, a)).unwrap_or_default()
    }

    /// Per-block masks for a training batch, `None` at evaluation.
    ///
    /// Each sample draws two uniforms per block in block order (attention,
    /// then MLP), whatever the rates, so masks depend only on the key.
    pub fn drop_masks(&self, mode: ForwardMode<'_>, batch: usize) -> Result<Option<Vec<DropMasks>>> {
        let ForwardMode::Train {
            seed,
            epoch,
            sample_ids,
        } = mode
        else {
            return Ok(None);
        };
        if sample_ids.len() != batch {
            return Err(Error::dim("drop_masks", &[sample_ids.len()], &[batch]));
        }
        let depth = self.blocks.len();
        let mut keeps = alloc::vec![Vec::with_capacity(batch); depth];
        for &id in sample_ids {
            let mut rng = substream(seed, Purpose::DropPath, epoch, id);
            for (i, blk) in self.blocks.iter().enumerate() {
                let ua = uniform(&mut rng);
                let um = uniform(&mut rng);
                keeps[i].push((ua >= blk.droppath, um >= blk.droppath));
            }
        }
        Ok(Some(
            self.blocks
                .iter()
                .zip(&keeps)
                .map(|(blk, k)| DropMasks::from_keeps(k, blk.droppath))
                .collect(),
        ))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn is_apm(&self) -> bool {
        matches!(self.readout, Readout::Apm(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn desk_shapes_and_determinism() {
        let cfg = ModelConfig::preset("desk-64").unwrap();
        let m = build_model(&cfg, 7).unwrap();
        let x = randn(&[2, 3, 64, 64], 1);
        let (l1, w1) = m.predict(&x).unwrap();
        let (l2, w2) = m.predict(&x).unwrap();
        assert_eq!(l1.shape(), &[2, 10]);
        assert_eq!(l1, l2);
        assert_eq!(w1, w2);
        assert_eq!(w1.len(), 2);
        let bad = randn(&[1, 3, 32, 32], 1);
        assert!(matches!(m.predict(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn equal_seeds_equal_params() {
        let cfg = ModelConfig::preset("desk-32").unwrap();
        let a = build_model(&cfg, 3).unwrap();
        let b = build_model(&cfg, 3).unwrap();
        let c = build_model(&cfg, 4).unwrap();
        let same = |x: &Model, y: &Model| x.store.iter().zip(y.store.iter()).all(|(p, q)| p.1 == q.1);
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
    }

    #[test]
    fn droppath_masks_follow_keys() {
        let cfg = ModelConfig::preset("desk-32").unwrap();
        let m = build_model(&cfg, 0).unwrap();
        let mode = |ids| ForwardMode::Train {
            seed: 1,
            epoch: 2,
            sample_ids: ids,
        };
        let a = m.drop_masks(mode(&[5, 9]), 2).unwrap().unwrap();
        let b = m.drop_masks(mode(&[9]), 1).unwrap().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.attn.data()[1], y.attn.data()[0]);
            assert_eq!(x.mlp.data()[1], y.mlp.data()[0]);
        }
        assert!(m.drop_masks(ForwardMode::Eval, 2).unwrap().is_none());
    }
}
