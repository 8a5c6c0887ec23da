//! Pre-norm transformer blocks: `x + MSA(LN(x))`, then `x + FFN(LN(x))`,
//! each residual branch optionally dropped per sample (DropPath).

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder<'_>, channel: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channel.is_multiple_of(heads) {
            return Err(Error::config(alloc::format!(
                "channel {channel} is not divisible by heads {heads}"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&mut b.sub("qkv"), channel, 3 * channel, true)?,
            proj: Linear::new(&mut b.sub("proj"), channel, channel, true)?,
            heads,
        })
    }

    /// `[B×N×C] → [B×N×C]`; also returns the attention probabilities
    /// `[B·H×N×N]`.
    pub fn forward_with_probs(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.qkv.din {
            return Err(Error::dim("attention", &s, &[0, 0, self.qkv.din]));
        }
        let (b, n, c, h) = (s[0], s[1], s[2], self.heads);
        let d = c / h;
        let qkv = self.qkv.forward(g, x)?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let t = g.narrow(qkv, 0, i, 1)?;
            *p = g.reshape(t, &[b * h, n, d])?;
        }
        let [q, k, v] = parts;
        let kt = g.transpose_last(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
        let probs = g.softmax(scores, 2)?;
        let mixed = g.bmm(probs, v)?;
        let mixed = g.reshape(mixed, &[b, h, n, d])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[b, n, c])?;
        Ok((self.proj.forward(g, mixed)?, probs))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_with_probs(g, x).map(|(y, _)| y)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, channel: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), channel, hidden, true)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, channel, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Per-sample residual-branch multipliers for one block: 0 for a dropped
/// sample, `1/(1-p)` for a kept one. Shape `[B×1×1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMasks {
    pub attn: Tensor,
    pub mlp: Tensor,
}

impl DropMasks {
    /// Masks from per-sample keep decisions `(attn, mlp)` at drop rate `p`.
    pub fn from_keeps(keeps: &[(bool, bool)], p: f64) -> Self {
        let scale = 1.0 / (1.0 - p);
        let col = |f: fn(&(bool, bool)) -> bool| {
            let data: Vec<f64> = keeps.iter().map(|k| if f(k) { scale } else { 0.0 }).collect();
            Tensor::new(&[keeps.len(), 1, 1], data).expect("mask shape")
        };
        Self {
            attn: col(|k| k.0),
            mlp: col(|k| k.1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub droppath: f64,
}

impl Block {
    pub fn new(
        b: &mut Builder<'_>,
        channel: usize,
        heads: usize,
        mlp_ratio: usize,
        droppath: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), channel)?,
            attn: Attention::new(&mut b.sub("attn"), channel, heads)?,
            norm2: LayerNorm::new(&mut b.sub("norm2"), channel)?,
            mlp: Mlp::new(&mut b.sub("mlp"), channel, mlp_ratio * channel)?,
            droppath,
        })
    }

    /// With `masks == None` both branches are kept unscaled, which is the
    /// evaluation behaviour of DropPath.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, masks: Option<&DropMasks>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h)?;
        let a = apply_mask(g, a, masks.map(|m| &m.attn))?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.mlp.forward(g, h)?;
        let f = apply_mask(g, f, masks.map(|m| &m.mlp))?;
        g.add(x, f)
    }
}

fn apply_mask(g: &mut Graph<'_>, branch: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        None => Ok(branch),
        Some(m) => {
            let c = g.constant(m.clone());
            g.mul(branch, c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_params, Reduction};
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    fn block(c: usize, h: usize) -> (ParamStore, Block) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blk = Block::new(&mut Builder::new(&mut store, &mut rng), c, h, 4, 0.1).unwrap();
        (store, blk)
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let (store, blk) = block(8, 2);
        let mut g = Graph::with_params(&store);
        let x = g.input(randn(&[1, 1, 8], 1));
        let (y, p) = blk.attn.forward_with_probs(&mut g, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.0));
        // Wo·(Wv·x + bv) + bo
        let w = &store.get(blk.attn.qkv.weight).value;
        let bq = &store.get(blk.attn.qkv.bias.unwrap()).value;
        let wo = &store.get(blk.attn.proj.weight).value;
        let bo = &store.get(blk.attn.proj.bias.unwrap()).value;
        let xv = g.value(x).data();
        let v: Vec<f64> = (0..8)
            .map(|r| bq.data()[16 + r] + (0..8).map(|c| w.data()[(16 + r) * 8 + c] * xv[c]).sum::<f64>())
            .collect();
        for r in 0..8 {
            let want = bo.data()[r] + (0..8).map(|c| wo.data()[r * 8 + c] * v[c]).sum::<f64>();
            assert!((g.value(y).data()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_permute() {
        let (store, blk) = block(12, 3);
        let mut g = Graph::with_params(&store);
        let xt = randn(&[2, 5, 12], 3);
        let x = g.input(xt);
        let (y, p) = blk.attn.forward_with_probs(&mut g, x).unwrap();
        for row in g.value(p).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let perm = [3, 0, 4, 1, 2];
        let xp = g.index_select(x, 1, &perm).unwrap();
        let yp = blk.attn.forward(&mut g, xp).unwrap();
        let y_then_p = g.index_select(y, 1, &perm).unwrap();
        assert!(g.value(yp).max_abs_diff(g.value(y_then_p)).unwrap() < 1e-12);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Attention::new(&mut Builder::new(&mut store, &mut rng), 10, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ffn_hidden_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::new(&mut Builder::new(&mut store, &mut rng), 300, 4 * 300).unwrap();
        assert_eq!(m.fc1.dout, 1200);
    }

    #[test]
    fn dropped_branches_leave_input() {
        let (store, blk) = block(8, 2);
        let mut g = Graph::with_params(&store);
        let xt = randn(&[2, 3, 8], 5);
        let x = g.input(xt.clone());
        let masks = DropMasks::from_keeps(&[(false, false), (true, true)], 0.25);
        let y = blk.forward(&mut g, x, Some(&masks)).unwrap();
        assert_eq!(&g.value(y).data()[..24], &xt.data()[..24]);
        let unit = DropMasks::from_keeps(&[(true, true), (true, true)], 0.0);
        let y1 = blk.forward(&mut g, x, Some(&unit)).unwrap();
        let y0 = blk.forward(&mut g, x, None).unwrap();
        assert_eq!(g.value(y1), g.value(y0));
    }

    #[test]
    fn block_gradcheck() {
        let (store, blk) = block(8, 2);
        let x = randn(&[1, 4, 8], 9);
        let coords: Vec<_> = store
            .iter()
            .flat_map(|(id, p)| [(id, 0), (id, p.value.numel() - 1)])
            .collect();
        let f = |g: &mut Graph<'_>| {
            let xv = g.input(x.clone());
            blk.forward(g, xv, None)
        };
        let (worst, _) = gradcheck_params(&store, f, &coords, 1e-5, Reduction::Projected { seed: 4 }).unwrap();
        assert!(worst < 1e-4, "{worst}");
    }
}
