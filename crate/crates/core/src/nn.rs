//! Named parameters and the small layers every module is built from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a unique hierarchical name such as
/// `blocks.0.attn.qkv.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (weights yes; biases, norms,
    /// embeddings and merge logits no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, decay });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: alloc::vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0)?.as_ref()
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// `self += weight · other`, elementwise per parameter.
    pub fn add_scaled(&mut self, other: &ParamGrads, weight: f64) {
        for (id, g) in other.iter() {
            match &mut self.grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * b;
                    }
                }
                slot @ None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= weight);
                    *slot = Some(t);
                }
            }
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled until within two std.
    TruncNormal(f64),
    /// Normal with std `sqrt(2 / fan_out)`, `fan_out = Cout·kh·kw / groups`.
    KaimingFanOut { fan_out: usize },
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| std * trunc_normal(rng)),
            Init::KaimingFanOut { fan_out } => {
                let std = libm::sqrt(2.0 / fan_out.max(1) as f64);
                Tensor::from_fn(shape, |_| std * { let z: f64 = StandardNormal.sample(rng); z })
            }
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Uniform draw in `[0, 1)`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

/// Parameter construction context: a store, a name prefix and an RNG.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose parameter names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.prefix)
        };
        let value = init.sample(shape, self.rng);
        self.store.add(full, value, decay)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Weight `[dout×din]` from truncated normal(0, 0.02), zero bias.
    pub fn new(b: &mut Builder<'_>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let weight = b.param("weight", &[dout, din], Init::TruncNormal(0.02), true)?;
        let bias = if bias {
            Some(b.param("bias", &[dout], Init::Zeros, false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            din,
            dout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(b: &mut Builder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[dim], Init::Ones, false)?,
            beta: b.param("bias", &[dim], Init::Zeros, false)?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layernorm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Square `k×k` convolution with bias, Kaiming fan-out initialized.
    pub fn new(
        b: &mut Builder<'_>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_out = cout * k * k / groups;
        let weight = b.param(
            "weight",
            &[cout, cin / groups, k, k],
            Init::KaimingFanOut { fan_out },
            true,
        )?;
        let bias = b.param("bias", &[cout], Init::Zeros, false)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(
            x,
            w,
            Some(b),
            (self.stride, self.stride),
            (self.padding, self.padding),
            self.groups,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]), false).unwrap();
        assert!(matches!(s.add("a", Tensor::zeros(&[1]), false), Err(Error::Config(_))));
    }

    #[test]
    fn builder_prefixes_names() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut s, &mut rng);
        let mut blk = b.sub("blocks");
        let mut l = blk.sub("0");
        Linear::new(&mut l.sub("fc"), 3, 2, true).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["blocks.0.fc.weight", "blocks.0.fc.bias"]);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Init::TruncNormal(0.02).sample(&[1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn add_scaled_accumulates() {
        let mut a = ParamGrads::new(2);
        let mut b = ParamGrads::new(2);
        b.set(ParamId(1), Tensor::ones(&[2]));
        a.add_scaled(&b, 0.5);
        a.add_scaled(&b, 0.25);
        assert_eq!(a.get(ParamId(1)).unwrap().data(), &[0.75, 0.75]);
        assert!(a.get(ParamId(0)).is_none());
    }
}
