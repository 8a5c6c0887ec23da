//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] walks it once in reverse.
//!
//! Parameters come from a borrowed [`ParamStore`]: [`Graph::param`] copies a
//! parameter onto the tape the first time it is requested and reuses the same
//! node afterwards, so gradients of shared parameters accumulate naturally.
//!
//! ```
//! use mobivit_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum_all(sq);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub(crate) mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{numel, strides, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi) for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Vec<usize>),
    Mul(Var, Var, Vec<usize>),
    Scale(Var, f64),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Recip(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    /// Gather map: output element `i` reads input element `map[i]`.
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    AdaptiveAvgPool(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b, _) | Op::Mul(a, b, _) | Op::Matmul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Recip(x)
            | Op::Softmax(x, _)
            | Op::Reshape(x)
            | Op::Gather(x, _)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::AdaptiveAvgPool(x) => vec![*x],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Inputs above this magnitude may legitimately overflow to infinity; the
/// debug finiteness check ignores them.
const OVERFLOW_GUARD: f64 = 1e100;

/// The recording tape.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    fault: f64,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A tape with no parameter store attached.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            fault: 0.0,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            fault: 0.0,
        }
    }

    /// Test fixture: scales every gradient produced by [`Graph::backward`]
    /// by `1 + scale`, leaving forward values untouched. Exists so that the
    /// gradient oracle can be shown to catch a broken backward pass.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, scale: f64) {
        self.fault = scale;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// The tape node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.input(store.get(id).value.clone());
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let parents = op.parents();
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // recip is the one partial op; every other op is total on finite
        // input small enough that products and sums cannot overflow
        debug_assert!(
            value.all_finite()
                || matches!(op, Op::Recip(_))
                || parents.iter().any(|p| !self.nodes[p.0].value.within(OVERFLOW_GUARD)),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- elementwise --------------------------------------------------

    /// `a + b`, where `b` broadcasts to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b), "add")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().zip(&map).map(|(x, &j)| x + bv[j]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b, map)))
    }

    /// `a * b`, where `b` broadcasts to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b), "mul")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().zip(&map).map(|(x, &j)| x * bv[j]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b, map)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| {
            0.5 * v * (1.0 + libm::tanh(GELU_C * (v + GELU_CUBIC * v * v * v)))
        });
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / v);
        self.push(t, Op::Recip(x))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    // ----- products -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm_nn(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(t, Op::Bmm(a, b)))
    }

    /// Affine map over the trailing axis: `x · wᵀ + b` with `w: [dout×din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let din = *sx.last().ok_or_else(|| Error::dim("linear", sx, sw))?;
        if sw.len() != 2 || sw[1] != din {
            return Err(Error::dim("linear", sx, sw));
        }
        let dout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear", sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        kernels::gemm_nt(rows, din, dout, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Grouped 2-D cross-correlation (no kernel flip).
    ///
    /// `x: [B×Cin×H×W]`, `w: [Cout×Cin/groups×kh×kw]`, optional `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", sx, sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim("conv2d", sx, sw));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let span_h = h + 2 * padding.0;
        let span_w = wd + 2 * padding.1;
        if span_h < kh || span_w < kw {
            return Err(Error::config(alloc::format!(
                "conv2d output extent is not positive: input {h}x{wd}, kernel {kh}x{kw}, padding {padding:?}"
            )));
        }
        let oh = (span_h - kh) / stride.0 + 1;
        let ow = (span_w - kw) / stride.1 + 1;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d", sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            oh,
            ow,
        };
        let mut out = vec![0.0; batch * cout * oh * ow];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(&[batch, cout, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    // ----- normalization ------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                index: axis,
                bound: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let m = (0..len).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = libm::exp(xv[idx(j)] - m);
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax(x, axis)))
    }

    /// Layer normalization over the trailing axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layernorm", &shape, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layernorm", &shape, self.shape(gamma)));
        }
        if eps.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::config("layernorm eps must be positive"));
        }
        let rows = self.value(x).numel() / c;
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ----- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = strided_map(&out_shape, &src_strides, 0);
        self.gather(x, &out_shape, map)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(x, &axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let st = strides(&shape);
        let map = strided_map(&out_shape, &st, start * st[axis]);
        self.gather(x, &out_shape, map)
    }

    /// Picks entries `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return Err(Error::dim("index_select", &shape, &[axis]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Index {
                index: bad,
                bound: shape[axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.gather(x, &out_shape, map)
    }

    /// Repeats `x` to `shape` under right-aligned broadcasting rules.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(shape, self.shape(x), "broadcast_to")?;
        self.gather(x, shape, map)
    }

    fn gather(&mut self, x: Var, shape: &[usize], map: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let data = map.iter().map(|&j| xv[j]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(x, map)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::config("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis)))
    }

    // ----- reductions ---------------------------------------------------

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    // ----- pooling ------------------------------------------------------

    /// Adaptive average pooling of `[B×C×H×W]` to `[B×C×oh×ow]`. Bin `i`
    /// along an axis of extent `n` covers `[⌊i·n/oh⌋, ⌊(i+1)·n/oh⌋)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 || oh > s[2] || ow > s[3] {
            return Err(Error::dim("adaptive_avg_pool2d", &s, &[oh, ow]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = kernels::pool_bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = kernels::pool_bin(j, w, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out[(p * oh + i) * ow + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(t, Op::AdaptiveAvgPool(x)))
    }

    /// Global average pooling `[B×C×H×W] → [B×C]`.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool2d", &s, &[]));
        }
        let p = self.adaptive_avg_pool2d(x, 1, 1)?;
        self.reshape(p, &[s[0], s[1]])
    }

    // ----- losses -------------------------------------------------------

    /// Mean over rows of `-Σ targets · log_softmax(logits)`.
    ///
    /// `logits` and `targets` are both `[B×K]`; targets need not be one-hot.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::dim("soft_cross_entropy", &s, targets.shape()));
        }
        let (b, k) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let tv = targets.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
            let lse = m + libm::log(z);
            for j in 0..k {
                probs[r * k + j] = libm::exp(row[j] - lse);
                loss -= tv[r * k + j] * (row[j] - lse);
            }
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
        ))
    }

    // ----- backward -----------------------------------------------------

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0 + self.fault]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, map) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (&j, gv) in map.iter().zip(g) {
                        gb[j] += gv;
                    }
                });
            }
            Op::Mul(a, b, map) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((d, &j), gv) in ga.iter_mut().zip(map).zip(g) {
                        *d += gv * bv[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((&j, gv), x) in map.iter().zip(g).zip(av) {
                        gb[j] += gv * x;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| {
                for (d, gv) in gx.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| kernels::gemm_nt(m, n, k, g, bv, ga));
                self.acc(grads, *b, |gb| kernels::gemm_tn(k, m, n, av, g, gb));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for t in 0..bs {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for t in 0..bs {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (dout, din) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |gx| kernels::gemm_nn(rows, dout, din, g, wv, gx));
                self.acc(grads, *w, |gw| kernels::gemm_tn(dout, rows, din, g, xv, gw));
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for r in 0..rows {
                            add_into(gb, &g[r * dout..(r + 1) * dout]);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = need_x.then(|| take_or_zero(grads, *x, xv.len()));
                let mut gw = need_w.then(|| take_or_zero(grads, *w, wv.len()));
                kernels::conv2d_backward(geom, xv, wv, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
                if let Some(b) = b {
                    let plane = geom.oh * geom.ow;
                    self.acc(grads, *b, |gb| {
                        for bi in 0..geom.batch {
                            for (oc, d) in gb.iter_mut().enumerate() {
                                let off = (bi * geom.cout + oc) * plane;
                                *d += g[off..off + plane].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((d, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = libm::tanh(GELU_C * (v + GELU_CUBIC * v * v * v));
                        let du = GELU_C * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |gx| {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Recip(x) => self.acc(grads, *x, |gx| {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *d -= gv * y * y;
                }
            }),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dotp: f64 = (0..len)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                gx[k] += out[k] * (g[k] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gv = self.value(*gamma).data();
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            gx[r * c + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Gather(x, map) => self.acc(grads, *x, |gx| {
                for (&j, gv) in map.iter().zip(g) {
                    gx[j] += gv;
                }
            }),
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            add_into(
                                &mut gx[(o * len + j) * inner..][..inner],
                                &g[o * inner..(o + 1) * inner],
                            );
                        }
                    }
                });
            }
            Op::SumAll(x) => self.acc(grads, *x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::AdaptiveAvgPool(x) => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                self.acc(grads, *x, |gx| {
                    for p in 0..planes {
                        for i in 0..oh {
                            let (y0, y1) = kernels::pool_bin(i, h, oh);
                            for j in 0..ow {
                                let (x0, x1) = kernels::pool_bin(j, w, ow);
                                let share = g[(p * oh + i) * ow + j]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    for d in &mut gx[p * h * w + y * w + x0..p * h * w + y * w + x1]
                                    {
                                        *d += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits);
                let (b, k) = (s[0], s[1]);
                let tv = targets.data();
                let scale = g[0] / b as f64;
                self.acc(grads, *logits, |gl| {
                    for r in 0..b {
                        let mass: f64 = tv[r * k..(r + 1) * k].iter().sum();
                        for j in 0..k {
                            gl[r * k + j] += scale * (mass * probs[r * k + j] - tv[r * k + j]);
                        }
                    }
                });
            }
        }
    }

    /// Runs `f` on the (lazily zeroed) gradient buffer of `v` if it needs one.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf did not influence the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor::from_fn(&[g.len()], |i| g[i]))
    }

    /// Gradient of a leaf reshaped like its value.
    pub fn get_like(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(graph.shape(v), g.clone()).expect("grad shape"),
            None => Tensor::zeros(graph.shape(v)),
        }
    }

    /// Collects the gradients of every parameter that was placed on `graph`.
    pub fn param_grads(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(graph.param_vars.len());
        for (idx, var) in graph.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(Some(g)) = self.grads.get(v.0) {
                    out.set(ParamId(idx), Tensor::new(graph.shape(*v), g.clone()).expect("grad shape"));
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
}

/// `(product of leading extents, extent of axis, product of trailing extents)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// For each element of `out_shape` (row-major), the flat source index under
/// per-axis `src_strides` starting from `offset`.
fn strided_map(out_shape: &[usize], src_strides: &[usize], offset: usize) -> Vec<usize> {
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = offset;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Source index map for broadcasting `small` (right-aligned) to `big`.
fn broadcast_map(big: &[usize], small: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return Err(Error::dim(op, big, small));
    }
    let lead = big.len() - small.len();
    let small_strides = strides(small);
    let mut src_strides = vec![0usize; big.len()];
    for (i, (&s, &st)) in small.iter().zip(&small_strides).enumerate() {
        let b = big[lead + i];
        if s == b {
            src_strides[lead + i] = st;
        } else if s != 1 {
            return Err(Error::dim(op, big, small));
        }
    }
    Ok(strided_map(big, &src_strides, 0))
}
