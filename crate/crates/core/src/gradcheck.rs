//! Central-difference gradient oracle.
//!
//! The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-8)`
//! where `a` is the backward-pass value and `n` the central difference
//! `(f(x+h) - f(x-h)) / 2h`. A check reports the worst coordinate.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use alloc::string::String;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::smoothed_cross_entropy;
use crate::model::{build_model, ForwardMode, Model};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// How the (possibly tensor-valued) output of `f` is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum of all elements.
    Sum,
    /// Sum of elements weighted by fixed standard-normal draws from `seed`.
    /// Needed where the plain sum is constant (softmax, normalized weights).
    Projected { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::config(format!("gradcheck step {step} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn reduce(g: &mut Graph<'_>, out: Var, red: Reduction) -> Result<Var> {
    match red {
        Reduction::Sum => Ok(g.sum_all(out)),
        Reduction::Projected { seed } => {
            let w = projection(g.shape(out), seed);
            let c = g.constant(w);
            let m = g.mul(out, c)?;
            Ok(g.sum_all(m))
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("gradcheck oracle saw non-finite output {v}")))
    }
}

fn eval<F>(f: &F, inputs: &[Tensor], red: Reduction) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let r = reduce(&mut g, out, red)?;
    finite(g.value(r).item())
}

/// Checks the gradient of `f` with respect to every input coordinate.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], step: f64, red: Reduction) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let r = reduce(&mut g, out, red)?;
    finite(g.value(r).item())?;
    let grads = g.backward(r)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_like(&g, v)).collect();
    drop(g);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let fp = eval(&f, &work, red)?;
            work[k].data_mut()[i] = x0 - step;
            let fm = eval(&f, &work, red)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(report.analytic[k].data()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

/// Single-input form returning the worst relative error.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    gradcheck_many(|g, v| f(g, v[0]), core::slice::from_ref(x), step, Reduction::Sum)
        .map(|r| r.max_rel_error)
}

/// Gradient check against stored parameters, restricted to `coords`.
///
/// `f` builds an output on a graph bound to the store. Returns the worst
/// relative error and the per-coordinate errors in `coords` order.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    f: F,
    coords: &[(ParamId, usize)],
    step: f64,
    red: Reduction,
) -> Result<(f64, Vec<f64>)>
where
    F: for<'p> Fn(&mut Graph<'p>) -> Result<Var>,
{
    check_step(step)?;
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let r = reduce(&mut g, out, red)?;
    finite(g.value(r).item())?;
    let grads = g.backward(r)?.param_grads(&g);
    drop(g);

    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut errors = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
        let x0 = work.get(id).value.data()[i];
        let value_at = |x: f64, work: &mut ParamStore| -> Result<f64> {
            work.get_mut(id).value.data_mut()[i] = x;
            let mut g = Graph::with_params(work);
            let out = f(&mut g)?;
            let r = reduce(&mut g, out, red)?;
            Ok(g.value(r).item())
        };
        let fp = value_at(x0 + step, &mut work)?;
        let fm = value_at(x0 - step, &mut work)?;
        work.get_mut(id).value.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!("gradcheck oracle saw non-finite output at {id:?}")));
        }
        let err = relative_error(analytic, (fp - fm) / (2.0 * step));
        worst = worst.max(err);
        errors.push(err);
    }
    Ok((worst, errors))
}

/// Step used by [`model_gradcheck`]: the smallest allowed, so that the
/// perturbation crosses relu kinks as rarely as possible.
pub const MODEL_STEP: f64 = 1e-6;

/// Moves the parameters to a generic, well-scaled random point.
///
/// At initialization a model is badly conditioned for a finite difference
/// oracle: with 0.02-std linear weights many gradients are ~1e-9, below the
/// oracle's noise floor, and zero biases put depth-wise outputs over dead relu
/// regions exactly on the relu kink. Matrices get `1/sqrt(din)` scale,
/// everything else a 0.1-std perturbation.
pub fn generic_point(m: &mut Model, seed: u64) {
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
    for (j, id) in ids.into_iter().enumerate() {
        let p = m.store.get_mut(id);
        let noise = projection(p.value.shape(), seed * 1000 + j as u64);
        let shape = p.value.shape().to_vec();
        p.value = if shape.len() == 2 && p.name.ends_with("weight") {
            let s = 1.0 / libm::sqrt(shape[1] as f64);
            Tensor::from_fn(&shape, |i| s * noise.data()[i])
        } else {
            Tensor::from_fn(&shape, |i| p.value.data()[i] + 0.1 * noise.data()[i])
        };
    }
}

/// True for the key part of a qkv bias: adding `b` to every key shifts each
/// score row by the constant `q·b`, which softmax ignores, so the exact
/// gradient is zero and a finite difference only measures round-off.
pub fn is_key_bias(m: &Model, id: ParamId, i: usize) -> bool {
    let p = m.store.get(id);
    let c = m.cfg.channel;
    p.name.ends_with("attn.qkv.bias") && (c..2 * c).contains(&i)
}

/// First, last, one-third and middle coordinate of every parameter tensor,
/// minus key-bias coordinates.
pub fn sample_coords(m: &Model) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (id, p) in m.store.iter() {
        let n = p.value.numel();
        for i in [0, n / 3, n / 2, n - 1] {
            if !out.contains(&(id, i)) && !is_key_bias(m, id, i) {
                out.push((id, i));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub name: String,
    pub index: usize,
    pub error: f64,
}

/// Smoothed cross entropy of a freshly built model, moved to a generic
/// point, on two random images; checked on [`sample_coords`]. `fault` is
/// passed to [`Graph::inject_backward_fault`] (0 for a real check).
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, fault: f64) -> Result<(f64, Vec<CoordError>)> {
    let mut m = build_model(cfg, seed)?;
    generic_point(&mut m, seed);
    let s = cfg.input_size;
    let images = projection(&[2, 3, s, s], seed + 7);
    let k = cfg.num_classes;
    let labels = [seed as usize % k, 3 % k];
    let coords = sample_coords(&m);
    let f = |g: &mut Graph<'_>| {
        g.inject_backward_fault(fault);
        let x = g.constant(images.clone());
        let out = m.forward(g, x, ForwardMode::Eval)?;
        smoothed_cross_entropy(g, out.logits, &labels, 0.1)
    };
    let (worst, errs) = gradcheck_params(&m.store, f, &coords, MODEL_STEP, Reduction::Sum)?;
    let report = coords
        .iter()
        .zip(errs)
        .map(|(&(id, index), error)| CoordError {
            name: m.store.get(id).name.clone(),
            index,
            error,
        })
        .collect();
    Ok((worst, report))
}
