//! AdamW with decoupled weight decay, plain Adam, and the learning-rate
//! schedule (linear warmup then cosine decay).

use alloc::format;
use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Warmup starts at this fraction of the peak rate.
pub const WARMUP_START: f64 = 1e-6;
/// Cosine decay ends at this fraction of the peak rate.
pub const FINAL_FRACTION: f64 = 1e-2;

/// Rate at `step` of `total` with `warmup` linear warmup steps.
///
/// Warmup rises from `WARMUP_START·lr` towards `lr`; step `warmup` is exactly
/// `lr`; the cosine phase reaches `FINAL_FRACTION·lr` at step `total - 1`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr: f64) -> f64 {
    if step < warmup {
        return lr * (WARMUP_START + (1.0 - WARMUP_START) * step as f64 / warmup as f64);
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 || step == warmup {
        return lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = lr * FINAL_FRACTION;
    floor + (lr - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

fn check_finite(store: &ParamStore, grads: &ParamGrads) -> Result<()> {
    for (id, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at {} of {}",
                g.data()[i],
                i,
                store.get(id).name
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Moments {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    state: Moments,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            state: Moments::new(store),
        }
    }

    /// One update at rate `lr`. Parameters without a gradient see a zero
    /// gradient. Decay applies only to parameters flagged for it. On a
    /// non-finite gradient nothing is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        check_finite(store, grads)?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let k = id.index();
            let param = store.get_mut(id);
            let decay = if param.decay { self.weight_decay } else { 0.0 };
            let g = grads.get(id);
            let (m, v) = (self.state.m[k].data_mut(), self.state.v[k].data_mut());
            for (i, theta) in param.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let old = *theta;
                *theta = old - lr * decay * old - lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Adam with classic L2 regularization folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub t: u64,
    state: Moments,
}

impl Adam {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64, l2: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            l2,
            t: 0,
            state: Moments::new(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        check_finite(store, grads)?;
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id);
            let param = store.get_mut(id);
            let l2 = if param.decay { self.l2 } else { 0.0 };
            let values = param.value.data_mut();
            let m = self.state.m[k].data_mut();
            let v = self.state.v[k].data_mut();
            for i in 0..values.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]) + l2 * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                values[i] -= lr * (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    fn one(value: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::full(&[1], value), decay).unwrap();
        (s, id)
    }

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_step_by_hand() {
        let (mut s, id) = one(1.0, true);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::full(&[1], 1.0));
        let mut opt = AdamW::new(&s, &cfg(0.0));
        opt.step(&mut s, &g, 0.1).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).value.item() - want).abs() < 1e-15);
        assert!((s.get(id).value.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_and_pure_decay() {
        let (mut s, id) = one(2.0, true);
        let g = ParamGrads::new(1);
        AdamW::new(&s, &cfg(0.0)).step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.get(id).value.item(), 2.0);
        let mut opt = AdamW::new(&s, &cfg(0.05));
        opt.step(&mut s, &g, 0.1).unwrap();
        assert!((s.get(id).value.item() - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts() {
        let (mut s, id) = one(1.0, true);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::full(&[1], f64::NAN));
        let err = AdamW::new(&s, &cfg(0.0)).step(&mut s, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("theta")));
        assert_eq!(s.get(id).value.item(), 1.0);
    }

    #[test]
    fn schedule_boundaries() {
        let lr = 5e-4;
        assert!((lr_at(0, 100, 10, lr) - lr * 1e-6).abs() < 1e-20);
        assert_eq!(lr_at(10, 100, 10, lr), lr);
        assert!((lr_at(99, 100, 10, lr) - lr * 1e-2).abs() < 1e-12);
        // cosine phase spans steps 10..=99, midpoint at 54.5; use an even span
        let mid = lr_at(60, 111, 10, lr);
        assert!((mid - lr * (1e-2 + (1.0 - 1e-2) * 0.5)).abs() < 1e-12);
    }
}
