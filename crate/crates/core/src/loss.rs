//! Label-smoothed targets and the matching cross entropy.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(1-eps)·onehot + eps/K` for each label, as `[B×K]`.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(alloc::format!("label smoothing {eps} outside [0, 1)")));
    }
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &l in labels {
        if l >= classes {
            return Err(Error::Index {
                index: l,
                bound: classes,
            });
        }
        data.extend((0..classes).map(|k| eps / classes as f64 + if k == l { 1.0 - eps } else { 0.0 }));
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Mean over the batch of `-Σ target·log softmax(logits)`.
pub fn smoothed_cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let k = *g.shape(logits).last().unwrap_or(&0);
    let t = smoothed_targets(labels, k, eps)?;
    g.soft_cross_entropy(logits, &t)
}

/// `lam·a + (1-lam)·b`, elementwise.
pub fn mix_targets(a: &Tensor, b: &Tensor, lam: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mix_targets", a.shape(), b.shape()));
    }
    Ok(Tensor::from_fn(a.shape(), |i| lam * a.data()[i] + (1.0 - lam) * b.data()[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;

    #[test]
    fn smoothing_values() {
        let t = smoothed_targets(&[3], 10, 0.1).unwrap();
        assert!((t.data()[3] - 0.91).abs() < 1e-15);
        assert!((t.data()[0] - 0.01).abs() < 1e-15);
        assert!(matches!(smoothed_targets(&[10], 10, 0.1), Err(Error::Index { .. })));
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[4, 10]));
        let loss = smoothed_cross_entropy(&mut g, l, &[0, 3, 5, 9], 0.0).unwrap();
        assert!((g.value(loss).item() - libm::log(10.0)).abs() < 1e-14);
    }

    #[test]
    fn smoothed_ce_gradcheck() {
        let logits = Tensor::from_fn(&[3, 5], |i| libm::sin(i as f64 * 1.7));
        let e = gradcheck(|g, v| smoothed_cross_entropy(g, v, &[0, 4, 2], 0.1), &logits, 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }
}
