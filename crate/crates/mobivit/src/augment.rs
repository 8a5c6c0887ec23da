//! Batch-level mixup and cutmix. Each image is paired with its mirror in
//! the batch (`i` with `B-1-i`), as in the reference DeiT pipeline.

use mobivit_core::{Error as CoreError, Tensor};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    None,
    Mixup,
    Cutmix,
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub images: Tensor,
    pub targets: Tensor,
    /// Weight of each image's own target.
    pub lam: f64,
    pub kind: MixKind,
    pub rect: Option<Rect>,
}

fn check(images: &Tensor, targets: &Tensor) -> Result<usize> {
    let b = images.shape().first().copied().unwrap_or(0);
    if images.ndim() != 4 || targets.ndim() != 2 || targets.shape()[0] != b {
        return Err(CoreError::Dimension {
            op: "mixup_cutmix",
            lhs: images.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    if b < 2 {
        return Err(CliError::Config(format!("mixing needs a batch of at least 2, got {b}")));
    }
    Ok(b)
}

fn blend(t: &Tensor, lam: f64) -> Tensor {
    let b = t.shape()[0];
    let per = t.numel() / b;
    let d = t.data();
    Tensor::from_fn(t.shape(), |j| {
        let (i, k) = (j / per, j % per);
        lam * d[j] + (1.0 - lam) * d[(b - 1 - i) * per + k]
    })
}

/// `lam·x_i + (1-lam)·x_{B-1-i}` for images and targets alike.
pub fn mixup(images: &Tensor, targets: &Tensor, lam: f64) -> Result<Mixed> {
    check(images, targets)?;
    Ok(Mixed {
        images: blend(images, lam),
        targets: blend(targets, lam),
        lam,
        kind: MixKind::Mixup,
        rect: None,
    })
}

/// Box of area about `(1-lam)·H·W` centred uniformly, clipped to the image.
pub fn cutmix_rect<R: Rng>(lam: f64, h: usize, w: usize, rng: &mut R) -> Rect {
    let cut = (1.0 - lam).max(0.0).sqrt();
    let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    Rect {
        y0: cy.saturating_sub(ch / 2),
        y1: (cy + ch / 2).min(h),
        x0: cx.saturating_sub(cw / 2),
        x1: (cx + cw / 2).min(w),
    }
}

/// Pastes `rect` from each partner image; the target weight is the exact
/// fraction of pixels not pasted.
pub fn cutmix(images: &Tensor, targets: &Tensor, rect: Rect) -> Result<Mixed> {
    let b = check(images, targets)?;
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    if rect.y1 > h || rect.x1 > w || rect.y0 > rect.y1 || rect.x0 > rect.x1 {
        return Err(CliError::Config(format!("cutmix box {rect:?} outside {h}x{w}")));
    }
    let per = c * h * w;
    let d = images.data();
    let out = Tensor::from_fn(s, |j| {
        let (i, k) = (j / per, j % per);
        if rect.contains(k / w % h, k % w) {
            d[(b - 1 - i) * per + k]
        } else {
            d[j]
        }
    });
    let lam = 1.0 - rect.area() as f64 / (h * w) as f64;
    Ok(Mixed {
        images: out,
        targets: blend(targets, lam),
        lam,
        kind: MixKind::Cutmix,
        rect: Some(rect),
    })
}

/// Draws one of mixup/cutmix (uniformly when both alphas are positive) and
/// `lam ~ Beta(alpha, alpha)`. Zero alphas disable the respective method.
pub fn mixup_cutmix<R: Rng>(
    images: &Tensor,
    targets: &Tensor,
    mixup_alpha: f64,
    cutmix_alpha: f64,
    rng: &mut R,
) -> Result<Mixed> {
    check(images, targets)?;
    let kind = match (mixup_alpha > 0.0, cutmix_alpha > 0.0) {
        (false, false) => {
            return Ok(Mixed {
                images: images.clone(),
                targets: targets.clone(),
                lam: 1.0,
                kind: MixKind::None,
                rect: None,
            })
        }
        (true, false) => MixKind::Mixup,
        (false, true) => MixKind::Cutmix,
        (true, true) => {
            if rng.random::<bool>() {
                MixKind::Cutmix
            } else {
                MixKind::Mixup
            }
        }
    };
    let alpha = if kind == MixKind::Mixup { mixup_alpha } else { cutmix_alpha };
    let beta = Beta::new(alpha, alpha).map_err(|e| CliError::Config(format!("beta({alpha}): {e}")))?;
    let lam: f64 = beta.sample(rng);
    if kind == MixKind::Mixup {
        mixup(images, targets, lam)
    } else {
        let s = images.shape();
        let rect = cutmix_rect(lam, s[2], s[3], rng);
        cutmix(images, targets, rect)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mobivit_core::loss::smoothed_targets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> (Tensor, Tensor) {
        let x = Tensor::from_fn(&[4, 3, 8, 8], |i| (i % 29) as f64 / 29.0);
        let t = smoothed_targets(&[0, 1, 2, 3], 5, 0.1).unwrap();
        (x, t)
    }

    #[test]
    fn lam_one_is_identity() {
        let (x, t) = batch();
        let m = mixup(&x, &t, 1.0).unwrap();
        assert_eq!((m.images, m.targets), (x, t));
    }

    #[test]
    fn mixup_half_is_midpoint() {
        let (x, t) = batch();
        let m = mixup(&x, &t, 0.5).unwrap();
        let per = 3 * 64;
        for j in 0..per {
            let want = (x.data()[j] + x.data()[3 * per + j]) / 2.0;
            assert!((m.images.data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cutmix_lam_is_pasted_pixel_fraction() {
        let (x, t) = batch();
        // distinct partner values make pasted pixels countable
        let x = Tensor::from_fn(x.shape(), |j| (j / 192) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let m = mixup_cutmix(&x, &t, 0.0, 1.0, &mut rng).unwrap();
            assert_eq!(m.kind, MixKind::Cutmix);
            let pasted = m.images.data()[..64].iter().filter(|&&v| v != 0.0).count();
            assert_eq!(1.0 - pasted as f64 / 64.0, m.lam);
        }
    }

    #[test]
    fn mixed_targets_stay_distributions() {
        let (x, t) = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = mixup_cutmix(&x, &t, 0.8, 1.0, &mut rng).unwrap();
            for row in m.targets.data().chunks(5) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(mixup(&x.index_first(0).unwrap().reshape(&[1, 3, 8, 8]).unwrap(), &t.index_first(0).unwrap().reshape(&[1, 5]).unwrap(), 0.5).is_err());
    }
}
