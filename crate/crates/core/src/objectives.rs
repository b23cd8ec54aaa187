//! Training objective and reconstruction metrics.
//!
//! ```text
//! total = l2 * L2 + charbonnier * Char + commit * Commit + vq * VQ
//!       + gan * GAN + perceptual * Percept
//! ```
//!
//! The adversarial and perceptual terms need networks this crate does not
//! ship; they are [`AuxLoss`] hooks that contribute zero unless supplied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub charbonnier: f64,
    pub commit: f64,
    pub vq: f64,
    pub gan: f64,
    pub perceptual: f64,
    /// Charbonnier smoothing constant.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 2.0,
            charbonnier: 1.0,
            commit: 0.25,
            vq: 1.0,
            gan: 0.5,
            perceptual: 1.0,
            eps: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            l2: 0.0,
            charbonnier: 0.0,
            commit: 0.0,
            vq: 0.0,
            gan: 0.0,
            perceptual: 0.0,
            eps: 1e-3,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.l2,
            self.charbonnier,
            self.commit,
            self.vq,
            self.gan,
            self.perceptual,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self
            .as_array()
            .iter()
            .find(|w| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative, got {w}"
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid(format!(
                "Charbonnier epsilon must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Term values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub charbonnier: f64,
    pub commit: f64,
    pub vq: f64,
    pub gan: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.l2,
            self.charbonnier,
            self.commit,
            self.vq,
            self.gan,
            self.perceptual,
        ]
    }

    /// The weighted sum recomputed in `f64` from the stored terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.terms()
            .iter()
            .zip(w.as_array())
            .map(|(t, w)| t * w)
            .sum()
    }
}

/// A scalar loss of (reconstruction, target) supplied from outside the crate.
pub trait AuxLoss<T: Real>: Send + Sync {
    fn loss(&self, recon: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>>;
}

pub struct LossHooks<'a, T: Real> {
    pub gan: Option<&'a dyn AuxLoss<T>>,
    pub perceptual: Option<&'a dyn AuxLoss<T>>,
}

impl<T: Real> Default for LossHooks<'_, T> {
    fn default() -> Self {
        Self {
            gan: None,
            perceptual: None,
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of `sqrt((recon - target)^2 + eps^2)`.
pub fn charbonnier<T: Real>(recon: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    same_shape("charbonnier", recon, target)?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!(
            "Charbonnier epsilon must be > 0, got {eps}"
        )));
    }
    let floor = Tensor::full(recon.shape(), T::from_f64(eps * eps))?;
    recon.sub(target)?.square()?.add(&floor)?.sqrt()?.mean()
}

pub fn l2_loss<T: Real>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("l2", recon, target)?;
    recon.sub(target)?.square()?.mean()
}

/// Mean squared error pulling `z` toward a frozen `z_q`.
pub fn commit_loss<T: Real>(z: &Tensor<T>, z_q: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("commit", z, z_q)?;
    z.sub(&z_q.detach())?.square()?.mean()
}

/// Mean squared error pulling the selected codebook rows toward a frozen `z`.
pub fn vq_loss<T: Real>(z: &Tensor<T>, z_q: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("vq", z, z_q)?;
    z.detach().sub(z_q)?.square()?.mean()
}

/// Evaluates every term, returning the differentiable total and the values.
pub fn total_loss<T: Real>(
    recon: &Tensor<T>,
    target: &Tensor<T>,
    z: &Tensor<T>,
    z_q: &Tensor<T>,
    weights: &LossWeights,
    hooks: &LossHooks<'_, T>,
) -> Result<(Tensor<T>, LossBreakdown)> {
    weights.validate()?;
    let zero = || Tensor::scalar(T::ZERO);
    let hook = |h: Option<&dyn AuxLoss<T>>| -> Result<Tensor<T>> {
        match h {
            Some(h) => {
                let v = h.loss(recon, target)?;
                if v.numel() != 1 {
                    return Err(Error::NonScalarLoss(v.shape().to_vec()));
                }
                v.reshape(&[1])
            }
            None => Ok(zero()),
        }
    };
    let terms = [
        l2_loss(recon, target)?,
        charbonnier(recon, target, weights.eps)?,
        commit_loss(z, z_q)?,
        vq_loss(z, z_q)?,
        hook(hooks.gan)?,
        hook(hooks.perceptual)?,
    ];
    let mut total: Option<Tensor<T>> = None;
    for (t, w) in terms.iter().zip(weights.as_array()) {
        let scaled = t.scale(w)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => acc.add(&scaled)?,
        });
    }
    let total = total.expect("six terms");
    let v: Vec<f64> = terms.iter().map(|t| t.item()).collect::<Result<_>>()?;
    let breakdown = LossBreakdown {
        l2: v[0],
        charbonnier: v[1],
        commit: v[2],
        vq: v[3],
        gan: v[4],
        perceptual: v[5],
        total: total.item()?,
    };
    Ok((total, breakdown))
}

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn gray<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::invalid(format!(
            "ssim expects an H x W x C image, got {:?}",
            img.shape()
        )));
    };
    let g = img
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, g))
}

/// Mean SSIM over non-overlapping 8x8 windows of the channel-mean image.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, ga) = gray(a)?;
    let (_, _, gb) = gray(b)?;
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::invalid(format!(
            "ssim needs at least {win}x{win} pixels, image is {h}x{w}"
        )));
    }
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in (0..=h - win).step_by(win) {
        for wx in (0..=w - win).step_by(win) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in wy..wy + win {
                for x in wx..wx + win {
                    sa += ga[y * w + x];
                    sb += gb[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in wy..wy + win {
                for x in wx..wx + win {
                    let da = ga[y * w + x] - ma;
                    let db = gb[y * w + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::backward;

    fn filled(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v).unwrap()
    }

    #[test]
    fn charbonnier_examples() {
        let x = filled(&[2, 3], 0.3);
        assert_eq!(charbonnier(&x, &x, 0.25).unwrap().item().unwrap(), 0.25);
        let a = filled(&[4], 4.0);
        let b = filled(&[4], 0.0);
        assert_eq!(charbonnier(&a, &b, 3.0).unwrap().item().unwrap(), 5.0);
        let c = filled(&[5], 0.5);
        let zero5 = filled(&[5], 0.0);
        let v = charbonnier(&c, &zero5, 1e-8).unwrap().item().unwrap();
        assert!((v - 0.5).abs() < 1e-6);
        assert!(charbonnier(&a, &c, 1e-3).is_err());
        assert!(charbonnier(&a, &b, 0.0).is_err());
    }

    #[test]
    fn l2_examples() {
        let x = filled(&[3, 2], 0.75);
        assert_eq!(l2_loss(&x, &x).unwrap().item().unwrap(), 0.0);
        let y = filled(&[3, 2], 0.25);
        assert_eq!(l2_loss(&x, &y).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn commit_and_vq_targets() {
        let z = Tensor::<f64>::param(&[2, 2], vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let zq = Tensor::<f64>::param(&[2, 2], vec![0.25, 0.25, 0.5, 0.5]).unwrap();
        let c = commit_loss(&z, &zq).unwrap();
        let v = vq_loss(&z, &zq).unwrap();
        assert_eq!(c.item().unwrap(), v.item().unwrap());

        backward(&c).unwrap();
        let gz = z.grad().unwrap();
        for i in 0..4 {
            let expect = 2.0 * (z.data()[i] - zq.data()[i]) / 4.0;
            assert!((gz[i] - expect).abs() < 1e-15);
        }
        assert!(zq.grad().is_none());
        z.zero_grad();

        backward(&v).unwrap();
        assert!(z.grad().is_none());
        let gq = zq.grad().unwrap();
        for i in 0..4 {
            let expect = 2.0 * (zq.data()[i] - z.data()[i]) / 4.0;
            assert!((gq[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn commit_zero_when_equal() {
        let z = Tensor::<f64>::param(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let c = commit_loss(&z, &z.detach()).unwrap();
        assert_eq!(c.item().unwrap(), 0.0);
        backward(&c).unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn total_of_perfect_reconstruction_is_charbonnier_floor() {
        let x = filled(&[4, 4, 3], 0.4);
        let z = filled(&[1, 1, 8], 0.1);
        let w = LossWeights::default();
        let (_, b) = total_loss(&x, &x, &z, &z, &w, &LossHooks::default()).unwrap();
        assert!((b.total - w.charbonnier * w.eps).abs() < 1e-15);
        let (_, b) =
            total_loss(&x, &x, &z, &z, &LossWeights::zero(), &LossHooks::default()).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let x = filled(&[2], 0.4);
        let w = LossWeights {
            vq: -1.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&x, &x, &x, &x, &w, &LossHooks::default()).is_err());
    }

    struct Const(f64);
    impl AuxLoss<f64> for Const {
        fn loss(&self, _: &Tensor<f64>, _: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(Tensor::scalar(self.0))
        }
    }

    #[test]
    fn hooks_enter_weighted_sum() {
        let x = filled(&[2], 0.4);
        let gan = Const(3.0);
        let per = Const(5.0);
        let hooks = LossHooks {
            gan: Some(&gan),
            perceptual: Some(&per),
        };
        let w = LossWeights::default();
        let (_, b) = total_loss(&x, &x, &x, &x, &w, &hooks).unwrap();
        assert_eq!(b.gan, 3.0);
        assert_eq!(b.perceptual, 5.0);
        assert!((b.total - (w.eps + 0.5 * 3.0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = filled(&[2, 2, 3], 0.0);
        let b = filled(&[2, 2, 3], 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        let c = filled(&[2, 2, 3], 0.5);
        assert!((psnr(&a, &c).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&a, &filled(&[2, 2, 1], 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = filled(&[16, 8, 3], 0.5);
        let z = filled(&[16, 8, 3], 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let expect = 1e-4 / (0.25 + 1e-4);
        assert!((ssim(&a, &z).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 3.998e-4).abs() < 1e-7);
        let ramp =
            Tensor::<f64>::new(&[8, 8, 3], (0..192).map(|i| i as f64 / 192.0).collect()).unwrap();
        assert!((ssim(&ramp, &ramp).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&filled(&[4, 8, 3], 0.0), &filled(&[4, 8, 3], 0.0)).is_err());
    }
}
