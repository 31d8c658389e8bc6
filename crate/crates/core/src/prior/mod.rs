//! Diffusion priors: the noise schedule, an exact Gaussian-mixture noise
//! predictor, and a tiny trainable UNet denoiser.
//!
//! The two predictors are interchangeable behind the same `(z_t, t, cond)`
//! signature. The mixture prior is closed-form and serves as the oracle
//! the UNet is trained toward; the UNet exists to give FreeU real decoder
//! stages to act on.

mod mixture;
mod train;
mod unet;

pub use mixture::{analytic_eps, log_marginal, GaussianMixturePrior, MixtureComponent};
pub use train::{train_denoiser, TrainConfig};
pub use unet::{load_checkpoint, open_checkpoint, save_checkpoint, unet_eps, TinyUNet};

use ndarray::Array3;

use crate::error::{Error, Result};

/// Conditioning signal for a noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// A learned prompt embedding, indexed from 0.
    Prompt(usize),
    /// The learned negative-prompt embedding.
    Negative,
    /// The fixed all-zero embedding.
    Unconditioned,
}

/// Variance-preserving schedule: `alpha(t)^2 + sigma(t)^2 = 1` with alpha
/// falling monotonically from 1 at t = 0.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit coefficient tables, checking the
    /// variance-preserving identity and monotonicity.
    pub fn from_parts(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() != sigma.len() || alpha.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need matching alpha/sigma tables of length >= 2, got {} and {}",
                alpha.len(),
                sigma.len()
            )));
        }
        for (t, (a, s)) in alpha.iter().zip(&sigma).enumerate() {
            if (a * a + s * s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSchedule(format!(
                    "alpha^2 + sigma^2 = {} at t={t}, not 1",
                    a * a + s * s
                )));
            }
            if *s < 0.0 {
                return Err(Error::InvalidSchedule(format!("sigma({t}) = {s} < 0")));
            }
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidSchedule("alpha must be nonincreasing".into()));
        }
        if (alpha[0] - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidSchedule(format!(
                "alpha(0) = {}, expected ~1",
                alpha[0]
            )));
        }
        Ok(NoiseSchedule { alpha, sigma })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }
}

/// Squared-cosine schedule with the usual 0.008 offset, normalized so
/// t = 0 is exactly (alpha, sigma) = (1, 0).
pub fn make_cosine_schedule(t_count: usize) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::InvalidSchedule(format!(
            "schedule length {t_count} below 2"
        )));
    }
    let s = 0.008;
    let f = |u: f64| {
        let x = (u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos() * x.cos()
    };
    let f0 = f(0.0);
    let mut alpha = Vec::with_capacity(t_count);
    let mut sigma = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let u = t as f64 / (t_count - 1) as f64;
        let abar = (f(u) / f0).clamp(0.0, 1.0);
        alpha.push(abar.sqrt());
        sigma.push((1.0 - abar).sqrt());
    }
    NoiseSchedule::from_parts(alpha, sigma)
}

/// `z_t = alpha(t) * x + sigma(t) * eps`.
pub fn forward_diffuse(
    x: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    sched: &NoiseSchedule,
) -> Result<Array3<f64>> {
    if x.dim() != eps.dim() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let mut out = x.mapv(|v| a * v);
    out.zip_mut_with(eps, |o, &e| *o += s * e);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_endpoints() {
        let sched = make_cosine_schedule(1000).unwrap();
        assert_eq!(sched.alpha(0), 1.0);
        assert_eq!(sched.sigma(0), 0.0);
        assert!(sched.sigma(999) > sched.alpha(999));
    }

    #[test]
    fn cosine_schedule_rejects_short_tables() {
        assert!(make_cosine_schedule(1).is_err());
    }

    #[test]
    fn from_parts_validates() {
        assert!(NoiseSchedule::from_parts(vec![1.0, 0.5], vec![0.0, 0.75f64.sqrt()]).is_ok());
        // Violates the variance-preserving identity.
        assert!(NoiseSchedule::from_parts(vec![1.0, 0.9], vec![0.0, 0.9]).is_err());
        // Alpha rises.
        assert!(
            NoiseSchedule::from_parts(vec![1.0, 0.5, 0.6], vec![0.0, 0.75f64.sqrt(), 0.8]).is_err()
        );
        // Starts away from 1.
        assert!(
            NoiseSchedule::from_parts(vec![0.5, 0.4], vec![0.75f64.sqrt(), 0.84f64.sqrt()])
                .is_err()
        );
    }

    #[test]
    fn diffuse_with_zero_noise_scales_signal() {
        let sched = make_cosine_schedule(100).unwrap();
        let x = Array3::from_elem((1, 2, 2), 2.0);
        let eps = Array3::zeros((1, 2, 2));
        let z = forward_diffuse(&x, 40, &eps, &sched).unwrap();
        for v in z.iter() {
            assert_eq!(*v, sched.alpha(40) * 2.0);
        }
    }

    #[test]
    fn diffuse_at_zero_is_identity() {
        let sched = make_cosine_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let eps = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let z = forward_diffuse(&x, 0, &eps, &sched).unwrap();
        for (a, b) in z.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn diffuse_hand_value() {
        let sched = NoiseSchedule::from_parts(vec![1.0, 0.5], vec![0.0, 0.75f64.sqrt()]).unwrap();
        let x = Array3::from_elem((1, 1, 1), 1.0);
        let eps = Array3::from_elem((1, 1, 1), 2.0);
        let z = forward_diffuse(&x, 1, &eps, &sched).unwrap();
        assert_abs_diff_eq!(z[[0, 0, 0]], 0.5 + 2.0 * 0.75f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn diffuse_rejects_shape_mismatch() {
        let sched = make_cosine_schedule(10).unwrap();
        let x = Array3::zeros((1, 2, 2));
        let eps = Array3::zeros((1, 2, 3));
        assert!(forward_diffuse(&x, 1, &eps, &sched).is_err());
    }

    proptest! {
        #[test]
        fn schedules_preserve_variance(t_count in prop::sample::select(vec![50usize, 200, 1000])) {
            let sched = make_cosine_schedule(t_count).unwrap();
            for t in 0..t_count {
                let (a, s) = (sched.alpha(t), sched.sigma(t));
                prop_assert!((a * a + s * s - 1.0).abs() < 1e-9);
                if t > 0 {
                    prop_assert!(a <= sched.alpha(t - 1));
                }
            }
        }
    }
}
