//! Denoising score-matching training for the tiny UNet.
//!
//! Plain stochastic training: one example per step, uniform timestep,
//! fresh standard-normal noise, unit loss weighting, AdamW on all
//! parameters. The loop is deterministic given the seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{forward_diffuse, Condition, NoiseSchedule, TinyUNet};
use crate::error::{Error, Result};
use crate::sds::{adamw_step, AdamWState};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains `net` on `(condition, clean image)` pairs and returns the
/// per-step loss trace (mean squared noise-prediction error).
pub fn train_denoiser(
    net: &mut TinyUNet,
    dataset: &[(Condition, Array3<f64>)],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;
    let mut params = net.params_flat();
    let mut opt = AdamWState::new(params.len());
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let (cond, x) = &dataset[rng.random_range(0..dataset.len())];
        let t = rng.random_range(0..sched.len());
        let eps = Array3::from_shape_fn(x.dim(), |_| normal.sample(&mut rng));
        let z = forward_diffuse(x, t, &eps, sched)?;
        let pred = net.forward(&z, t, *cond, None)?;
        let n = pred.len() as f64;
        let mut loss = 0.0;
        let mut dy = pred.clone();
        dy.zip_mut_with(&eps, |p, &e| {
            let r = *p - e;
            loss += r * r;
            *p = 2.0 * r / n;
        });
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        net.zero_grads();
        net.backward(&dy)?;
        let grads = net.grads_flat();
        adamw_step(&mut params, &grads, &mut opt, cfg.lr, cfg.weight_decay)?;
        net.set_params_flat(&params)?;
        trace.push(loss);
    }
    Ok(trace)
}
