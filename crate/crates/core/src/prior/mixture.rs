//! Exact noise predictor for a Gaussian-mixture data distribution.
//!
//! When the clean data under condition c is a mixture of isotropic
//! Gaussians, the marginal at noise level t is again a mixture with means
//! `alpha * mu_k` and variances `alpha^2 s_k^2 + sigma^2`, so the score,
//! and with it the optimal noise prediction, has a closed form. This is
//! the oracle the UNet is checked against and the fast prior the trend
//! experiments run on.

use std::collections::HashMap;

use ndarray::Array3;

use super::{Condition, NoiseSchedule};
use crate::error::{Error, Result};

/// One isotropic Gaussian mode of the clean-data distribution.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub mean: Array3<f64>,
    pub std: f64,
    pub weight: f64,
}

/// Per-condition component lists. Weights are normalized on insert.
#[derive(Debug, Clone, Default)]
pub struct GaussianMixturePrior {
    components: HashMap<Condition, Vec<MixtureComponent>>,
}

impl GaussianMixturePrior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cond: Condition, comps: Vec<MixtureComponent>) -> Result<()> {
        if comps.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "condition {cond:?} has no mixture components"
            )));
        }
        let shape = comps[0].mean.dim();
        let mut total = 0.0;
        for c in &comps {
            if c.mean.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: comps[0].mean.shape().to_vec(),
                    got: c.mean.shape().to_vec(),
                });
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("mixture mean"));
            }
            if !c.std.is_finite() || c.std < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "component std must be finite and >= 0, got {}",
                    c.std
                )));
            }
            if !c.weight.is_finite() || c.weight <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "component weight must be positive, got {}",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let mut comps = comps;
        for c in &mut comps {
            c.weight /= total;
        }
        self.components.insert(cond, comps);
        Ok(())
    }

    pub fn components(&self, cond: Condition) -> Result<&[MixtureComponent]> {
        self.components
            .get(&cond)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCondition(format!("{cond:?}")))
    }

    pub fn conditions(&self) -> impl Iterator<Item = Condition> + '_ {
        self.components.keys().copied()
    }

    /// Shape of the component means, from any present condition.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.components.values().next().map(|c| c[0].mean.dim())
    }
}

/// Per-component log density contributions at `z_t`, before log-sum-exp.
/// Shared by the score and the marginal likelihood.
fn component_logliks(
    z_t: &Array3<f64>,
    a: f64,
    sg: f64,
    comps: &[MixtureComponent],
) -> (Vec<f64>, Vec<f64>) {
    let d = z_t.len() as f64;
    let mut logliks = Vec::with_capacity(comps.len());
    let mut variances = Vec::with_capacity(comps.len());
    for c in comps {
        let v = a * a * c.std * c.std + sg * sg;
        let mut q = 0.0;
        for (z, m) in z_t.iter().zip(c.mean.iter()) {
            let diff = z - a * m;
            q += diff * diff;
        }
        logliks.push(c.weight.ln() - 0.5 * d * (std::f64::consts::TAU * v).ln() - 0.5 * q / v);
        variances.push(v);
    }
    (logliks, variances)
}

/// Log marginal density log p(z_t | cond) of the noised mixture.
pub fn log_marginal(
    z_t: &Array3<f64>,
    t: usize,
    cond: Condition,
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let comps = prior.components(cond)?;
    let (logliks, _) = component_logliks(z_t, sched.alpha(t), sched.sigma(t), comps);
    let peak = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logliks.iter().map(|l| (l - peak).exp()).sum();
    Ok(peak + sum.ln())
}

/// Optimal noise prediction `-sigma(t) * grad_z log p(z_t | cond)`.
///
/// At t = 0 the marginal is the clean distribution and there is no noise
/// to predict; sigma below 1e-12 returns zeros rather than dividing by a
/// vanishing variance.
pub fn analytic_eps(
    z_t: &Array3<f64>,
    t: usize,
    cond: Condition,
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
) -> Result<Array3<f64>> {
    let comps = prior.components(cond)?;
    let (a, sg) = (sched.alpha(t), sched.sigma(t));
    if sg < 1e-12 {
        return Ok(Array3::zeros(z_t.dim()));
    }
    let (logliks, variances) = component_logliks(z_t, a, sg, comps);
    let peak = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = logliks.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = resp.iter().sum();
    for r in &mut resp {
        *r /= total;
    }
    let mut out = Array3::zeros(z_t.dim());
    for ((c, r), v) in comps.iter().zip(&resp).zip(&variances) {
        let coef = sg * r / v;
        ndarray::Zip::from(&mut out)
            .and(z_t)
            .and(&c.mean)
            .for_each(|o, &z, &m| *o += coef * (z - a * m));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::prior::{forward_diffuse, make_cosine_schedule};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn delta_prior(mean: Array3<f64>) -> GaussianMixturePrior {
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean,
                    std: 0.0,
                    weight: 1.0,
                }],
            )
            .unwrap();
        prior
    }

    #[test]
    fn delta_component_score_is_gaussian_whitening() {
        let sched = make_cosine_schedule(1000).unwrap();
        let mu = random_image((1, 4, 4), 0);
        let prior = delta_prior(mu.clone());
        let z = random_image((1, 4, 4), 1);
        let t = 500;
        let eps_hat = analytic_eps(&z, t, Condition::Prompt(0), &prior, &sched).unwrap();
        let (a, sg) = (sched.alpha(t), sched.sigma(t));
        for ((e, z), m) in eps_hat.iter().zip(z.iter()).zip(mu.iter()) {
            assert_abs_diff_eq!(*e, (z - a * m) / sg, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_modes_cancel_at_origin() {
        let sched = make_cosine_schedule(1000).unwrap();
        let mu = random_image((1, 3, 3), 2);
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![
                    MixtureComponent {
                        mean: mu.clone(),
                        std: 0.1,
                        weight: 0.5,
                    },
                    MixtureComponent {
                        mean: mu.mapv(|v| -v),
                        std: 0.1,
                        weight: 0.5,
                    },
                ],
            )
            .unwrap();
        let z = Array3::zeros((1, 3, 3));
        let eps_hat = analytic_eps(&z, 300, Condition::Prompt(0), &prior, &sched).unwrap();
        for e in eps_hat.iter() {
            assert_abs_diff_eq!(*e, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn recovers_noise_fed_through_forward_diffuse() {
        let sched = make_cosine_schedule(1000).unwrap();
        let mu = random_image((2, 4, 4), 3);
        let prior = delta_prior(mu.clone());
        let eps = random_image((2, 4, 4), 4);
        let t = 400;
        let z = forward_diffuse(&mu, t, &eps, &sched).unwrap();
        let eps_hat = analytic_eps(&z, t, Condition::Prompt(0), &prior, &sched).unwrap();
        for (a, b) in eps_hat.iter().zip(eps.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn prediction_is_scaled_negative_score() {
        // Central finite differences of -sigma * log p must reproduce
        // every entry of the prediction.
        let sched = make_cosine_schedule(1000).unwrap();
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![
                    MixtureComponent {
                        mean: random_image((1, 2, 2), 5),
                        std: 0.4,
                        weight: 0.3,
                    },
                    MixtureComponent {
                        mean: random_image((1, 2, 2), 6),
                        std: 0.0,
                        weight: 0.7,
                    },
                ],
            )
            .unwrap();
        let z = random_image((1, 2, 2), 7);
        let t = 350;
        let eps_hat = analytic_eps(&z, t, Condition::Prompt(0), &prior, &sched).unwrap();
        let flat: Vec<f64> = z.iter().copied().collect();
        let f = |v: &[f64]| {
            let zp = Array3::from_shape_vec(z.dim(), v.to_vec()).unwrap();
            -sched.sigma(t) * log_marginal(&zp, t, Condition::Prompt(0), &prior, &sched).unwrap()
        };
        let fd = oracle::fd_gradient(f, &flat, 1e-5);
        let got: Vec<f64> = eps_hat.iter().copied().collect();
        assert!(oracle::max_rel_err(&got, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn far_inputs_stay_finite() {
        let sched = make_cosine_schedule(1000).unwrap();
        let prior = delta_prior(random_image((1, 4, 4), 8));
        let z = Array3::from_elem((1, 4, 4), 1e3);
        let eps_hat = analytic_eps(&z, 600, Condition::Prompt(0), &prior, &sched).unwrap();
        assert!(eps_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clean_endpoint_predicts_zero() {
        let sched = make_cosine_schedule(1000).unwrap();
        let prior = delta_prior(random_image((1, 4, 4), 9));
        let z = random_image((1, 4, 4), 10);
        let eps_hat = analytic_eps(&z, 0, Condition::Prompt(0), &prior, &sched).unwrap();
        assert!(eps_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_condition_is_rejected() {
        let sched = make_cosine_schedule(100).unwrap();
        let prior = delta_prior(random_image((1, 2, 2), 11));
        let z = Array3::zeros((1, 2, 2));
        assert!(matches!(
            analytic_eps(&z, 50, Condition::Negative, &prior, &sched),
            Err(Error::UnknownCondition(_))
        ));
    }

    #[test]
    fn insert_validates_components() {
        let mut prior = GaussianMixturePrior::new();
        assert!(prior.insert(Condition::Prompt(0), vec![]).is_err());
        let mean = Array3::zeros((1, 2, 2));
        assert!(prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean: mean.clone(),
                    std: -0.1,
                    weight: 1.0,
                }],
            )
            .is_err());
        assert!(prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean: mean.clone(),
                    std: 0.1,
                    weight: 0.4,
                }],
            )
            .is_err());
        // Mismatched component shapes.
        assert!(prior
            .insert(
                Condition::Prompt(0),
                vec![
                    MixtureComponent {
                        mean: mean.clone(),
                        std: 0.1,
                        weight: 0.5,
                    },
                    MixtureComponent {
                        mean: Array3::zeros((1, 2, 3)),
                        std: 0.1,
                        weight: 0.5,
                    },
                ],
            )
            .is_err());
        assert!(prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean,
                    std: 0.1,
                    weight: 1.0,
                }],
            )
            .is_ok());
    }

    #[test]
    fn guidance_composition_with_zero_weight_is_conditional() {
        let sched = make_cosine_schedule(1000).unwrap();
        let mut prior = delta_prior(random_image((1, 4, 4), 12));
        prior
            .insert(
                Condition::Unconditioned,
                vec![MixtureComponent {
                    mean: Array3::zeros((1, 4, 4)),
                    std: 0.5,
                    weight: 1.0,
                }],
            )
            .unwrap();
        let z = random_image((1, 4, 4), 13);
        let e_c = analytic_eps(&z, 500, Condition::Prompt(0), &prior, &sched).unwrap();
        let e_u = analytic_eps(&z, 500, Condition::Unconditioned, &prior, &sched).unwrap();
        let pair = crate::guidance::ScorePair::new(e_c.clone(), e_u).unwrap();
        assert_eq!(crate::guidance::cfg_combine(&pair, 0.0), e_c);
    }
}
