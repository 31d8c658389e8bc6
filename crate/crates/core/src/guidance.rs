//! Classifier-free guidance combinators.
//!
//! All three operations are score-space arithmetic on a conditional
//! prediction and a reference prediction (unconditional or negative
//! prompt). They are pure and shape-preserving; the rescale variant
//! additionally repairs the variance inflation that large weights cause.

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// How the engine combines the two noise predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Conditional prediction used as-is.
    Off,
    /// `(1 + w) * conditional - w * unconditional`.
    Classic,
    /// `negative + w * (positive - negative)`.
    NegativePrompt,
}

/// Axes over which Rescale-CFG measures standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleAxes {
    /// Per channel, over spatial positions. Matches the over-exposure
    /// rationale: brightness lives per channel.
    Channel,
    /// One statistic over the whole tensor.
    Global,
}

/// Static guidance settings; the weight may be overridden per iteration
/// by the dynamic schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceParams {
    pub mode: GuidanceMode,
    pub weight: f64,
    pub rescale_enabled: bool,
    pub rescale_phi: f64,
    pub rescale_axes: RescaleAxes,
}

impl GuidanceParams {
    pub fn new(
        mode: GuidanceMode,
        weight: f64,
        rescale_enabled: bool,
        rescale_phi: f64,
        rescale_axes: RescaleAxes,
    ) -> Result<Self> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "guidance weight must be finite and >= 0, got {weight}"
            )));
        }
        if !(0.0..=1.0).contains(&rescale_phi) {
            return Err(Error::InvalidParameter(format!(
                "rescale_phi must lie in [0, 1], got {rescale_phi}"
            )));
        }
        Ok(GuidanceParams {
            mode,
            weight,
            rescale_enabled,
            rescale_phi,
            rescale_axes,
        })
    }
}

/// A conditional prediction and its reference, shape-checked on
/// construction.
#[derive(Debug, Clone)]
pub struct ScorePair {
    pub primary: Array3<f64>,
    pub reference: Array3<f64>,
}

impl ScorePair {
    pub fn new(primary: Array3<f64>, reference: Array3<f64>) -> Result<Self> {
        if primary.dim() != reference.dim() {
            return Err(Error::ShapeMismatch {
                expected: primary.shape().to_vec(),
                got: reference.shape().to_vec(),
            });
        }
        if !primary
            .iter()
            .chain(reference.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("guidance score pair"));
        }
        Ok(ScorePair { primary, reference })
    }
}

/// `(1 + omega) * primary - omega * reference`, elementwise.
pub fn cfg_combine(pair: &ScorePair, omega: f64) -> Array3<f64> {
    let mut out = pair.primary.mapv(|v| (1.0 + omega) * v);
    out.zip_mut_with(&pair.reference, |o, &r| *o -= omega * r);
    out
}

/// `reference + w * (primary - reference)`, elementwise. The collapse
/// points w = 0 and w = 1 return the respective input bitwise.
pub fn cfg_negative(pair: &ScorePair, w: f64) -> Array3<f64> {
    if w == 0.0 {
        return pair.reference.clone();
    }
    if w == 1.0 {
        return pair.primary.clone();
    }
    let mut out = pair.primary.clone();
    out.zip_mut_with(&pair.reference, |o, &r| *o = r + w * (*o - r));
    out
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Rescale-CFG: shrinks `x_cfg` so its standard deviation matches the
/// positive branch, then blends by `phi`. Written as
/// `x_cfg + phi * (x_cfg * sigma_pos / sigma_cfg - x_cfg)` so phi = 0 and
/// a unit ratio are exact no-ops.
///
/// Channels of `x_cfg` with standard deviation below 1e-12 pass through
/// unrescaled; a constant channel carries no contrast to renormalize.
pub fn rescale_cfg_axes(
    x_pos: &Array3<f64>,
    x_cfg: &Array3<f64>,
    phi: f64,
    axes: RescaleAxes,
) -> Result<Array3<f64>> {
    if x_pos.dim() != x_cfg.dim() {
        return Err(Error::ShapeMismatch {
            expected: x_pos.shape().to_vec(),
            got: x_cfg.shape().to_vec(),
        });
    }
    let mut out = x_cfg.clone();
    let rescale_block = |pos: &[f64], mut cfg: ndarray::ArrayViewMut1<f64>, label: usize| {
        let sigma_cfg = population_std(cfg.as_slice().expect("contiguous"));
        if sigma_cfg < 1e-12 {
            log::warn!("rescale_cfg: block {label} is constant, left unrescaled");
            return;
        }
        let ratio = population_std(pos) / sigma_cfg;
        cfg.mapv_inplace(|v| v + phi * (v * ratio - v));
    };
    match axes {
        RescaleAxes::Channel => {
            let c = x_pos.shape()[0];
            for ch in 0..c {
                let pos = x_pos.index_axis(Axis(0), ch);
                let pos = pos.as_standard_layout();
                let flat_cfg = out
                    .index_axis_mut(Axis(0), ch)
                    .into_shape_with_order(pos.len())
                    .expect("channel is contiguous");
                rescale_block(pos.as_slice().expect("standard layout"), flat_cfg, ch);
            }
        }
        RescaleAxes::Global => {
            let pos = x_pos.as_standard_layout();
            let n = pos.len();
            let flat_cfg = out
                .view_mut()
                .into_shape_with_order(n)
                .expect("tensor is contiguous");
            rescale_block(pos.as_slice().expect("standard layout"), flat_cfg, 0);
        }
    }
    Ok(out)
}

/// [`rescale_cfg_axes`] with the default per-channel statistics.
pub fn rescale_cfg(x_pos: &Array3<f64>, x_cfg: &Array3<f64>, phi: f64) -> Result<Array3<f64>> {
    rescale_cfg_axes(x_pos, x_cfg, phi, RescaleAxes::Channel)
}
