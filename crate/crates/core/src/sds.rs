//! Score distillation loop and the optimizer it shares with denoiser
//! training.
//!
//! One update renders four orthogonal views, diffuses them to a shared
//! timestep, asks the prior for (optionally guided) noise predictions,
//! and contracts the weighted residual through the renderer's exact
//! gradient. No gradient flows through the prediction itself; the score
//! is treated as a constant per update. Quality proxies (size,
//! roughness, spectral detail) are computed alongside every update so
//! schedule policies can be compared quantitatively.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::freeu::{in_window, FreeUParams, DEFAULT_R_THRESHOLD};
use crate::guidance::{
    cfg_combine, cfg_negative, rescale_cfg_axes, GuidanceMode, GuidanceParams, ScorePair,
};
use crate::prior::{
    analytic_eps, forward_diffuse, make_cosine_schedule, unet_eps, Condition, GaussianMixturePrior,
    NoiseSchedule, TinyUNet,
};
use crate::renderer::{
    render, render_grad, sample_orthogonal_views, softplus, CameraView, GridGradient, VoxelGrid,
};
use crate::schedules::{
    anneal_timestep_range_over, cfg_schedule, freeu_schedule, sample_timestep, ResolutionSchedule,
};

/// First/second moment accumulators for [`adamw_step`]. One state per
/// parameter vector; `step` counts completed updates for bias correction.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        AdamWState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected adaptive-moment update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![state.m.len()],
            got: vec![params.len(), grads.len()],
        });
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + state.eps) + weight_decay * params[i]);
    }
    Ok(())
}

/// Residual weighting w(t) in the distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SdsWeighting {
    Constant(f64),
    SigmaSquared,
}

impl SdsWeighting {
    fn value(&self, t: usize, sched: &NoiseSchedule) -> f64 {
        match self {
            SdsWeighting::Constant(c) => *c,
            SdsWeighting::SigmaSquared => sched.sigma(t) * sched.sigma(t),
        }
    }
}

/// How guidance strength evolves over the run. `Dynamic` keeps the
/// carried params' mode and rescale settings but takes its weight from
/// the iteration ramp (100 down to 10).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidancePolicy {
    Off,
    Static(GuidanceParams),
    Dynamic(GuidanceParams),
}

impl GuidancePolicy {
    fn at(&self, iter: u64, total_iters: u64) -> Result<Option<GuidanceParams>> {
        match self {
            GuidancePolicy::Off => Ok(None),
            GuidancePolicy::Static(p) => Ok(Some(*p)),
            GuidancePolicy::Dynamic(p) => {
                let mut q = *p;
                q.weight = cfg_schedule(iter, total_iters)?;
                Ok(Some(q))
            }
        }
    }
}

/// How FreeU factors evolve. `Dynamic` follows the diffusion-timestep
/// ramp evaluated at each update's sampled t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FreeUPolicy {
    Off,
    Static(FreeUParams),
    Dynamic { r_threshold: f64 },
}

impl FreeUPolicy {
    fn at(&self, t: usize) -> Option<FreeUParams> {
        match self {
            FreeUPolicy::Off => None,
            FreeUPolicy::Static(p) => Some(*p),
            FreeUPolicy::Dynamic { r_threshold } => Some(freeu_schedule(t, *r_threshold)),
        }
    }
}

/// Full distillation configuration. Defaults are desk scale: 2000
/// iterations with the timestep anneal squeezed proportionally into
/// 1600.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SDSConfig {
    pub total_iters: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weighting: SdsWeighting,
    pub guidance: GuidancePolicy,
    pub freeu: FreeUPolicy,
    pub anneal_horizon: u64,
    pub resolution: ResolutionSchedule,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    pub elevation_deg: f64,
    pub frame: f64,
    pub grid_resolution: usize,
    pub seed: u64,
    pub metric_cadence: u64,
    /// 0 disables intermediate snapshots; finals are always taken.
    pub snapshot_cadence: u64,
    /// Sum per-view gradients (batch semantics); false averages them.
    pub sum_views: bool,
    pub t_count: usize,
    pub prompt_cond: Condition,
    /// Spectral window half-width used by the detail proxy.
    pub detail_r_threshold: f64,
}

impl Default for SDSConfig {
    fn default() -> Self {
        SDSConfig {
            total_iters: 2000,
            learning_rate: 0.01,
            weight_decay: 0.0,
            weighting: SdsWeighting::SigmaSquared,
            guidance: GuidancePolicy::Off,
            freeu: FreeUPolicy::Off,
            anneal_horizon: 1600,
            resolution: ResolutionSchedule {
                low: 16,
                high: 16,
                switch_iter: 0,
            },
            samples_per_ray: 32,
            background: [0.5; 3],
            elevation_deg: 10.0,
            frame: 1.0,
            grid_resolution: 16,
            seed: 0,
            metric_cadence: 10,
            snapshot_cadence: 0,
            sum_views: true,
            t_count: 1000,
            prompt_cond: Condition::Prompt(0),
            detail_r_threshold: DEFAULT_R_THRESHOLD,
        }
    }
}

impl SDSConfig {
    /// `total_iters = 0` is allowed here so the no-op identity holds;
    /// operator front ends require at least one iteration.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let SdsWeighting::Constant(c) = self.weighting {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Config(format!("constant weighting {c} invalid")));
            }
        }
        if self.grid_resolution == 0 {
            return Err(Error::Config("grid resolution 0".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray below 2".into()));
        }
        if self.t_count < 2 {
            return Err(Error::Config("t_count below 2".into()));
        }
        if self.metric_cadence == 0 {
            return Err(Error::Config("metric cadence must be >= 1".into()));
        }
        if !(-90.0..=90.0).contains(&self.elevation_deg) || !(self.frame > 0.0) {
            return Err(Error::Config("bad camera elevation or frame".into()));
        }
        if !self.background.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite background".into()));
        }
        if !(self.detail_r_threshold >= 0.0) {
            return Err(Error::Config("detail window radius must be >= 0".into()));
        }
        if self.total_iters >= 2 {
            // Surfaces schedule errors at config time, not mid-run.
            cfg_schedule(1, self.total_iters).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One recorded iteration of the distillation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub t: usize,
    pub cfg_w: f64,
    pub b1: f64,
    pub s1: f64,
    pub b2: f64,
    pub s2: f64,
    pub phi: f64,
    pub size: f64,
    pub rough: f64,
    pub detail: f64,
    pub gnorm: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iter,t,cfg_w,b1,s1,b2,s2,phi,size,rough,detail,gnorm";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.t,
            self.cfg_w,
            self.b1,
            self.s1,
            self.b2,
            self.s2,
            self.phi,
            self.size,
            self.rough,
            self.detail,
            self.gnorm
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.cfg_w,
            self.b1,
            self.s1,
            self.b2,
            self.s2,
            self.phi,
            self.size,
            self.rough,
            self.detail,
            self.gnorm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Source of noise predictions for the SDS residual.
pub trait NoisePredictor {
    fn predict(
        &mut self,
        z_t: &Array3<f64>,
        t: usize,
        cond: Condition,
        freeu: Option<&FreeUParams>,
    ) -> Result<Array3<f64>>;
}

/// Closed-form predictor backed by a Gaussian mixture. Has no feature
/// hierarchy, so FreeU requests are configuration errors.
pub struct AnalyticPredictor {
    pub prior: GaussianMixturePrior,
    sched: NoiseSchedule,
}

impl AnalyticPredictor {
    pub fn new(prior: GaussianMixturePrior, sched: NoiseSchedule) -> Self {
        AnalyticPredictor { prior, sched }
    }
}

impl NoisePredictor for AnalyticPredictor {
    fn predict(
        &mut self,
        z_t: &Array3<f64>,
        t: usize,
        cond: Condition,
        freeu: Option<&FreeUParams>,
    ) -> Result<Array3<f64>> {
        if freeu.is_some() {
            return Err(Error::Config(
                "FreeU requires a network prior; the analytic prior has no feature maps".into(),
            ));
        }
        if let Some(shape) = self.prior.image_shape() {
            if z_t.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: vec![shape.0, shape.1, shape.2],
                    got: z_t.shape().to_vec(),
                });
            }
        }
        analytic_eps(z_t, t, cond, &self.prior, &self.sched)
    }
}

/// Learned predictor wrapping the small UNet.
pub struct UNetPredictor {
    pub net: TinyUNet,
}

impl UNetPredictor {
    pub fn new(net: TinyUNet) -> Self {
        UNetPredictor { net }
    }
}

impl NoisePredictor for UNetPredictor {
    fn predict(
        &mut self,
        z_t: &Array3<f64>,
        t: usize,
        cond: Condition,
        freeu: Option<&FreeUParams>,
    ) -> Result<Array3<f64>> {
        unet_eps(z_t, t, cond, &mut self.net, freeu)
    }
}

/// Initial activated density everywhere in a fresh grid.
pub const INIT_DENSITY: f64 = 0.1;

/// Fresh grid: uniform density ~0.1 after softplus, colors at 0.5, so
/// every logit sees a nonzero gradient from the first update.
pub fn init_grid(d: usize) -> Result<VoxelGrid> {
    VoxelGrid::uniform(d, INIT_DENSITY.exp_m1().ln(), 0.0)
}

fn predict_guided(
    z_t: &Array3<f64>,
    t: usize,
    prompt: Condition,
    predictor: &mut dyn NoisePredictor,
    freeu: Option<&FreeUParams>,
    guidance: Option<&GuidanceParams>,
) -> Result<Array3<f64>> {
    let Some(g) = guidance else {
        return predictor.predict(z_t, t, prompt, freeu);
    };
    if g.mode == GuidanceMode::Off {
        return predictor.predict(z_t, t, prompt, freeu);
    }
    let primary = predictor.predict(z_t, t, prompt, freeu)?;
    let (reference_cond, use_omega_form) = match g.mode {
        GuidanceMode::Classic => (Condition::Unconditioned, true),
        GuidanceMode::NegativePrompt => (Condition::Negative, false),
        GuidanceMode::Off => unreachable!(),
    };
    let reference = predictor.predict(z_t, t, reference_cond, freeu)?;
    let pair = ScorePair::new(primary.clone(), reference)?;
    let combined = if use_omega_form {
        cfg_combine(&pair, g.weight)
    } else {
        cfg_negative(&pair, g.weight)
    };
    if g.rescale_enabled {
        rescale_cfg_axes(&primary, &combined, g.rescale_phi, g.rescale_axes)
    } else {
        Ok(combined)
    }
}

/// One SDS update: the gradient to feed the optimizer plus the metrics
/// row describing what happened.
///
/// Draw order from `rng` is fixed: one uniform for the view base
/// azimuth, one uniform for the timestep, then per view (in order) the
/// standard-normal noise image, element by element in logical order.
pub fn sds_update(
    grid: &VoxelGrid,
    iter: u64,
    cfg: &SDSConfig,
    predictor: &mut dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(GridGradient, MetricsRow)> {
    let views = sample_orthogonal_views(rng, cfg.elevation_deg, cfg.frame)?;
    let res = cfg.resolution.at(iter);
    let mut images = Vec::with_capacity(views.len());
    for v in &views {
        images.push(render(grid, v, res, cfg.samples_per_ray, &cfg.background)?);
    }
    let range = anneal_timestep_range_over(iter, cfg.anneal_horizon);
    let t = sample_timestep(range, rng, sched.len())?;
    let freeu = cfg.freeu.at(t);
    let guidance = cfg.guidance.at(iter, cfg.total_iters)?;
    let w_t = cfg.weighting.value(t, sched);
    let mut total = GridGradient::zeros(grid.d());
    for (view, x) in views.iter().zip(&images) {
        let mut eps = Array3::zeros((3, res, res));
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let z_t = forward_diffuse(x, t, &eps, sched)?;
        let mut residual = predict_guided(
            &z_t,
            t,
            cfg.prompt_cond,
            predictor,
            freeu.as_ref(),
            guidance.as_ref(),
        )?;
        residual.zip_mut_with(&eps, |r, &e| *r = w_t * (*r - e));
        let g = render_grad(
            grid,
            view,
            res,
            cfg.samples_per_ray,
            &cfg.background,
            &residual,
        )?;
        total.add(&g);
    }
    if !cfg.sum_views {
        total.scale(1.0 / views.len() as f64);
    }
    let gnorm = total.norm();
    if !gnorm.is_finite() {
        return Err(Error::NumericalAbort {
            iter,
            reason: "non-finite SDS gradient".into(),
        });
    }
    let fp = freeu.unwrap_or(FreeUParams::IDENTITY);
    let row = MetricsRow {
        iter,
        t,
        cfg_w: guidance.map_or(0.0, |g| g.weight),
        b1: fp.b1,
        s1: fp.s1,
        b2: fp.b2,
        s2: fp.s2,
        phi: guidance.map_or(0.0, |g| {
            if g.rescale_enabled {
                g.rescale_phi
            } else {
                0.0
            }
        }),
        size: size_proxy(grid),
        rough: roughness_proxy(grid),
        detail: detail_proxy(&images, cfg.detail_r_threshold),
        gnorm,
    };
    Ok((total, row))
}

/// Snapshot azimuths for progress renders.
pub const SNAPSHOT_AZIMUTHS: [u32; 3] = [0, 120, 240];

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iter: u64,
    pub azimuth_deg: u32,
    pub image: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub grid: VoxelGrid,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<Snapshot>,
}

/// Owns the grid, optimizer state, RNG stream, and prior for one run.
pub struct Engine {
    cfg: SDSConfig,
    grid: VoxelGrid,
    sched: NoiseSchedule,
    predictor: Box<dyn NoisePredictor>,
    rng: ChaCha8Rng,
    opt: AdamWState,
    params: Vec<f64>,
}

impl Engine {
    pub fn new(cfg: SDSConfig, predictor: Box<dyn NoisePredictor>) -> Result<Self> {
        cfg.validate()?;
        let sched = make_cosine_schedule(cfg.t_count)?;
        let grid = init_grid(cfg.grid_resolution)?;
        let mut params = grid.density_logits.clone();
        params.extend_from_slice(&grid.color_logits);
        let opt = AdamWState::new(params.len());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Engine {
            cfg,
            grid,
            sched,
            predictor,
            rng,
            opt,
            params,
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn config(&self) -> &SDSConfig {
        &self.cfg
    }

    fn push_snapshots(&self, iter: u64, out: &mut Vec<Snapshot>) -> Result<()> {
        let res = self.cfg.resolution.at(iter.max(1));
        for az in SNAPSHOT_AZIMUTHS {
            let view = CameraView::new(az as f64, self.cfg.elevation_deg, self.cfg.frame)?;
            let image = render(
                &self.grid,
                &view,
                res,
                self.cfg.samples_per_ray,
                &self.cfg.background,
            )?;
            out.push(Snapshot {
                iter,
                azimuth_deg: az,
                image,
            });
        }
        Ok(())
    }

    /// Runs the full loop. Metrics are kept for iteration 1, every
    /// cadence multiple, and the final iteration.
    pub fn optimize(&mut self) -> Result<RunOutput> {
        let total = self.cfg.total_iters;
        let mut metrics = Vec::new();
        let mut snapshots = Vec::new();
        for iter in 1..=total {
            let (grad, row) = sds_update(
                &self.grid,
                iter,
                &self.cfg,
                self.predictor.as_mut(),
                &self.sched,
                &mut self.rng,
            )?;
            let mut flat = grad.density;
            flat.extend_from_slice(&grad.color);
            adamw_step(
                &mut self.params,
                &flat,
                &mut self.opt,
                self.cfg.learning_rate,
                self.cfg.weight_decay,
            )?;
            if !self.params.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalAbort {
                    iter,
                    reason: "non-finite grid logits after optimizer step".into(),
                });
            }
            let nd = self.grid.density_logits.len();
            self.grid.density_logits.copy_from_slice(&self.params[..nd]);
            self.grid.color_logits.copy_from_slice(&self.params[nd..]);
            if iter == 1 || iter == total || iter % self.cfg.metric_cadence == 0 {
                metrics.push(row);
            }
            let want_snap = iter == total
                || (self.cfg.snapshot_cadence > 0 && iter % self.cfg.snapshot_cadence == 0);
            if want_snap {
                self.push_snapshots(iter, &mut snapshots)?;
            }
        }
        if total == 0 {
            self.push_snapshots(0, &mut snapshots)?;
        }
        Ok(RunOutput {
            grid: self.grid.clone(),
            metrics,
            snapshots,
        })
    }
}

/// Occupancy threshold shared by the size and roughness proxies.
pub const SIZE_TAU: f64 = 1.0;

/// Fraction of voxels whose activated density exceeds `SIZE_TAU`.
pub fn size_proxy(grid: &VoxelGrid) -> f64 {
    let occupied = grid
        .density_logits
        .iter()
        .filter(|&&l| softplus(l) > SIZE_TAU)
        .count();
    occupied as f64 / grid.voxel_count() as f64
}

/// Mean |discrete Laplacian| of activated density over surface voxels:
/// occupied voxels with at least one in-bounds unoccupied neighbor.
/// Out-of-bounds neighbors replicate the center value, so uniform
/// fields score 0 regardless of level.
pub fn roughness_proxy(grid: &VoxelGrid) -> f64 {
    let d = grid.d() as isize;
    let sigma_at = |x: isize, y: isize, z: isize| -> f64 {
        softplus(grid.density_logits[(z as usize * grid.d() + y as usize) * grid.d() + x as usize])
    };
    let mut sum = 0.0;
    let mut count = 0u64;
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let center = sigma_at(x, y, z);
                if center <= SIZE_TAU {
                    continue;
                }
                let mut lap = 0.0;
                let mut boundary = false;
                for (dx, dy, dz) in [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ] {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if (0..d).contains(&nx) && (0..d).contains(&ny) && (0..d).contains(&nz) {
                        let s = sigma_at(nx, ny, nz);
                        lap += s - center;
                        if s <= SIZE_TAU {
                            boundary = true;
                        }
                    }
                }
                if boundary {
                    sum += lap.abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn prev_power_of_two(n: usize) -> usize {
    debug_assert!(n > 0);
    1usize << (usize::BITS - 1 - n.leading_zeros())
}

/// Mean spectral energy fraction outside the centered low-frequency
/// window, after per-channel mean removal, averaged over all channels
/// of all images. Non-power-of-two images are center-cropped to the
/// largest power-of-two square first. Empty input and constant images
/// score 0.
pub fn detail_proxy(images: &[Array3<f64>], r_threshold: f64) -> f64 {
    use ndarray::s;
    use num_complex::Complex64;
    let mut fractions = Vec::new();
    for img in images {
        let (c, h, w) = img.dim();
        if h == 0 || w == 0 {
            continue;
        }
        let side = prev_power_of_two(h.min(w));
        let (i0, j0) = ((h - side) / 2, (w - side) / 2);
        for ch in 0..c {
            let window = img.slice(s![ch, i0..i0 + side, j0..j0 + side]);
            let mean = window.mean().unwrap_or(0.0);
            let complex = window.mapv(|v| Complex64::new(v - mean, 0.0));
            let spec = crate::freeu::fft2(complex.view())
                .expect("crop side is a power of two by construction");
            let mut inside = 0.0;
            let mut outside = 0.0;
            for i in 0..side {
                for j in 0..side {
                    let e = spec[[i, j]].norm_sqr();
                    if in_window(i, j, side, side, r_threshold) {
                        inside += e;
                    } else {
                        outside += e;
                    }
                }
            }
            let total = inside + outside;
            fractions.push(if total < 1e-300 { 0.0 } else { outside / total });
        }
    }
    if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    }
}


#[cfg(test)]
mod engine_tests {
    use super::*;
    use crate::guidance::RescaleAxes;
    use crate::prior::MixtureComponent;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn constant_image(res: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((3, res, res), v)
    }

    /// Bright disk on the render background, rotationally symmetric so
    /// all azimuths see the same target.
    fn disk_image(res: usize, value: f64) -> Array3<f64> {
        Array3::from_shape_fn((3, res, res), |(_, i, j)| {
            let y = i as f64 + 0.5 - res as f64 / 2.0;
            let x = j as f64 + 0.5 - res as f64 / 2.0;
            if (x * x + y * y).sqrt() < 0.3 * res as f64 {
                value
            } else {
                0.5
            }
        })
    }

    fn delta_prior(res: usize, mean_value: f64) -> GaussianMixturePrior {
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean: constant_image(res, mean_value),
                    std: 0.0,
                    weight: 1.0,
                }],
            )
            .unwrap();
        prior
    }

    fn two_cond_prior(res: usize) -> GaussianMixturePrior {
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![
                    MixtureComponent {
                        mean: disk_image(res, 0.9),
                        std: 0.05,
                        weight: 0.6,
                    },
                    MixtureComponent {
                        mean: disk_image(res, 0.2),
                        std: 0.1,
                        weight: 0.4,
                    },
                ],
            )
            .unwrap();
        prior
            .insert(
                Condition::Unconditioned,
                vec![MixtureComponent {
                    mean: constant_image(res, 0.5),
                    std: 0.8,
                    weight: 1.0,
                }],
            )
            .unwrap();
        prior
    }

    fn small_cfg() -> SDSConfig {
        SDSConfig {
            total_iters: 5,
            grid_resolution: 8,
            resolution: ResolutionSchedule {
                low: 8,
                high: 8,
                switch_iter: 0,
            },
            samples_per_ray: 16,
            anneal_horizon: 4,
            metric_cadence: 2,
            ..SDSConfig::default()
        }
    }

    fn analytic(res: usize, prior: GaussianMixturePrior) -> AnalyticPredictor {
        let _ = res;
        AnalyticPredictor::new(prior, make_cosine_schedule(1000).unwrap())
    }

    #[test]
    fn zero_residual_fixed_point() {
        // Uniform 0.5 colors on a 0.5 background render to 0.5
        // everywhere; a delta prior at that image leaves nothing to
        // correct, so the update vanishes.
        let cfg = SDSConfig {
            guidance: GuidancePolicy::Off,
            ..small_cfg()
        };
        let grid = init_grid(cfg.grid_resolution).unwrap();
        let sched = make_cosine_schedule(cfg.t_count).unwrap();
        let mut pred = analytic(8, delta_prior(8, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (grad, row) = sds_update(&grid, 1, &cfg, &mut pred, &sched, &mut rng).unwrap();
        assert!(grad.norm() <= 1e-9, "gradient norm {}", grad.norm());
        assert!(row.all_finite());
    }

    #[test]
    fn zero_weighting_zeroes_the_gradient() {
        let cfg = SDSConfig {
            weighting: SdsWeighting::Constant(0.0),
            ..small_cfg()
        };
        let grid = init_grid(cfg.grid_resolution).unwrap();
        let sched = make_cosine_schedule(cfg.t_count).unwrap();
        let mut pred = analytic(8, two_cond_prior(8));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (grad, _) = sds_update(&grid, 1, &cfg, &mut pred, &sched, &mut rng).unwrap();
        assert!(grad.density.iter().all(|&v| v == 0.0));
        assert!(grad.color.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_exactly_linear_in_weighting() {
        let base = small_cfg();
        let run = |c: f64| {
            let cfg = SDSConfig {
                weighting: SdsWeighting::Constant(c),
                ..base
            };
            let grid = init_grid(cfg.grid_resolution).unwrap();
            let sched = make_cosine_schedule(cfg.t_count).unwrap();
            let mut pred = analytic(8, two_cond_prior(8));
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sds_update(&grid, 2, &cfg, &mut pred, &sched, &mut rng)
                .unwrap()
                .0
        };
        let half = run(0.5);
        let full = run(1.0);
        for (a, b) in half.density.iter().zip(&full.density) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in half.color.iter().zip(&full.color) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn update_matches_step_by_step_composition() {
        let res = 8;
        let cfg = SDSConfig {
            guidance: GuidancePolicy::Dynamic(
                GuidanceParams::new(GuidanceMode::Classic, 0.0, true, 0.7, RescaleAxes::Channel)
                    .unwrap(),
            ),
            total_iters: 40,
            ..small_cfg()
        };
        let grid = init_grid(cfg.grid_resolution).unwrap();
        let sched = make_cosine_schedule(cfg.t_count).unwrap();
        let prior = two_cond_prior(res);
        let iter = 7;

        let mut pred = analytic(res, prior.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (grad, row) = sds_update(&grid, iter, &cfg, &mut pred, &sched, &mut rng).unwrap();

        // Independent composition, replaying the same draw order.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let views = sample_orthogonal_views(&mut rng2, cfg.elevation_deg, cfg.frame).unwrap();
        let t = sample_timestep(
            anneal_timestep_range_over(iter, cfg.anneal_horizon),
            &mut rng2,
            sched.len(),
        )
        .unwrap();
        let w = cfg_schedule(iter, cfg.total_iters).unwrap();
        let w_t = sched.sigma(t) * sched.sigma(t);
        let mut want = GridGradient::zeros(grid.d());
        for view in &views {
            let x = render(&grid, view, res, cfg.samples_per_ray, &cfg.background).unwrap();
            let mut eps = Array3::zeros((3, res, res));
            for e in eps.iter_mut() {
                *e = rng2.sample(StandardNormal);
            }
            let z_t = forward_diffuse(&x, t, &eps, &sched).unwrap();
            let primary = analytic_eps(&z_t, t, Condition::Prompt(0), &prior, &sched).unwrap();
            let reference =
                analytic_eps(&z_t, t, Condition::Unconditioned, &prior, &sched).unwrap();
            let pair = ScorePair::new(primary.clone(), reference).unwrap();
            let combined = cfg_combine(&pair, w);
            let guided = rescale_cfg_axes(&primary, &combined, 0.7, RescaleAxes::Channel).unwrap();
            let mut residual = guided;
            residual.zip_mut_with(&eps, |r, &e| *r = w_t * (*r - e));
            let g = render_grad(
                &grid,
                view,
                res,
                cfg.samples_per_ray,
                &cfg.background,
                &residual,
            )
            .unwrap();
            want.add(&g);
        }
        assert_eq!(row.t, t);
        assert_abs_diff_eq!(row.cfg_w, w, epsilon = 1e-12);
        for (a, b) in grad.density.iter().zip(&want.density) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        for (a, b) in grad.color.iter().zip(&want.color) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn metrics_track_the_guidance_schedule() {
        let total = 50;
        let dynamic = SDSConfig {
            guidance: GuidancePolicy::Dynamic(
                GuidanceParams::new(GuidanceMode::Classic, 0.0, true, 0.4, RescaleAxes::Channel)
                    .unwrap(),
            ),
            total_iters: total,
            ..small_cfg()
        };
        let sched = make_cosine_schedule(dynamic.t_count).unwrap();
        let grid = init_grid(dynamic.grid_resolution).unwrap();
        let mut pred = analytic(8, two_cond_prior(8));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, first) = sds_update(&grid, 1, &dynamic, &mut pred, &sched, &mut rng).unwrap();
        let (_, last) = sds_update(&grid, total, &dynamic, &mut pred, &sched, &mut rng).unwrap();
        assert_eq!(first.cfg_w, 100.0);
        assert_eq!(last.cfg_w, 10.0);
        // Rescale strength is excluded from dynamic scaling.
        assert_eq!(first.phi, 0.4);
        assert_eq!(last.phi, 0.4);

        let fixed = SDSConfig {
            guidance: GuidancePolicy::Static(
                GuidanceParams::new(
                    GuidanceMode::Classic,
                    50.0,
                    false,
                    0.0,
                    RescaleAxes::Channel,
                )
                .unwrap(),
            ),
            total_iters: total,
            ..small_cfg()
        };
        let (_, a) = sds_update(&grid, 1, &fixed, &mut pred, &sched, &mut rng).unwrap();
        let (_, b) = sds_update(&grid, total, &fixed, &mut pred, &sched, &mut rng).unwrap();
        assert_eq!(a.cfg_w, 50.0);
        assert_eq!(b.cfg_w, 50.0);
    }

    #[test]
    fn analytic_prior_rejects_freeu() {
        let cfg = SDSConfig {
            freeu: FreeUPolicy::Dynamic { r_threshold: 2.0 },
            ..small_cfg()
        };
        let grid = init_grid(cfg.grid_resolution).unwrap();
        let sched = make_cosine_schedule(cfg.t_count).unwrap();
        let mut pred = analytic(8, two_cond_prior(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        match sds_update(&grid, 1, &cfg, &mut pred, &sched, &mut rng) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_prediction_aborts_with_iteration() {
        struct NanPredictor;
        impl NoisePredictor for NanPredictor {
            fn predict(
                &mut self,
                z_t: &Array3<f64>,
                _t: usize,
                _cond: Condition,
                _freeu: Option<&FreeUParams>,
            ) -> Result<Array3<f64>> {
                Ok(Array3::from_elem(z_t.dim(), f64::NAN))
            }
        }
        let cfg = small_cfg();
        let grid = init_grid(cfg.grid_resolution).unwrap();
        let sched = make_cosine_schedule(cfg.t_count).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        match sds_update(&grid, 3, &cfg, &mut NanPredictor, &sched, &mut rng) {
            Err(Error::NumericalAbort { iter, .. }) => assert_eq!(iter, 3),
            other => panic!("expected NumericalAbort, got {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_is_the_identity() {
        let cfg = SDSConfig {
            total_iters: 0,
            ..small_cfg()
        };
        let mut engine = Engine::new(cfg, Box::new(analytic(8, two_cond_prior(8)))).unwrap();
        let out = engine.optimize().unwrap();
        let fresh = init_grid(cfg.grid_resolution).unwrap();
        assert_eq!(out.grid.density_logits, fresh.density_logits);
        assert_eq!(out.grid.color_logits, fresh.color_logits);
        assert!(out.metrics.is_empty());
        assert_eq!(out.snapshots.len(), 3);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_runs() {
        let cfg = SDSConfig {
            guidance: GuidancePolicy::Dynamic(
                GuidanceParams::new(GuidanceMode::Classic, 0.0, false, 0.0, RescaleAxes::Channel)
                    .unwrap(),
            ),
            seed: 42,
            ..small_cfg()
        };
        let run = || {
            let mut engine = Engine::new(cfg, Box::new(analytic(8, two_cond_prior(8)))).unwrap();
            engine.optimize().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.grid.density_logits, b.grid.density_logits);
        assert_eq!(a.grid.color_logits, b.grid.color_logits);
        let csv = |out: &RunOutput| {
            out.metrics
                .iter()
                .map(MetricsRow::csv_line)
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(a.snapshots.len(), b.snapshots.len());
        for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn metrics_cadence_and_endpoints() {
        let cfg = SDSConfig {
            total_iters: 7,
            metric_cadence: 3,
            ..small_cfg()
        };
        let mut engine = Engine::new(cfg, Box::new(analytic(8, two_cond_prior(8)))).unwrap();
        let out = engine.optimize().unwrap();
        let iters: Vec<u64> = out.metrics.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![1, 3, 6, 7]);
        assert!(out.metrics.iter().all(MetricsRow::all_finite));
        // Final snapshots only, three azimuths.
        assert_eq!(out.snapshots.len(), 3);
        assert_eq!(
            out.snapshots
                .iter()
                .map(|s| s.azimuth_deg)
                .collect::<Vec<_>>(),
            vec![0, 120, 240]
        );
        assert!(out.snapshots.iter().all(|s| s.iter == 7));
    }

    #[test]
    fn optimizer_builds_something_from_a_disk_prior() {
        let res = 8;
        let mut prior = GaussianMixturePrior::new();
        prior
            .insert(
                Condition::Prompt(0),
                vec![MixtureComponent {
                    mean: disk_image(res, 0.95),
                    std: 0.0,
                    weight: 1.0,
                }],
            )
            .unwrap();
        let cfg = SDSConfig {
            total_iters: 400,
            learning_rate: 0.02,
            anneal_horizon: 320,
            metric_cadence: 100,
            ..small_cfg()
        };
        let mut engine = Engine::new(cfg, Box::new(analytic(res, prior))).unwrap();
        let out = engine.optimize().unwrap();
        let size = size_proxy(&out.grid);
        assert!(size > 0.01, "size proxy stayed at {size}");
        assert!(out.metrics.iter().all(MetricsRow::all_finite));
    }

    #[test]
    fn engine_rejects_invalid_configs() {
        let bad_lr = SDSConfig {
            learning_rate: 0.0,
            ..SDSConfig::default()
        };
        assert!(Engine::new(bad_lr, Box::new(analytic(8, two_cond_prior(8)))).is_err());
        let bad_spr = SDSConfig {
            samples_per_ray: 1,
            ..SDSConfig::default()
        };
        assert!(bad_spr.validate().is_err());
        let bad_weight = SDSConfig {
            weighting: SdsWeighting::Constant(-1.0),
            ..SDSConfig::default()
        };
        assert!(bad_weight.validate().is_err());
    }
}

#[cfg(test)]
mod proxy_tests {
    use super::*;
    use crate::oracle;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn size_proxy_counts_occupied_fraction() {
        let empty = VoxelGrid::uniform(4, -100.0, 0.0).unwrap();
        assert_eq!(size_proxy(&empty), 0.0);
        let full = VoxelGrid::uniform(4, 10.0, 0.0).unwrap();
        assert_eq!(size_proxy(&full), 1.0);
        let mut half = vec![10.0; 32];
        half.extend(vec![-10.0; 32]);
        let grid = VoxelGrid::from_logits(4, half, vec![0.0; 192]).unwrap();
        assert_eq!(size_proxy(&grid), 0.5);
    }

    #[test]
    fn roughness_is_zero_for_uniform_fields() {
        for logit in [-5.0, 3.0] {
            let grid = VoxelGrid::uniform(4, logit, 0.0).unwrap();
            assert_eq!(roughness_proxy(&grid), 0.0);
        }
    }

    #[test]
    fn roughness_of_isolated_voxel_is_positive() {
        let mut density = vec![-20.0; 27];
        density[13] = 4.0; // center of the 3x3x3 grid
        let grid = VoxelGrid::from_logits(3, density, vec![0.0; 81]).unwrap();
        assert!(roughness_proxy(&grid) > 0.0);
    }

    #[test]
    fn roughness_matches_hand_computation() {
        // Two occupied voxels: the center (logit 4) and a corner set so
        // its activated density is exactly 3. All other voxels sit at
        // logit -20. Both occupied voxels are surface voxels.
        let mut density = vec![-20.0; 27];
        density[13] = 4.0;
        density[0] = 3.0f64.exp_m1().ln();
        let grid = VoxelGrid::from_logits(3, density, vec![0.0; 81]).unwrap();
        let low = (1.0 + (-20.0f64).exp()).ln();
        let s_center = (1.0 + 4.0f64.exp()).ln();
        let lap_center = 6.0 * (low - s_center);
        let lap_corner = 3.0 * (low - 3.0); // three in-bounds neighbors
        let want = (lap_center.abs() + lap_corner.abs()) / 2.0;
        assert_abs_diff_eq!(roughness_proxy(&grid), want, epsilon = 1e-12);
    }

    #[test]
    fn detail_of_constant_image_is_zero() {
        let img = Array3::from_elem((3, 8, 8), 0.7);
        assert_eq!(detail_proxy(&[img], 2.0), 0.0);
        assert_eq!(detail_proxy(&[], 2.0), 0.0);
    }

    #[test]
    fn detail_of_checkerboard_is_one() {
        let img = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| ((i + j) % 2) as f64);
        assert_abs_diff_eq!(detail_proxy(&[img], 2.0), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn detail_of_noise_is_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Array3::from_shape_fn((1, 16, 16), |_| rng.random::<f64>());
        let d = detail_proxy(&[img], 2.0);
        assert!(d > 0.0 && d < 1.0, "detail = {d}");
    }

    #[test]
    fn detail_crops_to_centered_power_of_two() {
        let img = Array3::from_elem((2, 10, 13), 0.4);
        assert_eq!(detail_proxy(&[img], 2.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inner = Array3::from_shape_fn((1, 8, 8), |_| rng.random::<f64>());
        // Padding the same 8x8 block into a 10x11 canvas must not change
        // the score: the crop recovers exactly the block.
        let mut padded = Array3::zeros((1, 10, 11));
        for i in 0..8 {
            for j in 0..8 {
                padded[[0, i + 1, j + 1]] = inner[[0, i, j]];
            }
        }
        assert_abs_diff_eq!(
            detail_proxy(&[inner], 2.0),
            detail_proxy(&[padded], 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn detail_matches_naive_dft_energy_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = Array3::from_shape_fn((1, 8, 8), |_| rng.random::<f64>());
        let r = 2.0;
        let got = detail_proxy(&[img.clone()], r);
        let mean = img.mean().unwrap();
        let complex = ndarray::Array2::from_shape_fn((8, 8), |(i, j)| {
            Complex64::new(img[[0, i, j]] - mean, 0.0)
        });
        let spec = oracle::naive_dft2_centered(complex.view());
        let mut inside = 0.0;
        let mut total = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let e = spec[[i, j]].norm_sqr();
                let cheb = ((i as f64) - 4.0).abs().max(((j as f64) - 4.0).abs());
                if cheb < r {
                    inside += e;
                }
                total += e;
            }
        }
        assert_abs_diff_eq!(got, (total - inside) / total, epsilon = 1e-9);
    }
}
