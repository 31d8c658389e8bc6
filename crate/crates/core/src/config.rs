//! Run configuration: a small sectioned key/value format, fail-closed.
//!
//! Unknown sections, unknown keys, duplicate keys, and malformed values
//! are all hard errors that name the offending line. Every knob has a
//! documented default; [`RunConfig::echo`] re-emits the fully resolved
//! state so a run directory is self-describing.
//!
//! Grammar: `[section]` headers, `key = value` pairs, `#`/`;` comments.
//! The only repeatable key is `component` in `[prior]`.

use std::collections::HashSet;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::freeu::FreeUParams;
use crate::guidance::{GuidanceMode, GuidanceParams, RescaleAxes};
use crate::prior::{make_cosine_schedule, Condition, GaussianMixturePrior, MixtureComponent};
use crate::renderer::VoxelGrid;
use crate::schedules::ResolutionSchedule;
use crate::sds::{
    init_grid, FreeUPolicy, GuidancePolicy, NoisePredictor, SDSConfig, SdsWeighting, UNetPredictor,
};

/// Analytic mixture component described by the config file; rasterized
/// to a mean image at whatever render resolutions the run uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub cond: Condition,
    pub weight: f64,
    pub std: f64,
    pub shape: ShapeSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSpec {
    /// Uniform color over the whole image.
    Flat([f64; 3]),
    /// Filled disk; center and radius are fractions of the image side.
    Disk {
        cx: f64,
        cy: f64,
        radius: f64,
        color: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    Analytic,
    Unet { checkpoint: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub components: Vec<ComponentSpec>,
}

/// Everything a run needs: engine config, prior description, and the
/// optional output directory named by the file itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sds: SDSConfig,
    pub prior: PriorSpec,
    pub output_dir: Option<String>,
}

fn cond_name(c: Condition) -> String {
    match c {
        Condition::Prompt(k) => format!("prompt{k}"),
        Condition::Negative => "negative".into(),
        Condition::Unconditioned => "uncond".into(),
    }
}

fn parse_cond(tok: &str) -> Result<Condition> {
    match tok {
        "negative" => Ok(Condition::Negative),
        "uncond" => Ok(Condition::Unconditioned),
        _ => {
            if let Some(num) = tok.strip_prefix("prompt") {
                let k: usize = num
                    .parse()
                    .map_err(|_| Error::Config(format!("bad condition '{tok}'")))?;
                Ok(Condition::Prompt(k))
            } else {
                Err(Error::Config(format!(
                    "bad condition '{tok}' (want promptK, negative, or uncond)"
                )))
            }
        }
    }
}

/// Renders a component mean at `res` pixels per side. Disk shapes sit
/// on the run's background color so off-shape pixels start matched.
pub fn rasterize(shape: &ShapeSpec, res: usize, background: &[f64; 3]) -> Array3<f64> {
    match shape {
        ShapeSpec::Flat(color) => Array3::from_shape_fn((3, res, res), |(c, _, _)| color[c]),
        ShapeSpec::Disk {
            cx,
            cy,
            radius,
            color,
        } => Array3::from_shape_fn((3, res, res), |(c, i, j)| {
            let x = (j as f64 + 0.5) / res as f64 - cx;
            let y = (i as f64 + 0.5) / res as f64 - cy;
            if (x * x + y * y).sqrt() < *radius {
                color[c]
            } else {
                background[c]
            }
        }),
    }
}

/// Groups the component list by condition and builds the mixture at one
/// resolution. Per-condition weights must sum to 1.
pub fn build_prior(
    components: &[ComponentSpec],
    res: usize,
    background: &[f64; 3],
) -> Result<GaussianMixturePrior> {
    let mut prior = GaussianMixturePrior::new();
    let mut conds: Vec<Condition> = Vec::new();
    for c in components {
        if !conds.contains(&c.cond) {
            conds.push(c.cond);
        }
    }
    for cond in conds {
        let comps: Vec<MixtureComponent> = components
            .iter()
            .filter(|c| c.cond == cond)
            .map(|c| MixtureComponent {
                mean: rasterize(&c.shape, res, background),
                std: c.std,
                weight: c.weight,
            })
            .collect();
        prior
            .insert(cond, comps)
            .map_err(|e| Error::Config(format!("prior components for {}: {e}", cond_name(cond))))?;
    }
    Ok(prior)
}

/// Analytic predictor that serves every resolution the run's schedule
/// can produce, by rasterizing the spec once per distinct size.
pub struct SpecPredictor {
    priors: Vec<(usize, GaussianMixturePrior)>,
    sched: crate::prior::NoiseSchedule,
}

impl SpecPredictor {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let mut sizes = vec![cfg.sds.resolution.low];
        if cfg.sds.resolution.high != cfg.sds.resolution.low {
            sizes.push(cfg.sds.resolution.high);
        }
        let mut priors = Vec::new();
        for res in sizes {
            priors.push((
                res,
                build_prior(&cfg.prior.components, res, &cfg.sds.background)?,
            ));
        }
        Ok(SpecPredictor {
            priors,
            sched: make_cosine_schedule(cfg.sds.t_count)?,
        })
    }
}

impl NoisePredictor for SpecPredictor {
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
        let res = z_t.dim().1;
        let prior = self
            .priors
            .iter()
            .find(|(r, _)| *r == res)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("no prior rasterized at resolution {res}")))?;
        crate::prior::analytic_eps(z_t, t, cond, prior, &self.sched)
    }
}

impl RunConfig {
    /// Operator-level checks beyond [`SDSConfig::validate`].
    pub fn validate(&self) -> Result<()> {
        self.sds.validate()?;
        if self.sds.total_iters < 1 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        match &self.prior.kind {
            PriorKind::Analytic => {
                if !matches!(self.sds.freeu, FreeUPolicy::Off) {
                    return Err(Error::Config(
                        "freeu requires a unet prior; the analytic prior has no feature maps"
                            .into(),
                    ));
                }
                let has = |cond: Condition| self.prior.components.iter().any(|c| c.cond == cond);
                if !has(self.sds.prompt_cond) {
                    return Err(Error::Config(format!(
                        "no prior components for prompt condition {}",
                        cond_name(self.sds.prompt_cond)
                    )));
                }
                let needs = match self.sds.guidance {
                    GuidancePolicy::Off => None,
                    GuidancePolicy::Static(p) | GuidancePolicy::Dynamic(p) => match p.mode {
                        GuidanceMode::Off => None,
                        GuidanceMode::Classic => Some(Condition::Unconditioned),
                        GuidanceMode::NegativePrompt => Some(Condition::Negative),
                    },
                };
                if let Some(cond) = needs {
                    if !has(cond) {
                        return Err(Error::Config(format!(
                            "guidance mode needs prior components for {}",
                            cond_name(cond)
                        )));
                    }
                }
                // Trial build at a probe resolution so weight-sum and
                // std errors surface at config time, not mid-run.
                build_prior(&self.prior.components, 4, &self.sds.background)?;
            }
            PriorKind::Unet { .. } => {
                for res in [self.sds.resolution.low, self.sds.resolution.high] {
                    if !res.is_power_of_two() || res < 4 {
                        return Err(Error::Config(format!(
                            "unet prior needs power-of-two render sizes >= 4, got {res}"
                        )));
                    }
                }
                if !self.prior.components.is_empty() {
                    return Err(Error::Config(
                        "component entries only apply to the analytic prior".into(),
                    ));
                }
            }
        }
        if matches!(self.sds.guidance, GuidancePolicy::Dynamic(_)) && self.sds.total_iters < 2 {
            return Err(Error::Config(
                "dynamic guidance needs total_iters >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Builds the noise predictor this config describes.
    pub fn build_predictor(&self) -> Result<Box<dyn NoisePredictor>> {
        match &self.prior.kind {
            PriorKind::Analytic => Ok(Box::new(SpecPredictor::build(self)?)),
            PriorKind::Unet { checkpoint } => {
                let net = crate::prior::open_checkpoint(std::path::Path::new(checkpoint))?;
                Ok(Box::new(UNetPredictor::new(net)))
            }
        }
    }

    /// Initial grid per the engine's initialization convention.
    pub fn init_grid(&self) -> Result<VoxelGrid> {
        init_grid(self.sds.grid_resolution)
    }

    /// Canonical re-emission of every resolved value. Parsing the echo
    /// reproduces the same configuration.
    pub fn echo(&self) -> String {
        let s = &self.sds;
        let mut out = String::new();
        out.push_str("# resolved configuration\n[run]\n");
        out.push_str(&format!("total_iters = {}\n", s.total_iters));
        out.push_str(&format!("learning_rate = {}\n", s.learning_rate));
        out.push_str(&format!("weight_decay = {}\n", s.weight_decay));
        out.push_str(&format!("seed = {}\n", s.seed));
        match s.weighting {
            SdsWeighting::SigmaSquared => out.push_str("weighting = sigma_squared\n"),
            SdsWeighting::Constant(c) => out.push_str(&format!("weighting = constant {c}\n")),
        }
        out.push_str(&format!(
            "view_reduction = {}\n",
            if s.sum_views { "sum" } else { "mean" }
        ));
        out.push_str(&format!("prompt = {}\n", cond_name(s.prompt_cond)));
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("output_dir = {dir}\n"));
        }
        out.push_str("\n[grid]\n");
        out.push_str(&format!("resolution = {}\n", s.grid_resolution));
        out.push_str("\n[render]\n");
        if s.resolution.low == s.resolution.high {
            out.push_str(&format!("size = {}\n", s.resolution.low));
        } else {
            out.push_str(&format!(
                "size = step {} {} {}\n",
                s.resolution.low, s.resolution.high, s.resolution.switch_iter
            ));
        }
        out.push_str(&format!("samples_per_ray = {}\n", s.samples_per_ray));
        out.push_str(&format!(
            "background = {} {} {}\n",
            s.background[0], s.background[1], s.background[2]
        ));
        out.push_str(&format!("elevation = {}\n", s.elevation_deg));
        out.push_str(&format!("frame = {}\n", s.frame));
        out.push_str("\n[schedules]\n");
        out.push_str(&format!("anneal_horizon = {}\n", s.anneal_horizon));
        out.push_str(&format!("timesteps = {}\n", s.t_count));
        out.push_str("\n[guidance]\n");
        match s.guidance {
            GuidancePolicy::Off => out.push_str("mode = off\n"),
            GuidancePolicy::Static(p) | GuidancePolicy::Dynamic(p) => {
                let mode = match p.mode {
                    GuidanceMode::Off => "off",
                    GuidanceMode::Classic => "classic",
                    GuidanceMode::NegativePrompt => "negative_prompt",
                };
                out.push_str(&format!("mode = {mode}\n"));
                match s.guidance {
                    GuidancePolicy::Dynamic(_) => out.push_str("weight = dynamic\n"),
                    _ => out.push_str(&format!("weight = {}\n", p.weight)),
                }
                if p.rescale_enabled {
                    out.push_str(&format!("rescale = {}\n", p.rescale_phi));
                    out.push_str(&format!(
                        "rescale_axes = {}\n",
                        match p.rescale_axes {
                            RescaleAxes::Channel => "channel",
                            RescaleAxes::Global => "global",
                        }
                    ));
                } else {
                    out.push_str("rescale = off\n");
                }
            }
        }
        out.push_str("\n[freeu]\n");
        match s.freeu {
            FreeUPolicy::Off => out.push_str("enabled = off\n"),
            FreeUPolicy::Static(p) => {
                out.push_str("enabled = static\n");
                out.push_str(&format!(
                    "b1 = {}\ns1 = {}\nb2 = {}\ns2 = {}\n",
                    p.b1, p.s1, p.b2, p.s2
                ));
                out.push_str(&format!("r_threshold = {}\n", p.r_threshold));
            }
            FreeUPolicy::Dynamic { r_threshold } => {
                out.push_str("enabled = dynamic\n");
                out.push_str(&format!("r_threshold = {r_threshold}\n"));
            }
        }
        out.push_str("\n[prior]\n");
        match &self.prior.kind {
            PriorKind::Analytic => out.push_str("kind = analytic\n"),
            PriorKind::Unet { checkpoint } => out.push_str(&format!("kind = unet {checkpoint}\n")),
        }
        for c in &self.prior.components {
            let shape = match &c.shape {
                ShapeSpec::Flat(col) => format!("flat {} {} {}", col[0], col[1], col[2]),
                ShapeSpec::Disk {
                    cx,
                    cy,
                    radius,
                    color,
                } => format!(
                    "disk {} {} {} {} {} {}",
                    cx, cy, radius, color[0], color[1], color[2]
                ),
            };
            out.push_str(&format!(
                "component = {} {} {} {}\n",
                cond_name(c.cond),
                c.weight,
                c.std,
                shape
            ));
        }
        out.push_str("\n[metrics]\n");
        out.push_str(&format!("cadence = {}\n", s.metric_cadence));
        out.push_str(&format!("snapshot_cadence = {}\n", s.snapshot_cadence));
        out.push_str(&format!("detail_r_threshold = {}\n", s.detail_r_threshold));
        out
    }
}

struct LineCtx<'a> {
    lineno: usize,
    section: &'a str,
    key: &'a str,
}

impl LineCtx<'_> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!(
            "line {}: [{}] {}: {}",
            self.lineno, self.section, self.key, msg
        ))
    }
}

fn parse_num<T: std::str::FromStr>(ctx: &LineCtx, tok: &str) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| ctx.err(format!("cannot parse '{tok}'")))
}

fn parse_color(ctx: &LineCtx, toks: &[&str]) -> Result<[f64; 3]> {
    if toks.len() != 3 {
        return Err(ctx.err(format!("expected 3 color values, got {}", toks.len())));
    }
    let mut c = [0.0; 3];
    for (slot, tok) in c.iter_mut().zip(toks) {
        *slot = parse_num(ctx, tok)?;
    }
    Ok(c)
}

/// Partially parsed guidance section, resolved after the whole file is
/// read so key order does not matter.
#[derive(Default)]
struct GuidanceDraft {
    mode: Option<String>,
    weight: Option<String>,
    rescale: Option<String>,
    axes: Option<RescaleAxes>,
}

#[derive(Default)]
struct FreeUDraft {
    enabled: Option<String>,
    b1: Option<f64>,
    s1: Option<f64>,
    b2: Option<f64>,
    s2: Option<f64>,
    r_threshold: Option<f64>,
}

/// Parses a config file. Unset keys take the documented defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    const SECTIONS: [&str; 8] = [
        "run",
        "grid",
        "render",
        "schedules",
        "guidance",
        "freeu",
        "prior",
        "metrics",
    ];
    let mut sds = SDSConfig::default();
    let mut resolution: Option<ResolutionSchedule> = None;
    let mut guidance = GuidanceDraft::default();
    let mut freeu = FreeUDraft::default();
    let mut prior_kind: Option<PriorKind> = None;
    let mut components: Vec<ComponentSpec> = Vec::new();
    let mut output_dir: Option<String> = None;
    let mut section = String::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown section [{name}]"
                )));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {lineno}: expected 'key = value', got '{line}'"
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {lineno}: key '{key}' before any [section]"
            )));
        }
        let repeatable = section == "prior" && key == "component";
        if !repeatable && !seen.insert((section.clone(), key.to_string())) {
            return Err(Error::Config(format!(
                "line {lineno}: duplicate key '{key}' in [{section}]"
            )));
        }
        let ctx = LineCtx {
            lineno,
            section: &section,
            key,
        };
        let toks: Vec<&str> = value.split_whitespace().collect();
        if toks.is_empty() {
            return Err(ctx.err("empty value"));
        }
        match (section.as_str(), key) {
            ("run", "total_iters") => sds.total_iters = parse_num(&ctx, value)?,
            ("run", "learning_rate") => sds.learning_rate = parse_num(&ctx, value)?,
            ("run", "weight_decay") => sds.weight_decay = parse_num(&ctx, value)?,
            ("run", "seed") => sds.seed = parse_num(&ctx, value)?,
            ("run", "weighting") => {
                sds.weighting = match toks.as_slice() {
                    ["sigma_squared"] => SdsWeighting::SigmaSquared,
                    ["constant", c] => SdsWeighting::Constant(parse_num(&ctx, c)?),
                    _ => return Err(ctx.err("want 'sigma_squared' or 'constant <c>'")),
                }
            }
            ("run", "view_reduction") => {
                sds.sum_views = match value {
                    "sum" => true,
                    "mean" => false,
                    _ => return Err(ctx.err("want 'sum' or 'mean'")),
                }
            }
            ("run", "prompt") => sds.prompt_cond = parse_cond(value).map_err(|e| ctx.err(e))?,
            ("run", "output_dir") => output_dir = Some(value.to_string()),
            ("grid", "resolution") => sds.grid_resolution = parse_num(&ctx, value)?,
            ("render", "size") => {
                resolution = Some(match toks.as_slice() {
                    [n] => {
                        let n: usize = parse_num(&ctx, n)?;
                        ResolutionSchedule::new(n, n, 0).map_err(|e| ctx.err(e))?
                    }
                    ["step", low, high, switch] => ResolutionSchedule::new(
                        parse_num(&ctx, low)?,
                        parse_num(&ctx, high)?,
                        parse_num(&ctx, switch)?,
                    )
                    .map_err(|e| ctx.err(e))?,
                    _ => return Err(ctx.err("want '<n>' or 'step <low> <high> <switch_iter>'")),
                });
            }
            ("render", "samples_per_ray") => sds.samples_per_ray = parse_num(&ctx, value)?,
            ("render", "background") => sds.background = parse_color(&ctx, &toks)?,
            ("render", "elevation") => sds.elevation_deg = parse_num(&ctx, value)?,
            ("render", "frame") => sds.frame = parse_num(&ctx, value)?,
            ("schedules", "anneal_horizon") => sds.anneal_horizon = parse_num(&ctx, value)?,
            ("schedules", "timesteps") => sds.t_count = parse_num(&ctx, value)?,
            ("guidance", "mode") => guidance.mode = Some(value.to_string()),
            ("guidance", "weight") => guidance.weight = Some(value.to_string()),
            ("guidance", "rescale") => guidance.rescale = Some(value.to_string()),
            ("guidance", "rescale_axes") => {
                guidance.axes = Some(match value {
                    "channel" => RescaleAxes::Channel,
                    "global" => RescaleAxes::Global,
                    _ => return Err(ctx.err("want 'channel' or 'global'")),
                })
            }
            ("freeu", "enabled") => freeu.enabled = Some(value.to_string()),
            ("freeu", "b1") => freeu.b1 = Some(parse_num(&ctx, value)?),
            ("freeu", "s1") => freeu.s1 = Some(parse_num(&ctx, value)?),
            ("freeu", "b2") => freeu.b2 = Some(parse_num(&ctx, value)?),
            ("freeu", "s2") => freeu.s2 = Some(parse_num(&ctx, value)?),
            ("freeu", "r_threshold") => freeu.r_threshold = Some(parse_num(&ctx, value)?),
            ("prior", "kind") => {
                prior_kind = Some(match toks.as_slice() {
                    ["analytic"] => PriorKind::Analytic,
                    ["unet", path] => PriorKind::Unet {
                        checkpoint: path.to_string(),
                    },
                    _ => return Err(ctx.err("want 'analytic' or 'unet <checkpoint>'")),
                })
            }
            ("prior", "component") => {
                let spec = match toks.as_slice() {
                    [cond, weight, std, "flat", r, g, b] => ComponentSpec {
                        cond: parse_cond(cond).map_err(|e| ctx.err(e))?,
                        weight: parse_num(&ctx, weight)?,
                        std: parse_num(&ctx, std)?,
                        shape: ShapeSpec::Flat(parse_color(&ctx, &[r, g, b])?),
                    },
                    [cond, weight, std, "disk", cx, cy, radius, r, g, b] => ComponentSpec {
                        cond: parse_cond(cond).map_err(|e| ctx.err(e))?,
                        weight: parse_num(&ctx, weight)?,
                        std: parse_num(&ctx, std)?,
                        shape: ShapeSpec::Disk {
                            cx: parse_num(&ctx, cx)?,
                            cy: parse_num(&ctx, cy)?,
                            radius: parse_num(&ctx, radius)?,
                            color: parse_color(&ctx, &[r, g, b])?,
                        },
                    },
                    _ => {
                        return Err(ctx.err(
                            "want '<cond> <weight> <std> flat <r> <g> <b>' or \
                             '<cond> <weight> <std> disk <cx> <cy> <radius> <r> <g> <b>'",
                        ))
                    }
                };
                components.push(spec);
            }
            ("metrics", "cadence") => sds.metric_cadence = parse_num(&ctx, value)?,
            ("metrics", "snapshot_cadence") => sds.snapshot_cadence = parse_num(&ctx, value)?,
            ("metrics", "detail_r_threshold") => sds.detail_r_threshold = parse_num(&ctx, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown key '{key}' in [{section}]"
                )))
            }
        }
    }

    if let Some(r) = resolution {
        sds.resolution = r;
    }
    sds.guidance = resolve_guidance(&guidance)?;
    sds.freeu = resolve_freeu(&freeu)?;
    let cfg = RunConfig {
        sds,
        prior: PriorSpec {
            kind: prior_kind.unwrap_or(PriorKind::Analytic),
            components,
        },
        output_dir,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_guidance(draft: &GuidanceDraft) -> Result<GuidancePolicy> {
    let mode = match draft.mode.as_deref() {
        None | Some("off") => {
            if draft.weight.is_some() || draft.rescale.is_some() || draft.axes.is_some() {
                return Err(Error::Config("[guidance] keys set but mode is off".into()));
            }
            return Ok(GuidancePolicy::Off);
        }
        Some("classic") => GuidanceMode::Classic,
        Some("negative_prompt") => GuidanceMode::NegativePrompt,
        Some(other) => {
            return Err(Error::Config(format!(
                "[guidance] mode: want off|classic|negative_prompt, got '{other}'"
            )))
        }
    };
    let (rescale_enabled, phi) = match draft.rescale.as_deref() {
        None | Some("off") => (false, 0.0),
        Some(v) => (
            true,
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("[guidance] rescale: bad value '{v}'")))?,
        ),
    };
    let axes = draft.axes.unwrap_or(RescaleAxes::Channel);
    let weight_tok = draft.weight.as_deref().unwrap_or("50");
    let (dynamic, weight) = if weight_tok == "dynamic" {
        (true, 0.0)
    } else {
        (
            false,
            weight_tok.parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "[guidance] weight: want a number or 'dynamic', got '{weight_tok}'"
                ))
            })?,
        )
    };
    let params = GuidanceParams::new(mode, weight, rescale_enabled, phi, axes)
        .map_err(|e| Error::Config(format!("[guidance] {e}")))?;
    Ok(if dynamic {
        GuidancePolicy::Dynamic(params)
    } else {
        GuidancePolicy::Static(params)
    })
}

fn resolve_freeu(draft: &FreeUDraft) -> Result<FreeUPolicy> {
    let factors_set =
        draft.b1.is_some() || draft.s1.is_some() || draft.b2.is_some() || draft.s2.is_some();
    match draft.enabled.as_deref() {
        None | Some("off") => {
            if factors_set || draft.r_threshold.is_some() {
                return Err(Error::Config("[freeu] keys set but enabled is off".into()));
            }
            Ok(FreeUPolicy::Off)
        }
        Some("static") => {
            let get = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| Error::Config(format!("[freeu] static mode requires {name}")))
            };
            let params = FreeUParams::new(
                get(draft.b1, "b1")?,
                get(draft.s1, "s1")?,
                get(draft.b2, "b2")?,
                get(draft.s2, "s2")?,
                draft
                    .r_threshold
                    .unwrap_or(crate::freeu::DEFAULT_R_THRESHOLD),
            )
            .map_err(|e| Error::Config(format!("[freeu] {e}")))?;
            Ok(FreeUPolicy::Static(params))
        }
        Some("dynamic") => {
            if factors_set {
                return Err(Error::Config(
                    "[freeu] dynamic mode derives factors from the timestep; remove b1/s1/b2/s2"
                        .into(),
                ));
            }
            Ok(FreeUPolicy::Dynamic {
                r_threshold: draft
                    .r_threshold
                    .unwrap_or(crate::freeu::DEFAULT_R_THRESHOLD),
            })
        }
        Some(other) => Err(Error::Config(format!(
            "[freeu] enabled: want off|static|dynamic, got '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const MINIMAL: &str = "[prior]\ncomponent = prompt0 1.0 0.05 disk 0.5 0.5 0.3 0.9 0.2 0.2\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.sds.total_iters, 2000);
        assert_eq!(cfg.sds.grid_resolution, 16);
        assert_eq!(cfg.sds.guidance, GuidancePolicy::Off);
        assert_eq!(cfg.sds.freeu, FreeUPolicy::Off);
        assert_eq!(cfg.prior.kind, PriorKind::Analytic);
        assert_eq!(cfg.prior.components.len(), 1);
        assert!(cfg.output_dir.is_none());
    }

    #[test]
    fn full_config_round_trips_through_echo() {
        let text = "\
[run]
total_iters = 500
learning_rate = 0.02
weight_decay = 0.001
seed = 9
weighting = constant 0.25
view_reduction = mean
prompt = prompt1
output_dir = out/demo

[grid]
resolution = 8

[render]
size = step 8 16 250
samples_per_ray = 24
background = 0.1 0.2 0.3
elevation = 15
frame = 0.9

[schedules]
anneal_horizon = 400
timesteps = 500

[guidance]
mode = negative_prompt
weight = dynamic
rescale = 0.7
rescale_axes = global

[prior]
kind = analytic
component = prompt1 0.6 0.05 disk 0.5 0.5 0.25 0.9 0.9 0.9
component = prompt1 0.4 0.1 flat 0.2 0.2 0.2
component = negative 1.0 0.5 flat 0.5 0.5 0.5

[metrics]
cadence = 25
snapshot_cadence = 100
detail_r_threshold = 3
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.sds.total_iters, 500);
        assert_eq!(cfg.sds.resolution.low, 8);
        assert_eq!(cfg.sds.resolution.high, 16);
        assert_eq!(cfg.sds.resolution.switch_iter, 250);
        assert!(!cfg.sds.sum_views);
        assert_eq!(cfg.sds.prompt_cond, Condition::Prompt(1));
        match cfg.sds.guidance {
            GuidancePolicy::Dynamic(p) => {
                assert_eq!(p.mode, GuidanceMode::NegativePrompt);
                assert!(p.rescale_enabled);
                assert_eq!(p.rescale_phi, 0.7);
                assert_eq!(p.rescale_axes, RescaleAxes::Global);
            }
            other => panic!("expected dynamic guidance, got {other:?}"),
        }
        let again = parse_config(&cfg.echo()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_and_sections_fail_closed() {
        let bad_key = format!("{MINIMAL}[run]\nlr = 0.1\n");
        let err = parse_config(&bad_key).unwrap_err().to_string();
        assert!(err.contains("lr"), "message was: {err}");
        let bad_section = format!("{MINIMAL}[optimizer]\nx = 1\n");
        let err = parse_config(&bad_section).unwrap_err().to_string();
        assert!(err.contains("optimizer"));
        let no_section = "total_iters = 5\n";
        assert!(parse_config(no_section).is_err());
        let dup = format!("{MINIMAL}[run]\nseed = 1\nseed = 2\n");
        let err = parse_config(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"));
    }

    #[test]
    fn freeu_with_analytic_prior_is_rejected() {
        let text = format!("{MINIMAL}[freeu]\nenabled = dynamic\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("unet"), "message was: {err}");
    }

    #[test]
    fn guidance_modes_require_reference_components() {
        let classic = format!("{MINIMAL}[guidance]\nmode = classic\nweight = 50\n");
        let err = parse_config(&classic).unwrap_err().to_string();
        assert!(err.contains("uncond"), "message was: {err}");
        let ok = format!(
            "{MINIMAL}component = uncond 1.0 0.5 flat 0.5 0.5 0.5\n[guidance]\nmode = classic\nweight = 50\n"
        );
        assert!(parse_config(&ok).is_ok());
    }

    #[test]
    fn freeu_static_requires_all_factors() {
        let text = "\
[render]
size = 16
[freeu]
enabled = static
b1 = 1.2
[prior]
kind = unet model.tun1
";
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("s1"), "message was: {err}");
    }

    #[test]
    fn unet_prior_requires_power_of_two_sizes() {
        let text = "\
[render]
size = 12
[prior]
kind = unet model.tun1
";
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("power-of-two"), "message was: {err}");
    }

    #[test]
    fn disk_rasterization_covers_expected_pixels() {
        let shape = ShapeSpec::Disk {
            cx: 0.5,
            cy: 0.5,
            radius: 0.25,
            color: [1.0, 0.0, 0.0],
        };
        let img = rasterize(&shape, 8, &[0.5; 3]);
        // Center pixel inside, corner outside.
        assert_eq!(img[[0, 4, 4]], 1.0);
        assert_eq!(img[[1, 4, 4]], 0.0);
        assert_eq!(img[[0, 0, 0]], 0.5);
        // Disk area approximates pi r^2 = pi/16 of the image.
        let inside = img
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .filter(|&&v| v == 1.0)
            .count();
        let frac = inside as f64 / 64.0;
        assert_abs_diff_eq!(frac, std::f64::consts::PI / 16.0, epsilon = 0.08);
    }

    #[test]
    fn component_weights_must_sum_to_one_per_condition() {
        let text = "[prior]\ncomponent = prompt0 0.5 0.05 flat 0.9 0.9 0.9\n";
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("prompt0"), "message was: {err}");
    }

    #[test]
    fn spec_predictor_serves_both_schedule_resolutions() {
        let text = "\
[render]
size = step 8 16 100
[prior]
component = prompt0 1.0 0.1 flat 0.9 0.9 0.9
";
        let cfg = parse_config(text).unwrap();
        let mut pred = SpecPredictor::build(&cfg).unwrap();
        for res in [8usize, 16] {
            let z = Array3::zeros((3, res, res));
            let out = pred.predict(&z, 500, Condition::Prompt(0), None).unwrap();
            assert_eq!(out.dim(), (3, res, res));
        }
        let z = Array3::zeros((3, 32, 32));
        assert!(pred.predict(&z, 500, Condition::Prompt(0), None).is_err());
    }

    #[test]
    fn echo_of_minimal_config_reparses_identically() {
        let cfg = parse_config(MINIMAL).unwrap();
        let echoed = parse_config(&cfg.echo()).unwrap();
        assert_eq!(cfg, echoed);
    }
}
