//! Subcommand implementations. Every artifact lands inside the resolved
//! output directory; nothing outside it is touched.
//!
//! Output directory precedence: `--out` flag, then the `DISTILL_OUT`
//! environment variable (as a root, joined with a name derived from the
//! config file), then the config's own `output_dir`, then `out/<name>`.

use clap::Args;
use distill_core::config::{parse_config, RunConfig};
use distill_core::freeu::DEFAULT_R_THRESHOLD;
use distill_core::renderer::{load_grid, render, save_grid, write_ppm, CameraView};
use distill_core::schedules::{
    anneal_timestep_range_over, cfg_schedule, freeu_schedule, sample_timestep, ResolutionSchedule,
};
use distill_core::sds::{Engine, FreeUPolicy, GuidancePolicy, MetricsRow, RunOutput};
use distill_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct RunArgs {
    /// Experiment config file.
    pub config: PathBuf,
    /// Output directory; wins over DISTILL_OUT and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the iteration count.
    #[arg(long)]
    pub total_iters: Option<u64>,
    /// Full-scale preset: 10000 iterations, 8000-iteration anneal,
    /// render resolution stepping 32 -> 100 at iteration 5000.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Base experiment config file; policies override its guidance and
    /// FreeU settings while sharing its seed.
    pub config: PathBuf,
    /// Output directory; one subdirectory per policy.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the shared seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the iteration count for every policy.
    #[arg(long)]
    pub total_iters: Option<u64>,
    /// Comma-separated policies: baseline, dynamic_freeu, dynamic_cfg,
    /// dynamic_both, static_w<N>.
    #[arg(long, value_delimiter = ',', required = true)]
    pub policies: Vec<String>,
    /// Run policies on separate threads; outputs are unchanged.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args)]
pub struct DumpArgs {
    /// Experiment config file supplying iteration count, seed, and
    /// schedule settings.
    pub config: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RenderArgs {
    /// Saved voxel grid (VOXG file).
    pub grid: PathBuf,
    /// Camera azimuths in degrees, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 120.0, 240.0])]
    pub azimuth: Vec<f64>,
    /// Camera elevation in degrees.
    #[arg(long, default_value_t = 10.0)]
    pub elevation: f64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Samples per ray.
    #[arg(long, default_value_t = 64)]
    pub samples_per_ray: usize,
    /// Orthographic frame half-width.
    #[arg(long, default_value_t = 1.0)]
    pub frame: f64,
    /// Background color, three values in [0, 1].
    #[arg(long, num_args = 3, default_values_t = vec![0.5, 0.5, 0.5])]
    pub background: Vec<f64>,
    /// Output directory for the PPM images.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    parse_config(&text)
}

fn config_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn resolve_out(flag: Option<PathBuf>, cfg_dir: Option<&str>, stem: &str) -> PathBuf {
    if let Some(f) = flag {
        return f;
    }
    if let Ok(root) = std::env::var("DISTILL_OUT") {
        if !root.is_empty() {
            return PathBuf::from(root).join(stem);
        }
    }
    if let Some(d) = cfg_dir {
        return PathBuf::from(d);
    }
    PathBuf::from("out").join(stem)
}

/// Flags override config keys; `--full-scale` is applied first so an
/// explicit `--total-iters` still wins.
fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    total_iters: Option<u64>,
    full_scale: bool,
) -> Result<()> {
    if full_scale {
        cfg.sds.total_iters = 10_000;
        cfg.sds.anneal_horizon = 8_000;
        cfg.sds.resolution = ResolutionSchedule::new(32, 100, 5_000)?;
    }
    if let Some(s) = seed {
        cfg.sds.seed = s;
    }
    if let Some(t) = total_iters {
        cfg.sds.total_iters = t;
    }
    cfg.validate()
}

fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut text = String::from(MetricsRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Executes one configured run and writes its artifacts: the resolved
/// config echo, metrics.csv, snapshot PPMs, and the final grid. On a
/// numerical abort a diagnostics file is written before the error is
/// passed up.
fn run_one(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config_resolved.cfg"), cfg.echo())?;
    let predictor = cfg.build_predictor()?;
    let mut engine = Engine::new(cfg.sds, predictor)?;
    let output = match engine.optimize() {
        Ok(o) => o,
        Err(e) => {
            if let Error::NumericalAbort { iter, .. } = &e {
                let diag = format!(
                    "{e}\nseed: {}\niteration: {iter}\nresolved config: config_resolved.cfg\n",
                    cfg.sds.seed
                );
                let _ = fs::write(out_dir.join("abort.txt"), diag);
            }
            return Err(e);
        }
    };
    write_metrics(&output.metrics, &out_dir.join("metrics.csv"))?;
    for s in &output.snapshots {
        let name = format!("snap_{:06}_{:03}.ppm", s.iter, s.azimuth_deg);
        write_ppm(&s.image, &out_dir.join(name))?;
    }
    save_grid(&output.grid, &out_dir.join("grid.voxg"))?;
    Ok(output)
}

pub fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    apply_overrides(&mut cfg, a.seed, a.total_iters, a.full_scale)?;
    let out_dir = resolve_out(a.out, cfg.output_dir.as_deref(), &config_stem(&a.config));
    cfg.output_dir = Some(out_dir.display().to_string());
    let output = run_one(&cfg, &out_dir)?;
    if let Some(row) = output.metrics.last() {
        println!(
            "final: size={:.6} rough={:.6} detail={:.6}",
            row.size, row.rough, row.detail
        );
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

/// A named override of the base config's guidance and FreeU settings.
/// Rows are always emitted in canonical order: named policies first,
/// then static weights ascending, so weight sweeps read monotonically.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Policy {
    Baseline,
    DynamicFreeu,
    DynamicCfg,
    DynamicBoth,
    StaticW(u64),
}

impl Policy {
    fn parse(s: &str) -> Result<Policy> {
        match s {
            "baseline" => Ok(Policy::Baseline),
            "dynamic_freeu" => Ok(Policy::DynamicFreeu),
            "dynamic_cfg" => Ok(Policy::DynamicCfg),
            "dynamic_both" => Ok(Policy::DynamicBoth),
            _ => {
                if let Some(num) = s.strip_prefix("static_w") {
                    let w: u64 = num
                        .parse()
                        .map_err(|_| Error::Config(format!("bad static weight in policy `{s}`")))?;
                    return Ok(Policy::StaticW(w));
                }
                Err(Error::Config(format!(
                    "unknown policy `{s}` (want baseline, dynamic_freeu, dynamic_cfg, \
                     dynamic_both, or static_w<N>)"
                )))
            }
        }
    }

    fn name(self) -> String {
        match self {
            Policy::Baseline => "baseline".into(),
            Policy::DynamicFreeu => "dynamic_freeu".into(),
            Policy::DynamicCfg => "dynamic_cfg".into(),
            Policy::DynamicBoth => "dynamic_both".into(),
            Policy::StaticW(w) => format!("static_w{w}"),
        }
    }

    fn order_key(self) -> (u8, u64) {
        match self {
            Policy::Baseline => (0, 0),
            Policy::DynamicFreeu => (1, 0),
            Policy::DynamicCfg => (2, 0),
            Policy::DynamicBoth => (3, 0),
            Policy::StaticW(w) => (4, w),
        }
    }

    fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let gp = match base.sds.guidance {
            GuidancePolicy::Static(p) | GuidancePolicy::Dynamic(p) => p,
            GuidancePolicy::Off => {
                return Err(Error::Config(
                    "compare needs guidance configured (mode != off) in the base config".into(),
                ))
            }
        };
        let r = freeu_r(&base.sds.freeu);
        let static_w = |w: f64| {
            GuidancePolicy::Static(distill_core::guidance::GuidanceParams { weight: w, ..gp })
        };
        let mut cfg = base.clone();
        match self {
            Policy::Baseline => {
                cfg.sds.guidance = static_w(50.0);
                cfg.sds.freeu = FreeUPolicy::Off;
            }
            Policy::DynamicFreeu => {
                cfg.sds.guidance = static_w(50.0);
                cfg.sds.freeu = FreeUPolicy::Dynamic { r_threshold: r };
            }
            Policy::DynamicCfg => {
                cfg.sds.guidance = GuidancePolicy::Dynamic(gp);
                cfg.sds.freeu = FreeUPolicy::Off;
            }
            Policy::DynamicBoth => {
                cfg.sds.guidance = GuidancePolicy::Dynamic(gp);
                cfg.sds.freeu = FreeUPolicy::Dynamic { r_threshold: r };
            }
            Policy::StaticW(w) => {
                cfg.sds.guidance = static_w(w as f64);
                cfg.sds.freeu = FreeUPolicy::Off;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn freeu_r(policy: &FreeUPolicy) -> f64 {
    match policy {
        FreeUPolicy::Static(p) => p.r_threshold,
        FreeUPolicy::Dynamic { r_threshold } => *r_threshold,
        FreeUPolicy::Off => DEFAULT_R_THRESHOLD,
    }
}

pub fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut base = load_config(&a.config)?;
    apply_overrides(&mut base, a.seed, a.total_iters, false)?;
    let mut policies: Vec<Policy> = a
        .policies
        .iter()
        .map(|s| Policy::parse(s))
        .collect::<Result<_>>()?;
    policies.sort_by_key(|p| p.order_key());
    policies.dedup();

    let stem = format!("{}_compare", config_stem(&a.config));
    let out_root = resolve_out(a.out, base.output_dir.as_deref(), &stem);
    let mut jobs = Vec::new();
    for p in &policies {
        let mut cfg = p.apply(&base)?;
        let dir = out_root.join(p.name());
        cfg.output_dir = Some(dir.display().to_string());
        jobs.push((cfg, dir));
    }

    let results: Vec<Result<RunOutput>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|(cfg, dir)| s.spawn(move || run_one(cfg, dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("policy thread panicked"))
                .collect()
        })
    } else {
        jobs.iter().map(|(cfg, dir)| run_one(cfg, dir)).collect()
    };
    let mut outputs = Vec::new();
    for r in results {
        outputs.push(r?);
    }

    let mut csv = format!("policy,{}\n", MetricsRow::CSV_HEADER);
    for (p, out) in policies.iter().zip(&outputs) {
        for row in &out.metrics {
            csv.push_str(&format!("{},{}\n", p.name(), row.csv_line()));
        }
    }
    fs::write(out_root.join("compare.csv"), &csv)?;

    let mut table = format!(
        "{:<16} {:>10} {:>10} {:>10}\n",
        "policy", "size", "rough", "detail"
    );
    for (p, out) in policies.iter().zip(&outputs) {
        let row = out.metrics.last().expect("runs keep their final row");
        table.push_str(&format!(
            "{:<16} {:>10.6} {:>10.6} {:>10.6}\n",
            p.name(),
            row.size,
            row.rough,
            row.detail
        ));
    }
    fs::write(out_root.join("table.txt"), &table)?;
    print!("{table}");
    println!("artifacts in {}", out_root.display());
    Ok(())
}

pub fn cmd_schedule_dump(a: DumpArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let s = &cfg.sds;
    let r = freeu_r(&s.freeu);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut text = String::from("iter,t,b1,s1,b2,s2,cfg_w,t_min,t_max,res\n");
    for iter in 1..=s.total_iters {
        let range = anneal_timestep_range_over(iter, s.anneal_horizon);
        let t = sample_timestep(range, &mut rng, s.t_count)?;
        let fu = freeu_schedule(t, r);
        let w = cfg_schedule(iter, s.total_iters)?;
        let res = s.resolution.at(iter);
        text.push_str(&format!(
            "{iter},{t},{},{},{},{},{w},{},{},{res}\n",
            fu.b1, fu.s1, fu.b2, fu.s2, range.t_min, range.t_max
        ));
    }
    match a.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn azimuth_tag(az: f64) -> String {
    let az = az.rem_euclid(360.0);
    if (az - az.round()).abs() < 1e-9 {
        format!("{:03}", az.round() as u32)
    } else {
        format!("{az}").replace('.', "p")
    }
}

pub fn cmd_render(a: RenderArgs) -> Result<()> {
    if a.background.len() != 3 {
        return Err(Error::Config(
            "background needs exactly three values".into(),
        ));
    }
    let bg = [a.background[0], a.background[1], a.background[2]];
    let grid = load_grid(&a.grid)?;
    let out_dir = resolve_out(a.out, None, "render");
    fs::create_dir_all(&out_dir)?;
    for az in &a.azimuth {
        let view = CameraView::new(*az, a.elevation, a.frame)?;
        let image = render(&grid, &view, a.size, a.samples_per_ray, &bg)?;
        let path = out_dir.join(format!("render_az{}.ppm", azimuth_tag(*az)));
        write_ppm(&image, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
