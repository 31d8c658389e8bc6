//! Operator-facing smoke suite: checks the numerical kernels against
//! small independent references computed right here. One line per check;
//! any failure turns the exit code nonzero.

use distill_core::freeu::fft2;
use distill_core::guidance::{cfg_combine, cfg_negative, rescale_cfg_axes, RescaleAxes, ScorePair};
use distill_core::oracle::{fd_gradient, max_rel_err, naive_dft2_centered};
use distill_core::prior::{
    analytic_eps, log_marginal, make_cosine_schedule, Condition, GaussianMixturePrior,
    MixtureComponent,
};
use distill_core::renderer::{render, render_grad, CameraView, VoxelGrid};
use distill_core::sds::{adamw_step, AdamWState};
use distill_core::{Error, Result};
use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn check(cond: bool, msg: String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn check_schedule() -> Check {
    let s = make_cosine_schedule(1000).map_err(|e| e.to_string())?;
    for t in 0..s.len() {
        let (a, sg) = (s.alpha(t), s.sigma(t));
        check(
            (a * a + sg * sg - 1.0).abs() <= 1e-12,
            format!("alpha^2 + sigma^2 drifts from 1 at t={t}"),
        )?;
        if t > 0 {
            check(
                s.alpha(t) < s.alpha(t - 1) && s.sigma(t) > s.sigma(t - 1),
                format!("coefficients not monotone at t={t}"),
            )?;
        }
    }
    Ok(())
}

fn check_guidance() -> Check {
    let mut r = rng(11);
    for _ in 0..5 {
        let p = random_tensor(&mut r, (3, 4, 4));
        let q = random_tensor(&mut r, (3, 4, 4));
        let pair = ScorePair::new(p.clone(), q.clone()).map_err(|e| e.to_string())?;
        check(
            cfg_combine(&pair, 0.0) == p,
            "omega = 0 must return the primary bitwise".into(),
        )?;
        let back = cfg_negative(&pair, 1.0);
        let d0 = (&back - &p).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        check(d0 <= 1e-12, format!("w = 1 drifts from primary by {d0:e}"))?;
        let omega = 3.5;
        let classic = cfg_combine(&pair, omega);
        let negative = cfg_negative(&pair, 1.0 + omega);
        let d1 = (&classic - &negative)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        check(
            d1 <= 1e-12,
            format!("forms disagree by {d1:e} at omega = {omega}"),
        )?;
    }
    Ok(())
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn check_rescale() -> Check {
    let mut r = rng(12);
    let pos = random_tensor(&mut r, (3, 8, 8));
    let cfg = random_tensor(&mut r, (3, 8, 8)).mapv(|v| 3.0 * v);
    let id = rescale_cfg_axes(&pos, &cfg, 0.0, RescaleAxes::Channel).map_err(|e| e.to_string())?;
    check(id == cfg, "phi = 0 must be a bitwise no-op".into())?;
    let full =
        rescale_cfg_axes(&pos, &cfg, 1.0, RescaleAxes::Channel).map_err(|e| e.to_string())?;
    for ch in 0..3 {
        let want = population_std(
            pos.index_axis(ndarray::Axis(0), ch)
                .to_owned()
                .as_slice()
                .unwrap(),
        );
        let got = population_std(
            full.index_axis(ndarray::Axis(0), ch)
                .to_owned()
                .as_slice()
                .unwrap(),
        );
        check(
            (got - want).abs() <= 1e-9 * want.abs().max(1e-12),
            format!("channel {ch} std {got} != {want} at phi = 1"),
        )?;
    }
    Ok(())
}

fn check_fft() -> Check {
    let mut r = rng(13);
    for _ in 0..4 {
        let img = ndarray::Array2::from_shape_fn((8, 8), |_| {
            Complex64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)
        });
        let fast = fft2(img.view()).map_err(|e| e.to_string())?;
        let slow = naive_dft2_centered(img.view());
        let diff = fast
            .iter()
            .zip(slow.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
        check(
            diff <= 1e-9,
            format!("fft deviates from naive dft by {diff:e}"),
        )?;
    }
    Ok(())
}

fn check_compositing() -> Check {
    let d = 3;
    let color_logit = 0.7_f64;
    let color = 1.0 / (1.0 + (-color_logit).exp());
    let grid = VoxelGrid::uniform(d, -0.4, color_logit).map_err(|e| e.to_string())?;
    let view = CameraView::new(25.0, 15.0, 1.0).map_err(|e| e.to_string())?;
    let bg = [color; 3];
    let img = render(&grid, &view, 4, 16, &bg).map_err(|e| e.to_string())?;
    let drift = img.iter().fold(0.0_f64, |m, v| m.max((v - color).abs()));
    check(
        drift <= 1e-12,
        format!("background-matched render drifts by {drift:e}"),
    )?;
    let dense = VoxelGrid::uniform(d, 40.0, color_logit).map_err(|e| e.to_string())?;
    let img = render(&dense, &view, 4, 64, &[0.0; 3]).map_err(|e| e.to_string())?;
    let drift = img.iter().fold(0.0_f64, |m, v| m.max((v - color).abs()));
    check(
        drift <= 1e-6,
        format!("saturated render misses the voxel color by {drift:e}"),
    )
}

fn check_weights() -> Check {
    let grid = VoxelGrid::uniform(4, 0.3, 40.0).map_err(|e| e.to_string())?;
    let view = CameraView::new(70.0, -20.0, 1.0).map_err(|e| e.to_string())?;
    let img = render(&grid, &view, 5, 24, &[1.0; 3]).map_err(|e| e.to_string())?;
    let drift = img.iter().fold(0.0_f64, |m, v| m.max((v - 1.0).abs()));
    check(
        drift <= 1e-12,
        format!("sample weights and background leak {drift:e} from a partition"),
    )
}

fn check_render_grad() -> Check {
    let mut r = rng(14);
    let d = 3;
    let n = d * d * d;
    let density: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let color: Vec<f64> = (0..3 * n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let grid =
        VoxelGrid::from_logits(d, density.clone(), color.clone()).map_err(|e| e.to_string())?;
    let view = CameraView::new(33.0, 15.0, 1.0).map_err(|e| e.to_string())?;
    let bg = [0.3, 0.5, 0.7];
    let upstream = random_tensor(&mut r, (3, 3, 3));

    let grad = render_grad(&grid, &view, 3, 6, &bg, &upstream).map_err(|e| e.to_string())?;
    let mut got = grad.density.clone();
    got.extend_from_slice(&grad.color);

    let mut params = density;
    params.extend_from_slice(&color);
    let loss = |p: &[f64]| {
        let g = VoxelGrid::from_logits(d, p[..n].to_vec(), p[n..].to_vec()).unwrap();
        let img = render(&g, &view, 3, 6, &bg).unwrap();
        img.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
    };
    let want = fd_gradient(loss, &params, 1e-5);
    let err = max_rel_err(&got, &want, 1e-6);
    check(err <= 1e-4, format!("gradient off by rel {err:e}"))
}

fn check_analytic_eps() -> Check {
    let mut r = rng(15);
    let shape = (3, 2, 2);
    let mut prior = GaussianMixturePrior::new();
    prior
        .insert(
            Condition::Prompt(0),
            vec![
                MixtureComponent {
                    mean: Array3::from_elem(shape, 0.2),
                    std: 0.3,
                    weight: 0.5,
                },
                MixtureComponent {
                    mean: Array3::from_elem(shape, 0.8),
                    std: 0.4,
                    weight: 0.5,
                },
            ],
        )
        .map_err(|e| e.to_string())?;
    let sched = make_cosine_schedule(1000).map_err(|e| e.to_string())?;
    let t = 600;
    let z = random_tensor(&mut r, shape);
    let eps =
        analytic_eps(&z, t, Condition::Prompt(0), &prior, &sched).map_err(|e| e.to_string())?;
    let flat: Vec<f64> = z.iter().copied().collect();
    let logp = |p: &[f64]| {
        let zt = Array3::from_shape_vec(shape, p.to_vec()).unwrap();
        log_marginal(&zt, t, Condition::Prompt(0), &prior, &sched).unwrap()
    };
    let score = fd_gradient(logp, &flat, 1e-5);
    let want: Vec<f64> = score.iter().map(|g| -sched.sigma(t) * g).collect();
    let got: Vec<f64> = eps.iter().copied().collect();
    let err = max_rel_err(&got, &want, 1e-6);
    check(err <= 1e-4, format!("score off by rel {err:e}"))
}

fn check_adamw() -> Check {
    let mut params = vec![1.0, -2.0];
    let grads = vec![0.5, 0.25];
    let mut state = AdamWState::new(2);
    adamw_step(&mut params, &grads, &mut state, 0.1, 0.1).map_err(|e| e.to_string())?;
    let mut want = vec![1.0, -2.0];
    for (p, g) in want.iter_mut().zip(&grads) {
        let m_hat = (1.0 - state.beta1) * g / (1.0 - state.beta1);
        let v_hat = (1.0 - state.beta2) * g * g / (1.0 - state.beta2);
        *p -= 0.1 * (m_hat / (v_hat.sqrt() + state.eps) + 0.1 * *p);
    }
    let drift = params
        .iter()
        .zip(&want)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    check(drift <= 1e-15, format!("first step drifts by {drift:e}"))
}

pub fn cmd_selftest() -> Result<()> {
    let checks: [(&str, fn() -> Check); 9] = [
        ("cosine schedule is variance preserving", check_schedule),
        ("guidance algebra identities hold", check_guidance),
        ("rescale matches reference statistics", check_rescale),
        ("fft agrees with the naive dft", check_fft),
        (
            "compositing saturates to the voxel color",
            check_compositing,
        ),
        ("ray weights form a partition of unity", check_weights),
        (
            "render gradient matches finite differences",
            check_render_grad,
        ),
        (
            "analytic score matches finite differences",
            check_analytic_eps,
        ),
        ("adamw matches a hand-computed step", check_adamw),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("ok    {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    if failures == 0 {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(Error::Config(format!(
            "selftest: {failures} check(s) failed"
        )))
    }
}
