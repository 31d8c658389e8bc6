//! Independent reference implementations used by tests and `selftest`.
//!
//! Everything here favors the most literal formula over speed and shares
//! no code with the fast paths it checks.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use std::f64::consts::TAU;

/// Direct centered DFT, unitary convention, O((HW)^2).
///
/// Bin `(p, q)` holds frequency `(p - H/2, q - W/2)`.
pub fn naive_dft2_centered(image: ArrayView2<Complex64>) -> Array2<Complex64> {
    let (h, w) = image.dim();
    let norm = 1.0 / ((h * w) as f64).sqrt();
    Array2::from_shape_fn((h, w), |(p, q)| {
        let fp = p as f64 - (h / 2) as f64;
        let fq = q as f64 - (w / 2) as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..h {
            for n in 0..w {
                let phase = -TAU * (fp * m as f64 / h as f64 + fq * n as f64 / w as f64);
                acc += image[[m, n]] * Complex64::new(phase.cos(), phase.sin());
            }
        }
        acc * norm
    })
}

/// Direct inverse of [`naive_dft2_centered`].
pub fn naive_idft2_centered(spectrum: ArrayView2<Complex64>) -> Array2<Complex64> {
    let (h, w) = spectrum.dim();
    let norm = 1.0 / ((h * w) as f64).sqrt();
    Array2::from_shape_fn((h, w), |(m, n)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..h {
            for q in 0..w {
                let fp = p as f64 - (h / 2) as f64;
                let fq = q as f64 - (w / 2) as f64;
                let phase = TAU * (fp * m as f64 / h as f64 + fq * n as f64 / w as f64);
                acc += spectrum[[p, q]] * Complex64::new(phase.cos(), phase.sin());
            }
        }
        acc * norm
    })
}

/// Textbook emission-absorption compositing over explicit samples,
/// front to back: `P = sum_k T_k a_k c_k + T_N bg`.
pub fn composite_reference(samples: &[(f64, [f64; 3])], delta: f64, bg: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    for (sigma, color) in samples {
        let alpha = 1.0 - (-sigma * delta).exp();
        for (o, c) in out.iter_mut().zip(color) {
            *o += transmittance * alpha * c;
        }
        transmittance *= 1.0 - alpha;
    }
    for (o, b) in out.iter_mut().zip(bg) {
        *o += transmittance * b;
    }
    out
}

/// Central-difference gradient of a scalar function, step `h` per
/// coordinate.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        *g = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative mismatch between two gradients, with an absolute
/// floor so near-zero entries compare absolutely.
pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}
