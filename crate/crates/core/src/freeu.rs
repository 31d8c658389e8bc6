//! FreeU feature rebalancing.
//!
//! Two independent modifications applied to UNet decoder features right
//! before skip concatenation: the first half of the backbone channels is
//! multiplied by a factor `b`, and the low-frequency band of each skip
//! channel is multiplied by a factor `s` in the centered Fourier domain.
//! Factors of 1 leave features untouched (up to FFT round-trip error), so
//! the hooks can stay wired in permanently and be driven by schedules.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Per-stage scaling factors and the shared spectral window half-width.
///
/// Stage 1 is the innermost (lowest-resolution) decoder block, stage 2 the
/// one above it. `(b, s) = (1, 1)` is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeUParams {
    pub b1: f64,
    pub s1: f64,
    pub b2: f64,
    pub s2: f64,
    /// Chebyshev half-width of the scaled low-frequency window, in bins.
    pub r_threshold: f64,
}

impl FreeUParams {
    pub const IDENTITY: FreeUParams = FreeUParams {
        b1: 1.0,
        s1: 1.0,
        b2: 1.0,
        s2: 1.0,
        r_threshold: 1.0,
    };

    pub fn new(b1: f64, s1: f64, b2: f64, s2: f64, r_threshold: f64) -> Result<Self> {
        if ![b1, s1, b2, s2, r_threshold].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "FreeU factors must be finite".into(),
            ));
        }
        if r_threshold < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "r_threshold must be >= 0, got {r_threshold}"
            )));
        }
        Ok(FreeUParams {
            b1,
            s1,
            b2,
            s2,
            r_threshold,
        })
    }

    /// `(b, s)` pair for decoder stage 1 or 2.
    pub fn stage_factors(&self, stage: usize) -> Result<(f64, f64)> {
        match stage {
            1 => Ok((self.b1, self.s1)),
            2 => Ok((self.b2, self.s2)),
            _ => Err(Error::InvalidParameter(format!(
                "unknown decoder stage {stage}"
            ))),
        }
    }
}

/// Multiplies channels `i < C/2` of a `C x H x W` feature map by `b`.
/// Channels `i >= C/2` are returned bitwise unchanged.
pub fn scale_backbone(x: &Array3<f64>, b: f64) -> Result<Array3<f64>> {
    let c = x.shape()[0];
    if c % 2 != 0 {
        return Err(Error::OddChannels(c));
    }
    let mut out = x.clone();
    out.slice_mut(s![..c / 2, .., ..]).mapv_inplace(|v| v * b);
    Ok(out)
}

fn require_pow2(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(h, w));
    }
    Ok(())
}

/// Rows then columns, unnormalized, in place.
fn fft2_raw(data: &mut Array2<Complex64>, direction: FftDirection) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    for mut row in data.outer_iter_mut() {
        row_fft.process(row.as_slice_mut().expect("row-major layout"));
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for (i, v) in col.iter_mut().enumerate() {
            *v = data[[i, j]];
        }
        col_fft.process(&mut col);
        for (i, v) in col.iter().enumerate() {
            data[[i, j]] = *v;
        }
    }
}

/// Swaps quadrants so bin `(H/2, W/2)` holds DC. Power-of-two dims are
/// even (or 1), making the swap its own inverse.
fn shift2(data: ArrayView2<Complex64>) -> Array2<Complex64> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((h, w), |(i, j)| data[[(i + h / 2) % h, (j + w / 2) % w]])
}

/// Unitary centered 2D FFT; DC lands at bin `(H/2, W/2)`.
///
/// Sizes are restricted to powers of two so centering is exact.
pub fn fft2(image: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    let (h, w) = image.dim();
    require_pow2(h, w)?;
    let mut data = image.to_owned();
    fft2_raw(&mut data, FftDirection::Forward);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|v| v * scale);
    Ok(shift2(data.view()))
}

/// Inverse of [`fft2`].
pub fn ifft2(spectrum: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    let (h, w) = spectrum.dim();
    require_pow2(h, w)?;
    let mut data = shift2(spectrum);
    fft2_raw(&mut data, FftDirection::Inverse);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|v| v * scale);
    Ok(data)
}

/// Default spectral window half-width: a 3x3 block of bins around DC.
pub const DEFAULT_R_THRESHOLD: f64 = 2.0;

/// True for centered bins whose Chebyshev distance from DC is strictly
/// below `r_threshold`. `r_threshold = 1` admits the DC bin only.
pub(crate) fn in_window(i: usize, j: usize, h: usize, w: usize, r_threshold: f64) -> bool {
    let di = (i as f64) - ((h / 2) as f64);
    let dj = (j as f64) - ((w / 2) as f64);
    di.abs().max(dj.abs()) < r_threshold
}

/// Scales the centered low-frequency window of every channel by `s`.
///
/// Imaginary residue after the inverse transform is discarded; it stays
/// below 1e-9 because the window is real and symmetric in effect only up
/// to scaling, and inputs are real.
pub fn scale_skip_lowfreq(x: &Array3<f64>, s_factor: f64, r_threshold: f64) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    require_pow2(h, w)?;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let complex = x.index_axis(Axis(0), ch).mapv(|v| Complex64::new(v, 0.0));
        let mut spec = fft2(complex.view())?;
        for i in 0..h {
            for j in 0..w {
                if in_window(i, j, h, w, r_threshold) {
                    spec[[i, j]] *= s_factor;
                }
            }
        }
        let back = ifft2(spec.view())?;
        out.index_axis_mut(Axis(0), ch).assign(&back.mapv(|v| v.re));
    }
    Ok(out)
}

/// Applies the stage's `(b, s)` pair: backbone channels through
/// [`scale_backbone`], skip features through [`scale_skip_lowfreq`].
/// Call right before concatenating the two in the decoder.
pub fn apply_freeu(
    stage: usize,
    backbone: &Array3<f64>,
    skip: &Array3<f64>,
    params: &FreeUParams,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (b, s_factor) = params.stage_factors(stage)?;
    Ok((
        scale_backbone(backbone, b)?,
        scale_skip_lowfreq(skip, s_factor, params.r_threshold)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn backbone_unit_factor_is_bitwise_identity() {
        let x = random_map(4, 8, 8, 1);
        let y = scale_backbone(&x, 1.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn backbone_scales_lower_half_only() {
        let x = Array3::from_elem((4, 2, 2), 1.0);
        let y = scale_backbone(&x, 2.0).unwrap();
        assert!(y.slice(s![..2, .., ..]).iter().all(|&v| v == 2.0));
        assert!(y.slice(s![2.., .., ..]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backbone_matches_elementwise_loop() {
        let x = random_map(8, 4, 4, 2);
        let y = scale_backbone(&x, 0.6).unwrap();
        for ch in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = if ch < 4 {
                        x[[ch, i, j]] * 0.6
                    } else {
                        x[[ch, i, j]]
                    };
                    assert_eq!(y[[ch, i, j]], want);
                }
            }
        }
    }

    #[test]
    fn backbone_rejects_odd_channel_count() {
        let x = Array3::zeros((3, 4, 4));
        assert!(matches!(
            scale_backbone(&x, 2.0),
            Err(Error::OddChannels(3))
        ));
    }

    #[test]
    fn fft_of_impulse_has_flat_magnitude() {
        let mut img = Array2::from_elem((4, 4), Complex64::new(0.0, 0.0));
        img[[0, 0]] = Complex64::new(1.0, 0.0);
        let spec = fft2(img.view()).unwrap();
        for v in spec.iter() {
            assert_abs_diff_eq!(v.norm(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft_of_constant_is_single_center_bin() {
        let n = 8;
        let c = 3.5;
        let img = Array2::from_elem((n, n), Complex64::new(c, 0.0));
        let spec = fft2(img.view()).unwrap();
        for ((i, j), v) in spec.indexed_iter() {
            // c * n^2 under the plain-sum convention, divided by the
            // unitary factor n.
            let want = if (i, j) == (n / 2, n / 2) {
                c * n as f64
            } else {
                0.0
            };
            assert_abs_diff_eq!(v.re, want, epsilon = 1e-9);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fft_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array2::from_shape_fn((4, 4), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let fast = fft2(img.view()).unwrap();
        let slow = oracle::naive_dft2_centered(img.view());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-9);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn ifft_matches_direct_inverse_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = Array2::from_shape_fn((8, 4), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let fast = ifft2(spec.view()).unwrap();
        let slow = oracle::naive_idft2_centered(spec.view());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-9);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let img = Array2::from_elem((3, 4), Complex64::new(0.0, 0.0));
        assert!(matches!(fft2(img.view()), Err(Error::NonPowerOfTwo(3, 4))));
        let x = Array3::<f64>::zeros((2, 4, 6));
        assert!(scale_skip_lowfreq(&x, 0.5, 1.0).is_err());
    }

    #[test]
    fn skip_unit_factor_round_trips() {
        let x = random_map(2, 16, 16, 5);
        let y = scale_skip_lowfreq(&x, 1.0, 1.0).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn skip_scales_constant_image_everywhere() {
        let x = Array3::from_elem((1, 8, 8), 2.0);
        let y = scale_skip_lowfreq(&x, 0.5, 1.0).unwrap();
        for v in y.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn skip_leaves_nyquist_checkerboard_unchanged() {
        let x = Array3::from_shape_fn(
            (1, 8, 8),
            |(_, i, j)| {
                if (i + j) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            },
        );
        let y = scale_skip_lowfreq(&x, 0.5, 1.0).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn skip_changes_only_windowed_bins() {
        let x = random_map(1, 16, 16, 6);
        let r = 2.0;
        let y = scale_skip_lowfreq(&x, 0.3, r).unwrap();
        let to_spec = |m: &Array3<f64>| {
            let plane = m.index_axis(Axis(0), 0).mapv(|v| Complex64::new(v, 0.0));
            fft2(plane.view()).unwrap()
        };
        let sx = to_spec(&x);
        let sy = to_spec(&y);
        for ((i, j), a) in sx.indexed_iter() {
            let b = sy[[i, j]];
            let want = if in_window(i, j, 16, 16, r) {
                a * 0.3
            } else {
                *a
            };
            assert_abs_diff_eq!(b.re, want.re, epsilon = 1e-9);
            assert_abs_diff_eq!(b.im, want.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn apply_freeu_matches_sub_operations() {
        let backbone = random_map(4, 8, 8, 7);
        let skip = random_map(2, 8, 8, 8);
        let params = FreeUParams::new(2.0, 1.0, 1.6, 0.2, 1.0).unwrap();

        let (b1_out, s1_out) = apply_freeu(1, &backbone, &skip, &params).unwrap();
        assert_eq!(b1_out, scale_backbone(&backbone, 2.0).unwrap());
        assert_eq!(s1_out, scale_skip_lowfreq(&skip, 1.0, 1.0).unwrap());

        let (b2_out, s2_out) = apply_freeu(2, &backbone, &skip, &params).unwrap();
        assert_eq!(b2_out, scale_backbone(&backbone, 1.6).unwrap());
        assert_eq!(s2_out, scale_skip_lowfreq(&skip, 0.2, 1.0).unwrap());
    }

    #[test]
    fn apply_freeu_identity_params_are_neutral() {
        let backbone = random_map(4, 8, 8, 9);
        let skip = random_map(2, 8, 8, 10);
        let (b_out, s_out) = apply_freeu(1, &backbone, &skip, &FreeUParams::IDENTITY).unwrap();
        assert_eq!(b_out, backbone);
        for (a, b) in skip.iter().zip(s_out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn apply_freeu_rejects_unknown_stage() {
        let m = random_map(2, 4, 4, 11);
        assert!(apply_freeu(3, &m, &m, &FreeUParams::IDENTITY).is_err());
        assert!(FreeUParams::new(1.0, 1.0, 1.0, 1.0, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn upper_half_channels_never_change(b in -3.0f64..3.0, seed in 0u64..64) {
            let x = random_map(6, 4, 4, seed);
            let y = scale_backbone(&x, b).unwrap();
            prop_assert_eq!(x.slice(s![3.., .., ..]), y.slice(s![3.., .., ..]));
        }

        #[test]
        fn fft_round_trip_is_identity(seed in 0u64..64, exp_h in 1u32..5, exp_w in 1u32..5) {
            let (h, w) = (1usize << exp_h, 1usize << exp_w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array2::from_shape_fn((h, w), |_| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let back = ifft2(fft2(img.view()).unwrap().view()).unwrap();
            for (a, b) in img.iter().zip(back.iter()) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }

        #[test]
        fn damping_never_raises_energy(s_factor in 0.0f64..1.0, seed in 0u64..32) {
            let x = random_map(2, 8, 8, seed);
            let y = scale_skip_lowfreq(&x, s_factor, 2.0).unwrap();
            let norm = |m: &Array3<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm(&y) <= norm(&x) + 1e-9);
        }
    }
}
