//! Differentiable emission-absorption voxel renderer.
//!
//! Orthographic rays march through a density/color grid spanning the
//! cube [-1, 1]^3 (z up). Logits are unconstrained: density passes
//! through softplus, color through the logistic, and both are activated
//! at the voxels before trilinear interpolation so interpolated colors
//! stay inside (0, 1).
//!
//! The backward pass is exact reverse mode written against sigma rather
//! than alpha: the alpha-space form divides by (1 - alpha), which blows
//! up for saturated samples, while
//! `dP/dsigma_k = delta * ((1 - a_k) T_k c_k - S_k)` with `S_k` the
//! composited contribution behind sample k stays finite everywhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Density and color logits on a D^3 lattice. Spatial index order is
/// x-fastest (`(z * D + y) * D + x`); color adds a channel-major axis in
/// front. This matches the `VOXG` file layout byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    d: usize,
    pub density_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
}

impl VoxelGrid {
    pub fn uniform(d: usize, density_logit: f64, color_logit: f64) -> Result<Self> {
        Self::from_logits(
            d,
            vec![density_logit; d * d * d],
            vec![color_logit; 3 * d * d * d],
        )
    }

    pub fn from_logits(d: usize, density: Vec<f64>, color: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("grid resolution 0".into()));
        }
        let n = d * d * d;
        if density.len() != n || color.len() != 3 * n {
            return Err(Error::ShapeMismatch {
                expected: vec![n, 3 * n],
                got: vec![density.len(), color.len()],
            });
        }
        if !density.iter().chain(color.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("voxel grid logits"));
        }
        Ok(VoxelGrid {
            d,
            density_logits: density,
            color_logits: color,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn voxel_count(&self) -> usize {
        self.d * self.d * self.d
    }

    pub fn spatial_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.d + y) * self.d + x
    }

    /// Activated density field value at a voxel.
    pub fn density_at(&self, idx: usize) -> f64 {
        softplus(self.density_logits[idx])
    }
}

/// Cotangent of a render with respect to every grid logit; layout
/// mirrors [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl GridGradient {
    pub fn zeros(d: usize) -> Self {
        GridGradient {
            density: vec![0.0; d * d * d],
            color: vec![0.0; 3 * d * d * d],
        }
    }

    pub fn add(&mut self, other: &GridGradient) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.density.iter_mut().chain(self.color.iter_mut()) {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.density
            .iter()
            .chain(self.color.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Orthographic camera aimed at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Half-extent of the image plane in world units.
    pub frame: f64,
}

impl CameraView {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, frame: f64) -> Result<Self> {
        if !azimuth_deg.is_finite() || !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(Error::InvalidParameter(format!(
                "bad camera angles az={azimuth_deg} el={elevation_deg}"
            )));
        }
        if !(frame > 0.0) || !frame.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "camera frame must be positive, got {frame}"
            )));
        }
        Ok(CameraView {
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            elevation_deg,
            frame,
        })
    }

    /// Orthonormal (view direction, right, up) triple. At elevation 0 the
    /// image up axis is world +z.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        let (sa, ca) = az.sin_cos();
        let (se, ce) = el.sin_cos();
        let dir = [-ce * ca, -ce * sa, -se];
        let right = [-sa, ca, 0.0];
        let up = [-ca * se, -sa * se, ce];
        (dir, right, up)
    }
}

/// One trilinear lookup: activated density/color plus the corner
/// weights needed to push gradients back to the lattice.
struct PointSample {
    sigma: f64,
    color: [f64; 3],
    corners: [(usize, f64); 8],
}

fn sample_at(grid: &VoxelGrid, p: [f64; 3]) -> Option<PointSample> {
    if p.iter().any(|v| v.abs() > 1.0) {
        return None;
    }
    let d = grid.d;
    let scale = 0.5 * (d as f64 - 1.0);
    let g = [
        (p[0] + 1.0) * scale,
        (p[1] + 1.0) * scale,
        (p[2] + 1.0) * scale,
    ];
    let i0: Vec<usize> = g.iter().map(|v| v.floor() as usize).collect();
    let i1: Vec<usize> = i0.iter().map(|v| (v + 1).min(d - 1)).collect();
    let f: Vec<f64> = g.iter().zip(&i0).map(|(v, i)| v - *i as f64).collect();
    let mut corners = [(0usize, 0.0f64); 8];
    let mut sigma = 0.0;
    let mut color = [0.0; 3];
    let n = grid.voxel_count();
    for (slot, corner) in corners.iter_mut().enumerate() {
        let (cx, cy, cz) = (slot & 1, (slot >> 1) & 1, (slot >> 2) & 1);
        let w = (if cx == 0 { 1.0 - f[0] } else { f[0] })
            * (if cy == 0 { 1.0 - f[1] } else { f[1] })
            * (if cz == 0 { 1.0 - f[2] } else { f[2] });
        let idx = grid.spatial_index(
            if cx == 0 { i0[0] } else { i1[0] },
            if cy == 0 { i0[1] } else { i1[1] },
            if cz == 0 { i0[2] } else { i1[2] },
        );
        *corner = (idx, w);
        sigma += w * softplus(grid.density_logits[idx]);
        for (c, col) in color.iter_mut().enumerate() {
            *col += w * sigmoid(grid.color_logits[c * n + idx]);
        }
    }
    Some(PointSample {
        sigma,
        color,
        corners,
    })
}

fn check_render_args(size: usize, samples_per_ray: usize, background: &[f64; 3]) -> Result<()> {
    if size == 0 {
        return Err(Error::InvalidParameter("render size 0".into()));
    }
    if samples_per_ray < 2 {
        return Err(Error::InvalidParameter(format!(
            "samples_per_ray must be >= 2, got {samples_per_ray}"
        )));
    }
    if !background.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("background color"));
    }
    Ok(())
}

/// Ray geometry shared by the forward and backward passes. The ray for
/// pixel (i, j) is `base + s * dir` with s covering [-sqrt(3), sqrt(3)],
/// enough to cross the cube from any angle.
struct RayGeometry {
    dir: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    frame: f64,
    size: usize,
    delta: f64,
    samples: usize,
}

impl RayGeometry {
    fn new(view: &CameraView, size: usize, samples: usize) -> Self {
        let (dir, right, up) = view.basis();
        let span = 2.0 * 3.0f64.sqrt();
        RayGeometry {
            dir,
            right,
            up,
            frame: view.frame,
            size,
            delta: span / samples as f64,
            samples,
        }
    }

    fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let ndc_x = ((j as f64 + 0.5) / self.size as f64) * 2.0 - 1.0;
        let ndc_y = 1.0 - ((i as f64 + 0.5) / self.size as f64) * 2.0;
        let s = -(3.0f64.sqrt()) + (k as f64 + 0.5) * self.delta;
        let mut p = [0.0; 3];
        for (axis, v) in p.iter_mut().enumerate() {
            *v = ndc_x * self.frame * self.right[axis]
                + ndc_y * self.frame * self.up[axis]
                + s * self.dir[axis];
        }
        p
    }
}

/// Renders a 3 x size x size image.
pub fn render(
    grid: &VoxelGrid,
    view: &CameraView,
    size: usize,
    samples_per_ray: usize,
    background: &[f64; 3],
) -> Result<Array3<f64>> {
    check_render_args(size, samples_per_ray, background)?;
    let geo = RayGeometry::new(view, size, samples_per_ray);
    let mut img = Array3::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0.0; 3];
            let mut transmittance = 1.0;
            for k in 0..geo.samples {
                if let Some(s) = sample_at(grid, geo.point(i, j, k)) {
                    let alpha = 1.0 - (-s.sigma * geo.delta).exp();
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += transmittance * alpha * s.color[c];
                    }
                    transmittance *= 1.0 - alpha;
                }
            }
            for c in 0..3 {
                img[[c, i, j]] = acc[c] + transmittance * background[c];
            }
        }
    }
    Ok(img)
}

/// Reverse-mode derivative of [`render`] contracted with `upstream`.
pub fn render_grad(
    grid: &VoxelGrid,
    view: &CameraView,
    size: usize,
    samples_per_ray: usize,
    background: &[f64; 3],
    upstream: &Array3<f64>,
) -> Result<GridGradient> {
    check_render_args(size, samples_per_ray, background)?;
    if upstream.dim() != (3, size, size) {
        return Err(Error::ShapeMismatch {
            expected: vec![3, size, size],
            got: upstream.shape().to_vec(),
        });
    }
    let geo = RayGeometry::new(view, size, samples_per_ray);
    let n = grid.voxel_count();
    let mut grad = GridGradient::zeros(grid.d);
    // Per-sample tape for one ray.
    struct Tape {
        alpha: f64,
        t_before: f64,
        color: [f64; 3],
        corners: [(usize, f64); 8],
    }
    let mut tape: Vec<Tape> = Vec::with_capacity(geo.samples);
    for i in 0..size {
        for j in 0..size {
            tape.clear();
            let mut transmittance = 1.0;
            for k in 0..geo.samples {
                if let Some(s) = sample_at(grid, geo.point(i, j, k)) {
                    let alpha = 1.0 - (-s.sigma * geo.delta).exp();
                    tape.push(Tape {
                        alpha,
                        t_before: transmittance,
                        color: s.color,
                        corners: s.corners,
                    });
                    transmittance *= 1.0 - alpha;
                }
            }
            let u = [
                upstream[[0, i, j]],
                upstream[[1, i, j]],
                upstream[[2, i, j]],
            ];
            // Suffix contribution behind the current sample, per channel.
            let mut suffix = [
                transmittance * background[0],
                transmittance * background[1],
                transmittance * background[2],
            ];
            for s in tape.iter().rev() {
                let weight = s.t_before * s.alpha;
                let mut d_sigma = 0.0;
                for c in 0..3 {
                    d_sigma +=
                        u[c] * geo.delta * ((1.0 - s.alpha) * s.t_before * s.color[c] - suffix[c]);
                }
                for &(idx, w) in &s.corners {
                    grad.density[idx] += d_sigma * w * sigmoid(grid.density_logits[idx]);
                    for (c, uc) in u.iter().enumerate() {
                        let y = sigmoid(grid.color_logits[c * n + idx]);
                        grad.color[c * n + idx] += uc * weight * w * y * (1.0 - y);
                    }
                }
                for c in 0..3 {
                    suffix[c] += weight * s.color[c];
                }
            }
        }
    }
    Ok(grad)
}

/// Four cameras at a random base azimuth and 90 degree spacings, shared
/// elevation and frame. Consumes exactly one f64 from the generator.
pub fn sample_orthogonal_views<R: Rng + ?Sized>(
    rng: &mut R,
    elevation_deg: f64,
    frame: f64,
) -> Result<[CameraView; 4]> {
    let base = rng.random::<f64>() * 360.0;
    let mut views = [CameraView::new(0.0, elevation_deg, frame)?; 4];
    for (k, v) in views.iter_mut().enumerate() {
        *v = CameraView::new(base + 90.0 * k as f64, elevation_deg, frame)?;
    }
    Ok(views)
}

/// Writes `VOXG`: u32 resolution, f32 density logits (x-fastest), f32
/// color logits (channel-major). All little-endian.
pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(b"VOXG")?;
    f.write_all(&(grid.d as u32).to_le_bytes())?;
    for v in grid.density_logits.iter().chain(grid.color_logits.iter()) {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Loads a `VOXG` grid file.
pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
        let at = offset;
        r.read_exact(buf).map_err(|_| Error::MalformedFile {
            path: path.display().to_string(),
            offset: at,
            reason: format!("truncated while reading {what}"),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    read(&mut magic, "magic")?;
    if &magic != b"VOXG" {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:?}, expected VOXG"),
        });
    }
    let mut dword = [0u8; 4];
    read(&mut dword, "resolution")?;
    let d = u32::from_le_bytes(dword) as usize;
    if d == 0 || d > 512 {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 4,
            reason: format!("unreasonable resolution {d}"),
        });
    }
    let n = d * d * d;
    let mut density = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        read(&mut buf, "density logits")?;
        density.push(f32::from_le_bytes(buf) as f64);
    }
    let mut color = Vec::with_capacity(3 * n);
    for _ in 0..3 * n {
        read(&mut buf, "color logits")?;
        color.push(f32::from_le_bytes(buf) as f64);
    }
    // A well-formed file ends exactly here.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset,
            reason: "trailing bytes after grid data".into(),
        });
    }
    VoxelGrid::from_logits(d, density, color)
}

/// Writes a binary PPM (P6, maxval 255). Values are clamped to [0, 1]
/// and quantized by rounding half up.
pub fn write_ppm(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![3, h, w],
            got: vec![c, h, w],
        });
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = image[[ch, i, j]].clamp(0.0, 1.0);
                f.write_all(&[(v * 255.0 + 0.5).floor() as u8])?;
            }
        }
    }
    f.flush()?;
    Ok(())
}
