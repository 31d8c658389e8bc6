//! Tiny UNet denoiser with a hand-written backward pass.
//!
//! Two downsamplings, channel widths c0/2c0/4c0, skip concatenation at
//! both decoder stages with optional FreeU interception right before the
//! concat. Everything is f64 and batch-free: one C x H x W image per
//! call. The backward pass produces parameter gradients for training;
//! score distillation never differentiates through this network.
//!
//! Layer layout and the parameter traversal order are fixed, so a seed
//! pins the initialization and checkpoints are position-addressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Condition;
use crate::error::{Error, Result};
use crate::freeu::{self, FreeUParams};

const GN_EPS: f64 = 1e-5;

fn silu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// d silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
fn silu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut out = x.clone();
    out.zip_mut_with(dy, |v, &d| {
        let sig = 1.0 / (1.0 + (-*v).exp());
        *v = d * sig * (1.0 + *v * (1.0 - sig));
    });
    out
}

fn avgpool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, i, j)| {
        0.25 * (x[[ch, 2 * i, 2 * j]]
            + x[[ch, 2 * i, 2 * j + 1]]
            + x[[ch, 2 * i + 1, 2 * j]]
            + x[[ch, 2 * i + 1, 2 * j + 1]])
    })
}

fn avgpool2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, i, j)| {
        0.25 * dy[[ch, i / 2, j / 2]]
    })
}

fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, i, j)| x[[ch, i / 2, j / 2]])
}

fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, i, j)| {
        dy[[ch, 2 * i, 2 * j]]
            + dy[[ch, 2 * i, 2 * j + 1]]
            + dy[[ch, 2 * i + 1, 2 * j]]
            + dy[[ch, 2 * i + 1, 2 * j + 1]]
    })
}

fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

struct Conv2d {
    w: Array4<f64>,
    b: Array1<f64>,
    gw: Array4<f64>,
    gb: Array1<f64>,
    x: Option<Array3<f64>>,
}

impl Conv2d {
    /// `k` must be odd; output keeps the spatial size via zero padding.
    fn new(cin: usize, cout: usize, k: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let w = if std == 0.0 {
            Array4::zeros((cout, cin, k, k))
        } else {
            Array4::from_shape_fn((cout, cin, k, k), |_| dist.sample(rng))
        };
        Conv2d {
            gw: Array4::zeros(w.dim()),
            w,
            b: Array1::zeros(cout),
            gb: Array1::zeros(cout),
            x: None,
        }
    }

    fn he(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(cin, cout, k, (2.0 / (cin * k * k) as f64).sqrt(), rng)
    }

    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (cout, _, k, _) = self.w.dim();
        let p = (k / 2) as isize;
        let mut y = Array3::zeros((cout, h, w));
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = self.b[o];
                    for c in 0..cin {
                        for u in 0..k {
                            let ii = i as isize + u as isize - p;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j as isize + v as isize - p;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += self.w[[o, c, u, v]] * x[[c, ii as usize, jj as usize]];
                            }
                        }
                    }
                    y[[o, i, j]] = acc;
                }
            }
        }
        self.x = Some(x.clone());
        y
    }

    fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let x = self.x.as_ref().expect("forward before backward");
        let (cin, h, w) = x.dim();
        let (cout, _, k, _) = self.w.dim();
        let p = (k / 2) as isize;
        let mut dx = Array3::zeros((cin, h, w));
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let d = dy[[o, i, j]];
                    self.gb[o] += d;
                    for c in 0..cin {
                        for u in 0..k {
                            let ii = i as isize + u as isize - p;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j as isize + v as isize - p;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let (iu, ju) = (ii as usize, jj as usize);
                                self.gw[[o, c, u, v]] += d * x[[c, iu, ju]];
                                dx[[c, iu, ju]] += d * self.w[[o, c, u, v]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        vec![
            (self.w.shape().to_vec(), self.w.as_slice().unwrap()),
            (self.b.shape().to_vec(), self.b.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(Vec<usize>, &mut [f64])> {
        vec![
            (self.w.shape().to_vec(), self.w.as_slice_mut().unwrap()),
            (self.b.shape().to_vec(), self.b.as_slice_mut().unwrap()),
        ]
    }

    fn grads(&self) -> Vec<&[f64]> {
        vec![self.gw.as_slice().unwrap(), self.gb.as_slice().unwrap()]
    }
}

struct GroupNorm {
    groups: usize,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    g_gamma: Array1<f64>,
    g_beta: Array1<f64>,
    cache: Option<(Array3<f64>, Vec<f64>)>,
}

impl GroupNorm {
    fn new(c: usize) -> Self {
        let groups = c.min(8);
        assert_eq!(
            c % groups,
            0,
            "channel count {c} not divisible into {groups} groups"
        );
        GroupNorm {
            groups,
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            g_gamma: Array1::zeros(c),
            g_beta: Array1::zeros(c),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let gsize = c / self.groups;
        let n = (gsize * h * w) as f64;
        let mut xhat = Array3::zeros((c, h, w));
        let mut inv_stds = vec![0.0; self.groups];
        for g in 0..self.groups {
            let span = s![g * gsize..(g + 1) * gsize, .., ..];
            let sl = x.slice(span);
            let mean = sl.sum() / n;
            let var = sl.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            inv_stds[g] = inv;
            ndarray::Zip::from(xhat.slice_mut(span))
                .and(sl)
                .for_each(|o, &v| *o = (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (gm, bt) = (self.gamma[ch], self.beta[ch]);
            y.index_axis_mut(Axis(0), ch).mapv_inplace(|v| gm * v + bt);
        }
        self.cache = Some((xhat, inv_stds));
        y
    }

    fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let (xhat, inv_stds) = self.cache.as_ref().expect("forward before backward");
        let (c, h, w) = dy.dim();
        let gsize = c / self.groups;
        let n = (gsize * h * w) as f64;
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(0), ch);
            let xc = xhat.index_axis(Axis(0), ch);
            self.g_beta[ch] += dyc.sum();
            self.g_gamma[ch] += dyc.iter().zip(xc.iter()).map(|(d, v)| d * v).sum::<f64>();
        }
        let mut dxhat = dy.clone();
        for ch in 0..c {
            let gm = self.gamma[ch];
            dxhat.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * gm);
        }
        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let span = s![g * gsize..(g + 1) * gsize, .., ..];
            let dh = dxhat.slice(span);
            let xh = xhat.slice(span);
            let s1 = dh.sum();
            let s2 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            let inv = inv_stds[g];
            ndarray::Zip::from(dx.slice_mut(span))
                .and(dh)
                .and(xh)
                .for_each(|o, &d, &v| *o = inv * (d - (s1 + v * s2) / n));
        }
        dx
    }

    fn zero_grads(&mut self) {
        self.g_gamma.fill(0.0);
        self.g_beta.fill(0.0);
    }

    fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        vec![
            (self.gamma.shape().to_vec(), self.gamma.as_slice().unwrap()),
            (self.beta.shape().to_vec(), self.beta.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(Vec<usize>, &mut [f64])> {
        vec![
            (
                self.gamma.shape().to_vec(),
                self.gamma.as_slice_mut().unwrap(),
            ),
            (
                self.beta.shape().to_vec(),
                self.beta.as_slice_mut().unwrap(),
            ),
        ]
    }

    fn grads(&self) -> Vec<&[f64]> {
        vec![
            self.g_gamma.as_slice().unwrap(),
            self.g_beta.as_slice().unwrap(),
        ]
    }
}

struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
    gw: Array2<f64>,
    gb: Array1<f64>,
    x: Option<Array1<f64>>,
}

impl Linear {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("finite std");
        Linear {
            w: Array2::from_shape_fn((cout, cin), |_| dist.sample(rng)),
            b: Array1::zeros(cout),
            gw: Array2::zeros((cout, cin)),
            gb: Array1::zeros(cout),
            x: None,
        }
    }

    fn forward(&mut self, x: &Array1<f64>) -> Array1<f64> {
        self.x = Some(x.clone());
        self.w.dot(x) + &self.b
    }

    fn backward(&mut self, dy: &Array1<f64>) -> Array1<f64> {
        let x = self.x.as_ref().expect("forward before backward");
        for (o, &d) in dy.iter().enumerate() {
            self.gb[o] += d;
            for (i, &xi) in x.iter().enumerate() {
                self.gw[[o, i]] += d * xi;
            }
        }
        self.w.t().dot(dy)
    }

    fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        vec![
            (self.w.shape().to_vec(), self.w.as_slice().unwrap()),
            (self.b.shape().to_vec(), self.b.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(Vec<usize>, &mut [f64])> {
        vec![
            (self.w.shape().to_vec(), self.w.as_slice_mut().unwrap()),
            (self.b.shape().to_vec(), self.b.as_slice_mut().unwrap()),
        ]
    }

    fn grads(&self) -> Vec<&[f64]> {
        vec![self.gw.as_slice().unwrap(), self.gb.as_slice().unwrap()]
    }
}

/// GroupNorm -> SiLU -> conv, additive embedding projection, second
/// GroupNorm -> SiLU -> conv, residual shortcut (1x1 conv when the
/// channel count changes).
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    a1: Option<Array3<f64>>,
    a2: Option<Array3<f64>>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, emb_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(cin),
            conv1: Conv2d::he(cin, cout, 3, rng),
            emb_proj: Linear::new(emb_dim, cout, rng),
            gn2: GroupNorm::new(cout),
            conv2: Conv2d::he(cout, cout, 3, rng),
            shortcut: (cin != cout).then(|| Conv2d::he(cin, cout, 1, rng)),
            a1: None,
            a2: None,
        }
    }

    /// `se` is the shared silu(embedding) vector.
    fn forward(&mut self, x: &Array3<f64>, se: &Array1<f64>) -> Array3<f64> {
        let t1 = self.gn1.forward(x);
        let h = self.conv1.forward(&silu(&t1));
        self.a1 = Some(t1);
        let p = self.emb_proj.forward(se);
        let mut h2 = h;
        for (ch, add) in p.iter().enumerate() {
            h2.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + add);
        }
        let t2 = self.gn2.forward(&h2);
        let out = self.conv2.forward(&silu(&t2));
        self.a2 = Some(t2);
        match &mut self.shortcut {
            Some(sc) => out + sc.forward(x),
            None => out + x,
        }
    }

    /// Returns (dx, d_se contribution).
    fn backward(&mut self, dy: &Array3<f64>) -> (Array3<f64>, Array1<f64>) {
        let d_s2 = self.conv2.backward(dy);
        let d_t2 = silu_backward(self.a2.as_ref().expect("cache"), &d_s2);
        let d_h2 = self.gn2.backward(&d_t2);
        let d_p = Array1::from_iter(d_h2.axis_iter(Axis(0)).map(|plane| plane.sum()));
        let d_se = self.emb_proj.backward(&d_p);
        let d_s1 = self.conv1.backward(&d_h2);
        let d_t1 = silu_backward(self.a1.as_ref().expect("cache"), &d_s1);
        let mut dx = self.gn1.backward(&d_t1);
        match &mut self.shortcut {
            Some(sc) => dx += &sc.backward(dy),
            None => dx += dy,
        }
        (dx, d_se)
    }

    fn zero_grads(&mut self) {
        self.gn1.zero_grads();
        self.conv1.zero_grads();
        self.emb_proj.zero_grads();
        self.gn2.zero_grads();
        self.conv2.zero_grads();
        if let Some(sc) = &mut self.shortcut {
            sc.zero_grads();
        }
    }

    fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = self.gn1.tensors();
        out.extend(self.conv1.tensors());
        out.extend(self.emb_proj.tensors());
        out.extend(self.gn2.tensors());
        out.extend(self.conv2.tensors());
        if let Some(sc) = &self.shortcut {
            out.extend(sc.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(Vec<usize>, &mut [f64])> {
        let mut out = self.gn1.tensors_mut();
        out.extend(self.conv1.tensors_mut());
        out.extend(self.emb_proj.tensors_mut());
        out.extend(self.gn2.tensors_mut());
        out.extend(self.conv2.tensors_mut());
        if let Some(sc) = &mut self.shortcut {
            out.extend(sc.tensors_mut());
        }
        out
    }

    fn grads(&self) -> Vec<&[f64]> {
        let mut out = self.gn1.grads();
        out.extend(self.conv1.grads());
        out.extend(self.emb_proj.grads());
        out.extend(self.gn2.grads());
        out.extend(self.conv2.grads());
        if let Some(sc) = &self.shortcut {
            out.extend(sc.grads());
        }
        out
    }
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let ang = t as f64 * freq;
        e[i] = ang.sin();
        e[half + i] = ang.cos();
    }
    e
}

struct ForwardCache {
    u1: Array1<f64>,
    emb: Array1<f64>,
    cond_row: Option<usize>,
    hgn: Array3<f64>,
    freeu: Option<FreeUParams>,
}

/// 2-down/2-up denoiser. Channel widths c0, 2c0, 4c0; decoder stage 1 is
/// the innermost up-block, stage 2 the outer one.
pub struct TinyUNet {
    c0: usize,
    emb_dim: usize,
    n_prompts: usize,
    time1: Linear,
    time2: Linear,
    /// Row 0 is the negative prompt, row 1 + i is prompt i. The
    /// unconditioned embedding is fixed all-zero and owns no row.
    cond_table: Array2<f64>,
    g_cond: Array2<f64>,
    stem: Conv2d,
    enc1: ResBlock,
    enc2: ResBlock,
    mid: ResBlock,
    dec1: ResBlock,
    dec2: ResBlock,
    head_gn: GroupNorm,
    head: Conv2d,
    cache: Option<ForwardCache>,
}

impl TinyUNet {
    /// `c0` must be a positive multiple of 8 (group-norm divisibility up
    /// the width ladder), `emb_dim` even. Initialization is a pure
    /// function of `seed`.
    pub fn new(c0: usize, emb_dim: usize, n_prompts: usize, seed: u64) -> Result<Self> {
        if c0 == 0 || c0 % 8 != 0 {
            return Err(Error::InvalidParameter(format!(
                "c0 must be a positive multiple of 8, got {c0}"
            )));
        }
        if emb_dim < 2 || emb_dim % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "emb_dim must be even and >= 2, got {emb_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_dist = Normal::new(0.0, 0.2).expect("finite std");
        Ok(TinyUNet {
            c0,
            emb_dim,
            n_prompts,
            time1: Linear::new(emb_dim, emb_dim, &mut rng),
            time2: Linear::new(emb_dim, emb_dim, &mut rng),
            cond_table: Array2::from_shape_fn((1 + n_prompts, emb_dim), |_| {
                cond_dist.sample(&mut rng)
            }),
            g_cond: Array2::zeros((1 + n_prompts, emb_dim)),
            stem: Conv2d::he(3, c0, 3, &mut rng),
            enc1: ResBlock::new(c0, c0, emb_dim, &mut rng),
            enc2: ResBlock::new(c0, 2 * c0, emb_dim, &mut rng),
            mid: ResBlock::new(2 * c0, 4 * c0, emb_dim, &mut rng),
            dec1: ResBlock::new(6 * c0, 2 * c0, emb_dim, &mut rng),
            dec2: ResBlock::new(3 * c0, c0, emb_dim, &mut rng),
            head_gn: GroupNorm::new(c0),
            // Zero-initialized head: a fresh net predicts zero noise.
            head: Conv2d::new(c0, 3, 3, 0.0, &mut rng),
            cache: None,
        })
    }

    fn cond_row(&self, cond: Condition) -> Result<Option<usize>> {
        match cond {
            Condition::Unconditioned => Ok(None),
            Condition::Negative => Ok(Some(0)),
            Condition::Prompt(i) => {
                if i >= self.n_prompts {
                    return Err(Error::UnknownCondition(format!(
                        "prompt {i} outside 0..{}",
                        self.n_prompts
                    )));
                }
                Ok(Some(1 + i))
            }
        }
    }

    fn check_input(&self, z: &Array3<f64>) -> Result<()> {
        let (c, h, w) = z.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                got: vec![c, h, w],
            });
        }
        if h != w || h < 4 || !h.is_power_of_two() {
            return Err(Error::NonPowerOfTwo(h, w));
        }
        Ok(())
    }

    /// Forward pass. Mutates only scratch caches; weights are untouched,
    /// so equal inputs give bitwise-equal outputs.
    pub fn forward(
        &mut self,
        z: &Array3<f64>,
        t: usize,
        cond: Condition,
        freeu: Option<&FreeUParams>,
    ) -> Result<Array3<f64>> {
        self.check_input(z)?;
        let row = self.cond_row(cond)?;
        let t_sin = sinusoidal_embedding(t, self.emb_dim);
        let u1 = self.time1.forward(&t_sin);
        let u2 = self.time2.forward(&silu(&u1));
        let emb = match row {
            Some(r) => u2 + &self.cond_table.row(r),
            None => u2,
        };
        let se = silu(&emb);

        let x0 = self.stem.forward(z);
        let e1 = self.enc1.forward(&x0, &se);
        let e2 = self.enc2.forward(&avgpool2(&e1), &se);
        let m = self.mid.forward(&avgpool2(&e2), &se);

        let b1 = upsample2(&m);
        let (b1f, s1f) = match freeu {
            Some(p) => freeu::apply_freeu(1, &b1, &e2, p)?,
            None => (b1, e2.clone()),
        };
        let o1 = self.dec1.forward(&concat_channels(&b1f, &s1f), &se);

        let b2 = upsample2(&o1);
        let (b2f, s2f) = match freeu {
            Some(p) => freeu::apply_freeu(2, &b2, &e1, p)?,
            None => (b2, e1.clone()),
        };
        let o2 = self.dec2.forward(&concat_channels(&b2f, &s2f), &se);

        let hgn = self.head_gn.forward(&o2);
        let out = self.head.forward(&silu(&hgn));
        self.cache = Some(ForwardCache {
            u1,
            emb,
            cond_row: row,
            hgn,
            freeu: freeu.copied(),
        });
        Ok(out)
    }

    /// Accumulates parameter gradients for the latest forward pass and
    /// returns the input gradient.
    pub fn backward(&mut self, dy: &Array3<f64>) -> Result<Array3<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidParameter("backward without forward".into()))?;
        let d_hs = self.head.backward(dy);
        let d_hgn = silu_backward(&cache.hgn, &d_hs);
        let d_o2 = self.head_gn.backward(&d_hgn);

        let (d_cat2, dse_a) = self.dec2.backward(&d_o2);
        let (d_b2f, d_s2f) = (
            d_cat2.slice(s![..2 * self.c0, .., ..]).to_owned(),
            d_cat2.slice(s![2 * self.c0.., .., ..]).to_owned(),
        );
        let (d_b2, d_e1_skip) = match &cache.freeu {
            Some(p) => (
                freeu::scale_backbone(&d_b2f, p.b2)?,
                freeu::scale_skip_lowfreq(&d_s2f, p.s2, p.r_threshold)?,
            ),
            None => (d_b2f, d_s2f),
        };
        let d_o1 = upsample2_backward(&d_b2);

        let (d_cat1, dse_b) = self.dec1.backward(&d_o1);
        let (d_b1f, d_s1f) = (
            d_cat1.slice(s![..4 * self.c0, .., ..]).to_owned(),
            d_cat1.slice(s![4 * self.c0.., .., ..]).to_owned(),
        );
        let (d_b1, d_e2_skip) = match &cache.freeu {
            Some(p) => (
                freeu::scale_backbone(&d_b1f, p.b1)?,
                freeu::scale_skip_lowfreq(&d_s1f, p.s1, p.r_threshold)?,
            ),
            None => (d_b1f, d_s1f),
        };
        let d_m = upsample2_backward(&d_b1);

        let (d_pool2, dse_c) = self.mid.backward(&d_m);
        let d_e2 = avgpool2_backward(&d_pool2) + &d_e2_skip;
        let (d_pool1, dse_d) = self.enc2.backward(&d_e2);
        let d_e1 = avgpool2_backward(&d_pool1) + &d_e1_skip;
        let (d_x0, dse_e) = self.enc1.backward(&d_e1);
        let dz = self.stem.backward(&d_x0);

        let d_se = dse_a + dse_b + dse_c + dse_d + dse_e;
        let d_emb = silu_backward(&cache.emb, &d_se);
        if let Some(r) = cache.cond_row {
            let mut row = self.g_cond.row_mut(r);
            row += &d_emb;
        }
        let d_su1 = self.time2.backward(&d_emb);
        let d_u1 = silu_backward(&cache.u1, &d_su1);
        self.time1.backward(&d_u1);
        Ok(dz)
    }

    pub fn zero_grads(&mut self) {
        self.time1.zero_grads();
        self.time2.zero_grads();
        self.g_cond.fill(0.0);
        self.stem.zero_grads();
        self.enc1.zero_grads();
        self.enc2.zero_grads();
        self.mid.zero_grads();
        self.dec1.zero_grads();
        self.dec2.zero_grads();
        self.head_gn.zero_grads();
        self.head.zero_grads();
    }

    /// Parameter tensors in fixed traversal order.
    pub fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = self.time1.tensors();
        out.extend(self.time2.tensors());
        out.push((
            self.cond_table.shape().to_vec(),
            self.cond_table.as_slice().unwrap(),
        ));
        out.extend(self.stem.tensors());
        out.extend(self.enc1.tensors());
        out.extend(self.enc2.tensors());
        out.extend(self.mid.tensors());
        out.extend(self.dec1.tensors());
        out.extend(self.dec2.tensors());
        out.extend(self.head_gn.tensors());
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(Vec<usize>, &mut [f64])> {
        let mut out = self.time1.tensors_mut();
        out.extend(self.time2.tensors_mut());
        out.push((
            self.cond_table.shape().to_vec(),
            self.cond_table.as_slice_mut().unwrap(),
        ));
        out.extend(self.stem.tensors_mut());
        out.extend(self.enc1.tensors_mut());
        out.extend(self.enc2.tensors_mut());
        out.extend(self.mid.tensors_mut());
        out.extend(self.dec1.tensors_mut());
        out.extend(self.dec2.tensors_mut());
        out.extend(self.head_gn.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    fn grad_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.time1.grads();
        out.extend(self.time2.grads());
        out.push(self.g_cond.as_slice().unwrap());
        out.extend(self.stem.grads());
        out.extend(self.enc1.grads());
        out.extend(self.enc2.grads());
        out.extend(self.mid.grads());
        out.extend(self.dec1.grads());
        out.extend(self.dec2.grads());
        out.extend(self.head_gn.grads());
        out.extend(self.head.grads());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in traversal order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// All gradients concatenated in the same order as [`params_flat`].
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.grad_tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                expected: vec![total],
                got: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

/// Forward pass of the denoiser; FreeU hooks applied when given.
pub fn unet_eps(
    z_t: &Array3<f64>,
    t: usize,
    cond: Condition,
    net: &mut TinyUNet,
    freeu: Option<&FreeUParams>,
) -> Result<Array3<f64>> {
    net.forward(z_t, t, cond, freeu)
}

/// Writes `TUN1`: u32 tensor count, then per tensor u32 rank, u32 dims,
/// f32 data row-major. All integers little-endian.
pub fn save_checkpoint(net: &TinyUNet, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(b"TUN1")?;
    let tensors = net.tensors();
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (dims, data) in tensors {
        f.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            f.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                offset: at,
                reason: format!("truncated while reading {what}"),
            })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, path: &Path, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, path, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Opens a `TUN1` checkpoint without knowing the architecture: the
/// stored tensor shapes pin it down (tensor 0 is the first time-MLP
/// weight, tensor 4 the condition table, tensor 5 the stem conv).
pub fn open_checkpoint(path: &Path) -> Result<TinyUNet> {
    let malformed = |offset: u64, reason: String| Error::MalformedFile {
        path: path.display().to_string(),
        offset,
        reason,
    };
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, path, "magic")?;
    if &magic != b"TUN1" {
        return Err(malformed(0, format!("bad magic {magic:?}, expected TUN1")));
    }
    let count = r.read_u32(path, "tensor count")? as usize;
    if count < 6 {
        return Err(malformed(4, format!("only {count} tensors in file")));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(6);
    for _ in 0..6 {
        let rank = r.read_u32(path, "rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(malformed(r.offset - 4, format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32(path, "dimension")? as usize);
        }
        let elems: usize = dims.iter().product();
        let mut skip = vec![0u8; 4 * elems];
        r.read_exact_at(&mut skip, path, "tensor data")?;
        shapes.push(dims);
    }
    let emb_dim = shapes[0].first().copied().unwrap_or(0);
    let table_rows = shapes[4].first().copied().unwrap_or(0);
    let c0 = shapes[5].first().copied().unwrap_or(0);
    if table_rows == 0 || c0 < 8 {
        return Err(malformed(
            8,
            format!("implausible architecture: cond rows {table_rows}, stem width {c0}"),
        ));
    }
    let mut net = TinyUNet::new(c0, emb_dim, table_rows - 1, 0).map_err(|e| {
        malformed(
            8,
            format!("stored shapes describe an invalid architecture: {e}"),
        )
    })?;
    load_checkpoint(&mut net, path)?;
    Ok(net)
}

/// Loads a `TUN1` checkpoint into a net of identical architecture.
pub fn load_checkpoint(net: &mut TinyUNet, path: &Path) -> Result<()> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, path, "magic")?;
    if &magic != b"TUN1" {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("bad magic {magic:?}, expected TUN1"),
        });
    }
    let count = r.read_u32(path, "tensor count")? as usize;
    let mut slots = net.tensors_mut();
    if count != slots.len() {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            offset: 4,
            reason: format!("{count} tensors in file, architecture has {}", slots.len()),
        });
    }
    for (idx, (dims, data)) in slots.iter_mut().enumerate() {
        let at = r.offset;
        let rank = r.read_u32(path, "rank")? as usize;
        if rank != dims.len() {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                offset: at,
                reason: format!("tensor {idx}: rank {rank}, expected {}", dims.len()),
            });
        }
        for (axis, want) in dims.iter().enumerate() {
            let at = r.offset;
            let got = r.read_u32(path, "dimension")? as usize;
            if got != *want {
                return Err(Error::MalformedFile {
                    path: path.display().to_string(),
                    offset: at,
                    reason: format!("tensor {idx} axis {axis}: dim {got}, expected {want}"),
                });
            }
        }
        let mut b = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact_at(&mut b, path, "tensor data")?;
            *v = f32::from_le_bytes(b) as f64;
        }
    }
    Ok(())
}
