//! Tone-Mapped image Quality Index: multi-scale structural fidelity against
//! the HDR luminance, statistical naturalness of the LDR luminance, and
//! their fixed power-weighted combination.
//!
//! The score path uses only smooth tape primitives (Gaussian filtering,
//! block sums, erf, pow), so `q` can be differentiated with respect to the
//! LDR pixels. Constants follow the published reference implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrio::{HdrImage, LdrImage, REC709};
use crate::pipeline::diff::ldr_tensor;
use crate::tensorgrad::{Padding, Real, Tape, Tensor, Var};

pub const A: f64 = 0.8012;
pub const ALPHA: f64 = 0.3046;
pub const BETA: f64 = 0.7088;
pub const LEVEL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01;
pub const C2: f64 = 10.0;
pub const MEAN_MU: f64 = 115.94;
pub const MEAN_SIGMA: f64 = 27.99;
pub const STD_SCALE: f64 = 64.29;
pub const BETA_A: f64 = 4.4;
pub const BETA_B: f64 = 10.1;
pub const BLOCK: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmqiScore {
    pub q: f64,
    pub s: f64,
    pub n: f64,
}

/// Scales and their exponents in the fidelity product.
#[derive(Clone, Debug, PartialEq)]
pub struct TmqiConfig {
    pub weights: Vec<f64>,
}

impl TmqiConfig {
    /// The five-scale reference configuration.
    pub fn reference() -> Self {
        Self {
            weights: LEVEL_WEIGHTS.to_vec(),
        }
    }

    /// As many leading scales as fit an `h x w` image, with their weights
    /// rescaled to the reference total. Identical to [`reference`] for
    /// images of at least [`min_size`]`(5)` pixels.
    ///
    /// [`reference`]: Self::reference
    pub fn fit(h: usize, w: usize) -> Result<Self> {
        let mut levels = 0;
        let (mut hh, mut ww) = (h, w);
        while levels < LEVEL_WEIGHTS.len() && hh >= WINDOW && ww >= WINDOW {
            levels += 1;
            hh = hh.div_ceil(2);
            ww = ww.div_ceil(2);
        }
        if levels == 0 {
            return Err(size_error(h, w, 1));
        }
        let total: f64 = LEVEL_WEIGHTS.iter().sum();
        let head: f64 = LEVEL_WEIGHTS[..levels].iter().sum();
        Ok(Self {
            weights: LEVEL_WEIGHTS[..levels].iter().map(|v| v * total / head).collect(),
        })
    }

    pub fn single_scale() -> Self {
        Self {
            weights: vec![LEVEL_WEIGHTS.iter().sum()],
        }
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }
}

/// Smallest side length that keeps the window inside the coarsest of
/// `levels` scales.
pub fn min_size(levels: usize) -> usize {
    (WINDOW - 1) * (1 << (levels - 1)) + 1
}

fn size_error(h: usize, w: usize, levels: usize) -> Error {
    Error::contract(format!(
        "image {w}x{h} is smaller than the {WINDOW}x{WINDOW} window at the coarsest of \
         {levels} scales; minimum size is {0}x{0}",
        min_size(levels)
    ))
}

/// The HDR side of the metric, prepared once per image.
#[derive(Clone, Debug)]
pub struct HdrReference {
    pub width: usize,
    pub height: usize,
    /// Luminance rescaled onto `[0, 2^32 - 1]`, `[1, 1, H, W]`.
    pub lum: Tensor<f64>,
}

impl HdrReference {
    pub fn new(hdr: &HdrImage) -> Result<Self> {
        let lum: Vec<f64> = hdr
            .data()
            .chunks_exact(3)
            .map(|p| REC709[0] * p[0] + REC709[1] * p[1] + REC709[2] * p[2])
            .collect();
        Self::from_luminance(&lum, hdr.width(), hdr.height())
    }

    pub fn from_luminance(lum: &[f64], width: usize, height: usize) -> Result<Self> {
        if lum.len() != width * height {
            return Err(Error::Shape {
                op: "tmqi",
                lhs: vec![height, width],
                rhs: vec![lum.len()],
            });
        }
        let lmin = lum.iter().cloned().fold(f64::INFINITY, f64::min);
        let lmax = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lmax > lmin) {
            return Err(Error::Degenerate("constant HDR luminance".into()));
        }
        let factor = ((2f64.powi(32) - 1.0) / (lmax - lmin)).round();
        let scaled = lum.iter().map(|l| factor * (l - lmin)).collect();
        Ok(Self {
            width,
            height,
            lum: Tensor::new([1, 1, height, width], scaled)?,
        })
    }
}

/// Normalized 11x11 Gaussian window as a conv weight `[1, 1, 11, 11]`.
pub fn window<T: Real>() -> Tensor<T> {
    let r = (WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..WINDOW * WINDOW)
        .map(|i| {
            let (y, x) = ((i / WINDOW) as f64 - r, (i % WINDOW) as f64 - r);
            (-(x * x + y * y) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Tensor::from_fn([1, 1, WINDOW, WINDOW], |i| T::c(w[i]))
}

/// Standard normal CDF mapping of a signal strength, `Φ((x - u) / sig)`.
fn normcdf<T: Real>(x: &Var<T>, u: f64, sig: f64) -> Result<Var<T>> {
    x.add_scalar(-u)?
        .mul_scalar(1.0 / (sig * std::f64::consts::SQRT_2))?
        .erf()?
        .add_scalar(1.0)?
        .mul_scalar(0.5)
}

/// Mean local fidelity at one scale; `sf` is the scale's spatial frequency.
fn local_fidelity<T: Real>(x: &Var<T>, y: &Var<T>, sf: f64) -> Result<Var<T>> {
    let tape = x.tape();
    let win = tape.constant(window());
    let f = |v: &Var<T>| v.conv2d(&win, None, 1, Padding::Valid);
    let mu1 = f(x)?;
    let mu2 = f(y)?;
    let s1 = f(&x.square()?)?.sub(&mu1.square()?)?;
    let s2 = f(&y.square()?)?.sub(&mu2.square()?)?;
    let s12 = f(&x.mul(y)?)?.sub(&mu1.mul(&mu2)?)?;
    let sigma1 = s1.max_scalar(0.0)?.sqrt()?;
    let sigma2 = s2.max_scalar(0.0)?.sqrt()?;
    let csf = 100.0 * 2.6 * (0.0192 + 0.114 * sf) * (-(0.114 * sf).powf(1.1)).exp();
    let u = 128.0 / (1.4 * csf);
    let sig = u / 3.0;
    let p1 = normcdf(&sigma1, u, sig)?;
    let p2 = normcdf(&sigma2, u, sig)?;
    let num = p1.mul(&p2)?.mul_scalar(2.0)?.add_scalar(C1)?;
    let den = p1.square()?.add(&p2.square()?)?.add_scalar(C1)?;
    let corr = s12.add_scalar(C2)?.div(&sigma1.mul(&sigma2)?.add_scalar(C2)?)?;
    num.div(&den)?.mul(&corr)?.mean()
}

/// 2x2 average with partial tiles at odd edges.
fn halve<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let inv = Tensor::from_fn([1, 1, oh, ow], |i| {
        let (y, xx) = (i / ow, i % ow);
        let n = (2.min(h - 2 * y) * 2.min(w - 2 * xx)) as f64;
        T::c(1.0 / n)
    });
    x.block_sum(2, 2)?.mul(&x.tape().constant(inv))
}

/// Multi-scale fidelity of LDR luminance `y` (0..255) against the rescaled
/// HDR luminance `x`, both `[1, 1, H, W]`.
pub fn fidelity_var<T: Real>(x: &Var<T>, y: &Var<T>, cfg: &TmqiConfig) -> Result<Var<T>> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let levels = cfg.levels();
    if levels == 0 {
        return Err(Error::contract("tmqi config without scales"));
    }
    if h.min(w) < min_size(levels) {
        return Err(size_error(h, w, levels));
    }
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut sf = 32.0;
    let mut s: Option<Var<T>> = None;
    for (l, wt) in cfg.weights.iter().enumerate() {
        sf /= 2.0;
        let sl = local_fidelity(&x, &y, sf)?;
        if sl.item() <= T::zero() {
            return Err(Error::Domain {
                op: "tmqi",
                detail: format!("non-positive fidelity {} at scale {}", sl.item(), l + 1),
            });
        }
        let term = sl.powf(*wt)?;
        s = Some(match s {
            None => term,
            Some(acc) => acc.mul(&term)?,
        });
        if l + 1 < levels {
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    Ok(s.expect("at least one scale"))
}

/// Statistical naturalness of LDR luminance `y` (0..255), `[1, 1, H, W]`.
pub fn naturalness_var<T: Real>(y: &Var<T>) -> Result<Var<T>> {
    let (h, w) = (y.shape()[2], y.shape()[3]);
    let tape = y.tape();
    let (bh, bw) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
    let count = |i: usize| {
        let (by, bx) = (i / bw, i % bw);
        (BLOCK.min(h - by * BLOCK) * BLOCK.min(w - bx * BLOCK)) as f64
    };
    // sample std per block (N - 1 normalization, zero for single pixels),
    // then the pixel-weighted mean over blocks
    let s1 = y.block_sum(BLOCK, BLOCK)?;
    let s2 = y.square()?.block_sum(BLOCK, BLOCK)?;
    let inv_n = tape.constant(Tensor::from_fn([1, 1, bh, bw], |i| T::c(1.0 / count(i))));
    let inv_dof = tape.constant(Tensor::from_fn([1, 1, bh, bw], |i| {
        let n = count(i);
        T::c(if n > 1.0 { 1.0 / (n - 1.0) } else { 0.0 })
    }));
    let weight = tape.constant(Tensor::from_fn([1, 1, bh, bw], |i| {
        T::c(count(i) / (h * w) as f64)
    }));
    let var = s2
        .sub(&s1.square()?.mul(&inv_n)?)?
        .mul(&inv_dof)?
        .max_scalar(0.0)?;
    let sigma = var.sqrt()?.mul(&weight)?.sum()?;
    let mu = y.mean()?;

    let pb = mu
        .add_scalar(-MEAN_MU)?
        .square()?
        .mul_scalar(-1.0 / (2.0 * MEAN_SIGMA * MEAN_SIGMA))?
        .exp()?;
    let t = sigma.mul_scalar(1.0 / STD_SCALE)?;
    let mode = (BETA_A - 1.0) / (BETA_A + BETA_B - 2.0);
    let pc = if t.item().f64() >= 1.0 {
        tape.scalar(T::zero())
    } else {
        t.mul_scalar(1.0 / mode)?
            .powf(BETA_A - 1.0)?
            .mul(
                &t.neg()?
                    .add_scalar(1.0)?
                    .mul_scalar(1.0 / (1.0 - mode))?
                    .powf(BETA_B - 1.0)?,
            )?
    };
    pb.mul(&pc)
}

/// `a s^α + (1 - a) n^β`.
pub fn combine<T: Real>(s: &Var<T>, n: &Var<T>) -> Result<Var<T>> {
    s.powf(ALPHA)?
        .mul_scalar(A)?
        .add(&n.powf(BETA)?.mul_scalar(1.0 - A)?)
}

/// Score variables for an LDR image given planar `[1, 3, H, W]` in `[0, 1]`.
pub struct ScoreVars<T: Real> {
    pub q: Var<T>,
    pub s: Var<T>,
    pub n: Var<T>,
}

impl<T: Real> ScoreVars<T> {
    pub fn values(&self) -> TmqiScore {
        TmqiScore {
            q: self.q.item().f64(),
            s: self.s.item().f64(),
            n: self.n.item().f64(),
        }
    }
}

pub fn score_var<T: Real>(
    hdr: &HdrReference,
    ldr: &Var<T>,
    cfg: &TmqiConfig,
) -> Result<ScoreVars<T>> {
    let (h, w) = (hdr.height, hdr.width);
    if ldr.shape() != [1, 3, h, w] {
        return Err(Error::Shape {
            op: "tmqi",
            lhs: vec![1, 3, h, w],
            rhs: ldr.shape().to_vec(),
        });
    }
    let tape = ldr.tape();
    let luma = |c: usize| -> Result<Var<T>> { ldr.slice(1, c, 1)?.mul_scalar(255.0 * REC709[c]) };
    let y = luma(0)?.add(&luma(1)?)?.add(&luma(2)?)?;
    let x = tape.constant(hdr.lum.cast());
    let s = fidelity_var(&x, &y, cfg)?;
    let n = naturalness_var(&y)?;
    let q = combine(&s, &n)?;
    Ok(ScoreVars { q, s, n })
}

fn check_sizes(hdr: &HdrImage, ldr: &LdrImage) -> Result<()> {
    if (hdr.width(), hdr.height()) != (ldr.width(), ldr.height()) {
        return Err(Error::Shape {
            op: "tmqi",
            lhs: vec![hdr.height(), hdr.width()],
            rhs: vec![ldr.height(), ldr.width()],
        });
    }
    Ok(())
}

/// Five-scale score; errors for images smaller than [`min_size`]`(5)`.
pub fn tmqi(hdr: &HdrImage, ldr: &LdrImage) -> Result<TmqiScore> {
    tmqi_with(hdr, ldr, &TmqiConfig::reference())
}

pub fn tmqi_with(hdr: &HdrImage, ldr: &LdrImage, cfg: &TmqiConfig) -> Result<TmqiScore> {
    check_sizes(hdr, ldr)?;
    let r = HdrReference::new(hdr)?;
    let tape = Tape::<f64>::new();
    Ok(score_var(&r, &tape.constant(ldr_tensor(ldr)), cfg)?.values())
}

/// Score and `dq/dldr`, interleaved like the image.
pub fn tmqi_grad(hdr: &HdrImage, ldr: &LdrImage, cfg: &TmqiConfig) -> Result<(TmqiScore, Vec<f64>)> {
    check_sizes(hdr, ldr)?;
    let r = HdrReference::new(hdr)?;
    let tape = Tape::<f64>::new();
    let x = tape.var(ldr_tensor(ldr));
    let sv = score_var(&r, &x, cfg)?;
    tape.backward(&sv.q)?;
    let g = x.grad().expect("input requires grad");
    let n = ldr.width() * ldr.height();
    let mut out = vec![0.0; 3 * n];
    for (j, v) in g.data().iter().enumerate() {
        out[(j % n) * 3 + j / n] = *v;
    }
    Ok((sv.values(), out))
}

/// Fidelity from raw luminances (HDR linear, LDR on 0..255).
pub fn structural_fidelity(
    hdr_lum: &[f64],
    ldr_lum_255: &[f64],
    width: usize,
    height: usize,
    cfg: &TmqiConfig,
) -> Result<f64> {
    let r = HdrReference::from_luminance(hdr_lum, width, height)?;
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::new([1, 1, height, width], ldr_lum_255.to_vec())?);
    Ok(fidelity_var(&tape.constant(r.lum), &y, cfg)?.item())
}

pub fn statistical_naturalness(ldr_lum_255: &[f64], width: usize, height: usize) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::new([1, 1, height, width], ldr_lum_255.to_vec())?);
    Ok(naturalness_var(&y)?.item())
}
