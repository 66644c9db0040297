//! The tone-mapping operator: per-pixel kernel decomposition of normalized
//! log-luminance into base and detail, base compression, detail
//! enhancement, zero-mean post-processing and color restoration.
//!
//! Every stage is written once, on the tape ([`diff`]), so the same code
//! serves training, latent search and plain inference. The functions in this
//! module are `f64` conveniences over it.

pub mod diff;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrio::{self, HdrImage, LdrImage, LogLuminance, Luminance};
use crate::tensorgrad::{Tape, Tensor};

/// Kernel size.
pub const K: usize = 7;
/// Taps per kernel.
pub const K2: usize = K * K;
/// Kernel sums below this are replaced by the center delta.
pub const KERNEL_EPS: f64 = 1e-8;
pub const ALPHA_DETAIL: f64 = 3.5;
pub const BETA_COLOR: f64 = 0.6;
pub const GAMMA_BASE_RANGE: (f64, f64) = (0.8, 2.8);
pub const GAMMA_POST_RANGE: (f64, f64) = (1.7, 3.7);
/// Index of the center tap.
pub const CENTER: usize = K2 / 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub gamma_base: f64,
    pub gamma_post: f64,
    pub alpha_detail: f64,
    pub beta_color: f64,
}

impl Default for PipelineParams {
    /// Range midpoints.
    fn default() -> Self {
        Self::new(1.8, 2.7)
    }
}

impl PipelineParams {
    pub fn new(gamma_base: f64, gamma_post: f64) -> Self {
        Self {
            gamma_base,
            gamma_post,
            alpha_detail: ALPHA_DETAIL,
            beta_color: BETA_COLOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !inside(self.gamma_base, GAMMA_BASE_RANGE) {
            return Err(Error::contract(format!(
                "gamma_base {} outside {:?}",
                self.gamma_base, GAMMA_BASE_RANGE
            )));
        }
        if !inside(self.gamma_post, GAMMA_POST_RANGE) {
            return Err(Error::contract(format!(
                "gamma_post {} outside {:?}",
                self.gamma_post, GAMMA_POST_RANGE
            )));
        }
        if !(self.alpha_detail > 0.0) {
            return Err(Error::contract("alpha_detail must be positive"));
        }
        if !(self.beta_color >= 0.0) {
            return Err(Error::contract("beta_color must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-pixel filter bank, planar: tap `i` of pixel `(y, x)` lives at
/// `data[(i * height + y) * width + x]`. Tap `i = dy * K + dx` weights the
/// neighbor at offset `(dy - K/2, dx - K/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedKernels {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PredictedKernels {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != K2 * height * width {
            return Err(Error::Shape {
                op: "kernels",
                lhs: vec![K2, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// The same raw kernel at every pixel.
    pub fn uniform(height: usize, width: usize, kernel: &[f64; K2]) -> Self {
        let n = height * width;
        let mut data = Vec::with_capacity(K2 * n);
        for &k in kernel {
            data.extend(std::iter::repeat_n(k, n));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn delta(height: usize, width: usize) -> Self {
        let mut k = [0.0; K2];
        k[CENTER] = 1.0;
        Self::uniform(height, width, &k)
    }

    /// Isotropic Gaussian taps, unnormalized.
    pub fn gaussian(height: usize, width: usize, sigma: f64) -> Self {
        Self::uniform(height, width, &gaussian_taps(sigma))
    }

    pub fn tap(&self, i: usize, y: usize, x: usize) -> f64 {
        self.data[(i * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new([1, K2, self.height, self.width], self.data.clone()).expect("sized")
    }
}

pub fn gaussian_taps(sigma: f64) -> [f64; K2] {
    let r = (K / 2) as f64;
    let mut k = [0.0; K2];
    for (i, w) in k.iter_mut().enumerate() {
        let dy = (i / K) as f64 - r;
        let dx = (i % K) as f64 - r;
        *w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    k
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    pub base: Vec<f64>,
    pub detail: Vec<f64>,
}

/// HDR-derived quantities that do not depend on kernels or γ, computed once
/// per image.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub width: usize,
    pub height: usize,
    pub lum: Luminance,
    pub log_lum: LogLuminance,
    /// `hdr_c / lum`, planar `[3, H, W]`.
    pub ratio: Vec<f64>,
}

impl Prepared {
    pub fn new(hdr: &HdrImage) -> Result<Self> {
        let lum = hdrio::luminance(hdr)?;
        let log_lum = hdrio::log_normalize(&lum)?;
        let (w, h) = (hdr.width(), hdr.height());
        let mut ratio = vec![0.0; 3 * w * h];
        for (p, px) in hdr.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                ratio[c * w * h + p] = px[c] / lum.data[p];
            }
        }
        Ok(Self {
            width: w,
            height: h,
            lum,
            log_lum,
            ratio,
        })
    }

    /// Planar `[1, 3, H, W]` color factor `(hdr_c / lum)^beta`.
    pub fn color_factor(&self, beta: f64) -> Tensor<f64> {
        Tensor::new(
            [1, 3, self.height, self.width],
            self.ratio.iter().map(|r| r.powf(beta)).collect(),
        )
        .expect("sized")
    }

    pub fn log_lum_tensor(&self) -> Tensor<f64> {
        Tensor::new([1, 1, self.height, self.width], self.log_lum.data.clone()).expect("sized")
    }
}

fn check_size(k: &PredictedKernels, w: usize, h: usize) -> Result<()> {
    if (k.width, k.height) != (w, h) {
        return Err(Error::Shape {
            op: "apply_kernels",
            lhs: vec![k.height, k.width],
            rhs: vec![h, w],
        });
    }
    Ok(())
}

/// Per-pixel sum-to-one normalization; near-zero sums become the center delta.
pub fn normalize_kernels(raw: &PredictedKernels) -> Result<PredictedKernels> {
    let tape = Tape::<f64>::new();
    let out = diff::normalize_kernels(&tape.constant(raw.to_tensor()))?;
    PredictedKernels::new(raw.height, raw.width, out.to_vec())
}

/// Per-pixel weighted sum over the replicate-padded neighborhood.
/// `kernels` are used as given (normalize first for a convex filter).
pub fn apply_kernels(kernels: &PredictedKernels, log_lum: &LogLuminance) -> Result<Vec<f64>> {
    check_size(kernels, log_lum.width, log_lum.height)?;
    let tape = Tape::<f64>::new();
    let l = tape.constant(
        Tensor::new([1, 1, log_lum.height, log_lum.width], log_lum.data.clone()).expect("sized"),
    );
    Ok(diff::apply_kernels(&tape.constant(kernels.to_tensor()), &l)?.to_vec())
}

/// Normalize then split `L` into base and `detail = L - base`.
pub fn decompose(raw: &PredictedKernels, log_lum: &LogLuminance) -> Result<DecompositionResult> {
    let mut base = apply_kernels(&normalize_kernels(raw)?, log_lum)?;
    let mut detail = Vec::with_capacity(base.len());
    for (b, l) in base.iter_mut().zip(&log_lum.data) {
        let d = l - *b;
        // move the base by at most an ulp so that base + detail rounds back to L
        let snapped = l - d;
        if snapped + d == *l {
            *b = snapped;
        }
        detail.push(d);
    }
    Ok(DecompositionResult { base, detail })
}

/// `E(x|α) = atan(αx) / atan(α)`.
pub fn enhance_detail(detail: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("enhancement alpha must be > 0, got {alpha}")));
    }
    let d = alpha.atan();
    Ok(detail.iter().map(|x| (alpha * x).atan() / d).collect())
}

/// `base^γ`.
pub fn compress_base(base: &[f64], gamma_base: f64) -> Result<Vec<f64>> {
    if let Some(v) = base.iter().find(|v| **v < 0.0) {
        return Err(Error::contract(format!("negative base value {v}")));
    }
    Ok(base.iter().map(|b| b.powf(gamma_base)).collect())
}

/// `E(rec - μ | γ_post) + μ` with `μ` the spatial mean.
pub fn post_process(rec: &[f64], gamma_post: f64) -> Result<Vec<f64>> {
    if rec.is_empty() {
        return Err(Error::contract("empty image"));
    }
    let m = rec.iter().cloned().fold(f64::INFINITY, f64::min);
    let mu = m + rec.iter().map(|r| r - m).sum::<f64>() / rec.len() as f64;
    let centered: Vec<f64> = rec.iter().map(|r| r - mu).collect();
    Ok(enhance_detail(&centered, gamma_post)?
        .into_iter()
        .map(|e| e + mu)
        .collect())
}

/// `(hdr / lum)^β · out` per channel, followed by the final clamp to `[0, 1]`.
pub fn color_correct(
    hdr: &HdrImage,
    lum: &Luminance,
    post: &[f64],
    beta: f64,
) -> Result<LdrImage> {
    let n = hdr.width() * hdr.height();
    if lum.data.len() != n || post.len() != n {
        return Err(Error::Shape {
            op: "color_correct",
            lhs: vec![hdr.height(), hdr.width()],
            rhs: vec![post.len()],
        });
    }
    if !(beta >= 0.0) {
        return Err(Error::contract("beta must be nonnegative"));
    }
    let mut out = Vec::with_capacity(3 * n);
    for (p, px) in hdr.data().chunks_exact(3).enumerate() {
        for c in px {
            out.push((c / lum.data[p]).powf(beta) * post[p]);
        }
    }
    LdrImage::clamped(hdr.width(), hdr.height(), out)
}

/// The full operator with given raw kernels and parameters.
pub fn tonemap(hdr: &HdrImage, kernels: &PredictedKernels, params: &PipelineParams) -> Result<LdrImage> {
    tonemap_prepared(&Prepared::new(hdr)?, kernels, params)
}

pub fn tonemap_prepared(
    prep: &Prepared,
    kernels: &PredictedKernels,
    params: &PipelineParams,
) -> Result<LdrImage> {
    params.validate()?;
    check_size(kernels, prep.width, prep.height)?;
    let tape = Tape::<f64>::new();
    let st = diff::tonemap(
        prep,
        &tape.constant(kernels.to_tensor()),
        &tape.scalar(params.gamma_base),
        &tape.scalar(params.gamma_post),
        params.alpha_detail,
        params.beta_color,
    )?;
    diff::to_ldr(&st.ldr)
}
