//! Pipeline stages on the tape. Images are NCHW with `N = 1`.

use super::{Prepared, CENTER, K, K2, KERNEL_EPS};
use crate::error::{Error, Result};
use crate::hdrio::LdrImage;
use crate::tensorgrad::{Padding, Real, Tensor, Var};

/// Intermediate images of one pipeline evaluation.
pub struct Stages<T: Real> {
    pub kernels: Var<T>,
    pub base: Var<T>,
    pub detail: Var<T>,
    pub rec: Var<T>,
    pub post: Var<T>,
    /// Color-corrected output before the final clamp.
    pub ldr_unclamped: Var<T>,
    pub ldr: Var<T>,
}

fn dims<T: Real>(v: &Var<T>, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    match *v.shape() {
        [1, c, h, w] if c == channels => Ok((h, w)),
        _ => Err(Error::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![1, channels, 0, 0],
        }),
    }
}

/// Sum-to-one normalization of `[1, K², H, W]` raw kernels. Pixels whose raw sum is below
/// `KERNEL_EPS` get the center delta (with zero gradient).
pub fn normalize_kernels<T: Real>(raw: &Var<T>) -> Result<Var<T>> {
    let (h, w) = dims(raw, K2, "normalize_kernels")?;
    let data = raw.to_vec();
    if let Some(i) = data.iter().position(|v| *v < T::zero() || v.is_nan()) {
        return Err(Error::contract(format!(
            "raw kernel entry {i} is {} (must be nonnegative)",
            data[i]
        )));
    }
    let n = h * w;
    let sums = raw.sum_axis(1)?;
    let s = sums.to_vec();
    let eps = T::c(KERNEL_EPS);
    if s.iter().all(|v| *v >= eps) {
        return raw.div(&sums.broadcast_to(&[1, K2, h, w])?);
    }
    let mask: Vec<T> = s.iter().map(|v| if *v < eps { T::one() } else { T::zero() }).collect();
    let tape = raw.tape();
    let keep = Tensor::from_fn([1, K2, h, w], |j| T::one() - mask[j % n]);
    let delta = Tensor::from_fn([1, K2, h, w], |j| {
        if j / n == CENTER {
            mask[j % n]
        } else {
            T::zero()
        }
    });
    let denom = sums.add(&tape.constant(Tensor::new([1, 1, h, w], mask)?))?;
    raw.mul(&tape.constant(keep))?
        .div(&denom.broadcast_to(&[1, K2, h, w])?)?
        .add(&tape.constant(delta))
}

/// `kernels` `[1, K², H, W]` applied to `l` `[1, 1, H, W]`.
pub fn apply_kernels<T: Real>(kernels: &Var<T>, l: &Var<T>) -> Result<Var<T>> {
    let (h, w) = dims(l, 1, "apply_kernels")?;
    let (kh, kw) = dims(kernels, K2, "apply_kernels")?;
    if (h, w) != (kh, kw) {
        return Err(Error::Shape {
            op: "apply_kernels",
            lhs: kernels.shape().to_vec(),
            rhs: l.shape().to_vec(),
        });
    }
    l.unfold(K, Padding::Replicate(K / 2))?
        .mul(kernels)?
        .sum_axis(1)
}

/// `E(x|α)` with a constant α.
pub fn enhance<T: Real>(x: &Var<T>, alpha: f64) -> Result<Var<T>> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("enhancement alpha must be > 0, got {alpha}")));
    }
    x.mul_scalar(alpha)?.atan()?.mul_scalar(1.0 / alpha.atan())
}

/// `E(x|α)` with α a scalar on the tape.
pub fn enhance_var<T: Real>(x: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
    x.mul(alpha)?.atan()?.div(&alpha.atan()?)
}

/// Spatial mean, accumulated relative to the minimum so that a constant
/// image has exactly its own value as mean.
pub fn spatial_mean<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let m = x.to_vec().into_iter().fold(T::infinity(), T::min);
    x.add_scalar(-m.f64())?.mean()?.add_scalar(m.f64())
}

/// `atan(γ(rec - μ)) / atan(γ) + μ` with μ the spatial mean of `rec`.
pub fn post_process<T: Real>(rec: &Var<T>, gamma_post: &Var<T>) -> Result<Var<T>> {
    let mu = spatial_mean(rec)?;
    enhance_var(&rec.sub(&mu)?, gamma_post)?.add(&mu)
}

/// Full chain from raw kernels and γ scalars.
pub fn tonemap<T: Real>(
    prep: &Prepared,
    raw_kernels: &Var<T>,
    gamma_base: &Var<T>,
    gamma_post: &Var<T>,
    alpha: f64,
    beta: f64,
) -> Result<Stages<T>> {
    let tape = raw_kernels.tape();
    let (h, w) = (prep.height, prep.width);
    let l = tape.constant(prep.log_lum_tensor().cast());
    let kernels = normalize_kernels(raw_kernels)?;
    let base = apply_kernels(&kernels, &l)?;
    let detail = l.sub(&base)?;
    let rec = base.pow(gamma_base)?.add(&enhance(&detail, alpha)?)?;
    let post = post_process(&rec, gamma_post)?;
    let ldr_unclamped = post
        .broadcast_to(&[1, 3, h, w])?
        .mul(&tape.constant(prep.color_factor(beta).cast()))?;
    let ldr = ldr_unclamped.max_scalar(0.0)?.min_scalar(1.0)?;
    Ok(Stages {
        kernels,
        base,
        detail,
        rec,
        post,
        ldr_unclamped,
        ldr,
    })
}

/// Planar `[1, 3, H, W]` to an interleaved image (clamping stray rounding).
pub fn to_ldr<T: Real>(v: &Var<T>) -> Result<LdrImage> {
    let (h, w) = dims(v, 3, "to_ldr")?;
    let d = v.to_vec();
    let n = h * w;
    let mut out = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            out.push(d[c * n + p].f64());
        }
    }
    LdrImage::clamped(w, h, out)
}

/// Interleaved image to planar `[1, 3, H, W]`.
pub fn ldr_tensor<T: Real>(img: &LdrImage) -> Tensor<T> {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let d = img.data();
    Tensor::from_fn([1, 3, h, w], |j| T::c(d[(j % n) * 3 + j / n]))
}
