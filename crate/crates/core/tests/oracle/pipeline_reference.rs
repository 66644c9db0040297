//! Straight-line reference of the tone-mapping operator: plain loops over
//! interleaved RGB, no tape, no shared helpers with the library.

pub struct Reference {
    pub base: Vec<f64>,
    pub detail: Vec<f64>,
    pub post: Vec<f64>,
    /// Interleaved RGB, clamped.
    pub ldr: Vec<f64>,
}

/// `raw` is planar `[49, h, w]`; tap `dy * 7 + dx` reads offset `(dy - 3, dx - 3)`.
#[allow(clippy::too_many_arguments)]
pub fn tonemap(
    hdr: &[f64],
    w: usize,
    h: usize,
    raw: &[f64],
    gamma_base: f64,
    gamma_post: f64,
    alpha: f64,
    beta: f64,
) -> Reference {
    let n = w * h;
    let mut y = vec![0.0; n];
    for p in 0..n {
        y[p] = 0.2126 * hdr[3 * p] + 0.7152 * hdr[3 * p + 1] + 0.0722 * hdr[3 * p + 2];
    }
    let mut ymax = 0.0f64;
    for p in 0..n {
        ymax = ymax.max(y[p]);
    }
    for p in 0..n {
        if y[p] < 1e-6 * ymax {
            y[p] = 1e-6 * ymax;
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in 0..n {
        lo = lo.min(y[p].ln());
        hi = hi.max(y[p].ln());
    }
    let mut l = vec![0.5; n];
    if hi > lo {
        for p in 0..n {
            l[p] = (y[p].ln() - lo) / (hi - lo);
        }
    }

    let mut base = vec![0.0; n];
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let mut s = 0.0;
            for i in 0..49 {
                s += raw[i * n + p];
            }
            let mut acc = 0.0;
            for i in 0..49 {
                let wt = if s < 1e-8 {
                    if i == 24 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    raw[i * n + p] / s
                };
                let qy = (py as isize + (i / 7) as isize - 3).clamp(0, h as isize - 1) as usize;
                let qx = (px as isize + (i % 7) as isize - 3).clamp(0, w as isize - 1) as usize;
                acc += wt * l[qy * w + qx];
            }
            base[p] = acc;
        }
    }

    let mut detail = vec![0.0; n];
    let mut rec = vec![0.0; n];
    for p in 0..n {
        detail[p] = l[p] - base[p];
        rec[p] = base[p].powf(gamma_base) + (alpha * detail[p]).atan() / alpha.atan();
    }
    let mut mu = 0.0;
    for p in 0..n {
        mu += rec[p];
    }
    mu /= n as f64;
    let mut post = vec![0.0; n];
    for p in 0..n {
        post[p] = (gamma_post * (rec[p] - mu)).atan() / gamma_post.atan() + mu;
    }
    let mut ldr = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let v = (hdr[3 * p + c] / y[p]).powf(beta) * post[p];
            ldr[3 * p + c] = v.clamp(0.0, 1.0);
        }
    }
    Reference {
        base,
        detail,
        post,
        ldr,
    }
}

/// Pinned raw kernels for the oracle fixture: positive, non-uniform, and
/// different at every pixel.
pub fn pinned_kernels(w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let mut k = vec![0.0; 49 * n];
    for i in 0..49 {
        for p in 0..n {
            let t = (0.37 * i as f64 + 1.91 * p as f64).sin();
            k[i * n + p] = 0.05 + t * t;
        }
    }
    k
}
