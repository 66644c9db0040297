//! Image types at the two ends of the pipeline, plus file codecs and the
//! luminance / log-domain transforms.

mod png;
mod rgbe;

pub use png::{decode_png8, encode_png8, quantize, read_png8, write_png8};
pub use rgbe::{
    decode_rgbe, encode_rgbe, read_hdr, read_radiance_hdr, write_hdr, write_radiance_hdr,
};

use crate::error::{Error, Result};

/// Rec. 709 luma weights.
pub const REC709: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Relative floor applied to luminance before taking logs.
pub const LUM_FLOOR: f64 = 1e-6;

/// Linear-radiance RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 3, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(format!(
                "radiance must be finite and nonnegative; sample {i} is {}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|v| v * a).collect(),
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        Self::new(w, h, crop_interleaved(&self.data, self.width, self.height, 3, x0, y0, w, h)?)
    }

    /// Area-average downscale so that the longer edge is at most `max_edge`.
    pub fn downscale_to(&self, max_edge: usize) -> Self {
        let (data, w, h) = downscale(&self.data, self.width, self.height, 3, max_edge);
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Display-referred RGB image with values in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 3, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!(
                "LDR samples must lie in [0, 1]; sample {i} is {}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Clamp arbitrary finite values into range.
    pub fn clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("LDR sample {i}")));
        }
        Self::new(width, height, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        Self::new(w, h, crop_interleaved(&self.data, self.width, self.height, 3, x0, y0, w, h)?)
    }

    /// Values after 8-bit quantization, back in `[0, 1]`.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }

    pub fn srgb_encoded(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| srgb_encode(v)).collect(),
        }
    }

    /// Rec. 709 luma of each pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| REC709[0] * p[0] + REC709[1] * p[1] + REC709[2] * p[2])
            .collect()
    }
}

/// Single-channel floored luminance.
#[derive(Clone, Debug, PartialEq)]
pub struct Luminance {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Normalized log-luminance with the bounds used to produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLuminance {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub logmin: f64,
    pub logmax: f64,
    pub degenerate: bool,
}

/// Per-pixel Rec. 709 luminance, floored at `LUM_FLOOR * max(Y)`.
pub fn luminance(img: &HdrImage) -> Result<Luminance> {
    let mut data: Vec<f64> = img
        .data
        .chunks_exact(3)
        .map(|p| REC709[0] * p[0] + REC709[1] * p[1] + REC709[2] * p[2])
        .collect();
    let ymax = data.iter().cloned().fold(0.0, f64::max);
    if ymax <= 0.0 {
        return Err(Error::Degenerate("all-zero HDR image".into()));
    }
    let floor = LUM_FLOOR * ymax;
    for y in &mut data {
        if *y < floor {
            *y = floor;
        }
    }
    Ok(Luminance {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Map log-luminance onto `[0, 1]` using the image's own extremes. A
/// constant image maps to 0.5 with `degenerate` set.
pub fn log_normalize(lum: &Luminance) -> Result<LogLuminance> {
    if let Some(i) = lum.data.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain {
            op: "log_normalize",
            detail: format!("luminance sample {i} is {}", lum.data[i]),
        });
    }
    let logs: Vec<f64> = lum.data.iter().map(|v| v.ln()).collect();
    let logmin = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let logmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = logmax - logmin;
    let degenerate = span <= 0.0;
    let data = if degenerate {
        vec![0.5; logs.len()]
    } else {
        logs.iter().map(|l| (l - logmin) / span).collect()
    };
    Ok(LogLuminance {
        width: lum.width,
        height: lum.height,
        data,
        logmin,
        logmax,
        degenerate,
    })
}

pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!("empty image {width}x{height}")));
    }
    if width * height * channels != len {
        return Err(Error::Shape {
            op: "image",
            lhs: vec![height, width, channels],
            rhs: vec![len],
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn crop_interleaved(
    data: &[f64],
    width: usize,
    height: usize,
    ch: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> Result<Vec<f64>> {
    if w == 0 || h == 0 || x0 + w > width || y0 + h > height {
        return Err(Error::contract(format!(
            "crop {w}x{h}+{x0}+{y0} outside {width}x{height} image"
        )));
    }
    let mut out = Vec::with_capacity(w * h * ch);
    for y in y0..y0 + h {
        let row = (y * width + x0) * ch;
        out.extend_from_slice(&data[row..row + w * ch]);
    }
    Ok(out)
}

pub(crate) fn downscale(
    data: &[f64],
    width: usize,
    height: usize,
    ch: usize,
    max_edge: usize,
) -> (Vec<f64>, usize, usize) {
    let long = width.max(height);
    if long <= max_edge {
        return (data.to_vec(), width, height);
    }
    let w = (width * max_edge / long).max(1);
    let h = (height * max_edge / long).max(1);
    let mut out = vec![0.0; w * h * ch];
    for oy in 0..h {
        let (ya, yb) = (oy * height / h, ((oy + 1) * height).div_ceil(h));
        for ox in 0..w {
            let (xa, xb) = (ox * width / w, ((ox + 1) * width).div_ceil(w));
            let n = ((yb - ya) * (xb - xa)) as f64;
            for c in 0..ch {
                let mut s = 0.0;
                for y in ya..yb {
                    for x in xa..xb {
                        s += data[(y * width + x) * ch + c];
                    }
                }
                out[(oy * w + ox) * ch + c] = s / n;
            }
        }
    }
    (out, w, h)
}
