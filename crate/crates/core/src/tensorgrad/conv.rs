use super::Real;

/// Border handling for convolutions and neighbourhood gathers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Pad by the given amount on every side, repeating the edge pixel.
    Replicate(usize),
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// Geometry of a single-image 2-D sliding window.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    /// `None` when the window does not fit.
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let p = match pad {
            Padding::Replicate(p) => p,
            Padding::Valid => 0,
        };
        if h + 2 * p < kh || w + 2 * p < kw {
            return None;
        }
        let oh = (h + 2 * p - kh) / stride + 1;
        let ow = (w + 2 * p - kw) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> usize {
        match self.pad {
            Padding::Valid => o * self.stride + k,
            Padding::Replicate(p) => {
                let s = (o * self.stride + k) as isize - p as isize;
                s.clamp(0, extent as isize - 1) as usize
            }
        }
    }

    /// Gather one image `[c, h, w]` into columns `[c*kh*kw, oh*ow]`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        let sy: Vec<Vec<usize>> = (0..self.kh)
            .map(|ky| (0..self.oh).map(|oy| self.src(oy, ky, self.h)).collect())
            .collect();
        let sx: Vec<Vec<usize>> = (0..self.kw)
            .map(|kx| (0..self.ow).map(|ox| self.src(ox, kx, self.w)).collect())
            .collect();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for (oy, &y) in sy[ky].iter().enumerate() {
                        let src_row = &plane[y * self.w..(y + 1) * self.w];
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for (dv, &x) in d.iter_mut().zip(&sx[kx]) {
                            *dv = src_row[x];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back onto an image; adjoint of [`Geom::im2col`].
    pub fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = self.src(oy, ky, self.h);
                        for ox in 0..self.ow {
                            let x = self.src(ox, kx, self.w);
                            plane[y * self.w + x] = plane[y * self.w + x] + src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
