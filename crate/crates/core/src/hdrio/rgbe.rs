//! Radiance RGBE (`.hdr`) codec.

use std::path::Path;

use super::HdrImage;
use crate::error::{Error, Result};

/// Decode one shared-exponent pixel: `m * 2^(e - 136)`, and zero when `e == 0`.
pub fn decode_rgbe(p: [u8; 4]) -> [f64; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(p[3] as i32 - 136);
    [p[0] as f64 * f, p[1] as f64 * f, p[2] as f64 * f]
}

/// Encode with round-to-nearest mantissas. A maximum that would round up to
/// 256 is clamped to 255 instead of bumping the exponent, which keeps the
/// other channels at full precision; its own error stays below 1/256.
pub fn encode_rgbe(rgb: [f64; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    if !(max > 0.0) || !max.is_finite() {
        return [0; 4];
    }
    // max = f * 2^e with f in [0.5, 1)
    let mut e = max.log2().floor() as i32 + 1;
    if max * 2f64.powi(-e) >= 1.0 {
        e += 1;
    }
    if max * 2f64.powi(-e) < 0.5 {
        e -= 1;
    }
    let scale = 2f64.powi(8 - e);
    if e + 128 < 1 {
        return [0; 4];
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    let m = |v: f64| (v * scale).round().clamp(0.0, 255.0) as u8;
    [m(rgb[0]), m(rgb[1]), m(rgb[2]), (e + 128) as u8]
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn byte(&mut self, what: &str) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::parse(self.pos, format!("truncated {what}")))?;
        self.pos += 1;
        Ok(b)
    }

    fn line(&mut self) -> Result<&str> {
        let start = self.pos;
        let rel = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "unterminated header line"))?;
        self.pos = start + rel + 1;
        std::str::from_utf8(&self.bytes[start..start + rel])
            .map(|s| s.trim_end_matches('\r'))
            .map_err(|_| Error::parse(start, "header line is not text"))
    }
}

/// Parse a Radiance file held in memory.
pub fn read_radiance_hdr(bytes: &[u8]) -> Result<HdrImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != "#?RADIANCE" && magic != "#?RGBE" {
        return Err(Error::parse(0, "bad magic, expected #?RADIANCE or #?RGBE"));
    }
    loop {
        let at = cur.pos;
        let line = cur.line()?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(Error::parse(at, format!("unsupported format {fmt}")));
            }
        }
    }
    let at = cur.pos;
    let res = cur.line()?;
    let tok: Vec<&str> = res.split_whitespace().collect();
    let (height, width) = match tok.as_slice() {
        ["-Y", h, "+X", w] => (h.parse::<usize>(), w.parse::<usize>()),
        _ => {
            return Err(Error::parse(
                at,
                format!("unsupported orientation {res:?}, only -Y H +X W"),
            ))
        }
    };
    let (height, width) = match (height, width) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => (h, w),
        _ => return Err(Error::parse(at, format!("bad resolution line {res:?}"))),
    };
    let mut data = Vec::with_capacity(width * height * 3);
    let mut scan = vec![[0u8; 4]; width];
    for _ in 0..height {
        read_scanline(&mut cur, &mut scan)?;
        for p in &scan {
            data.extend_from_slice(&decode_rgbe(*p));
        }
    }
    HdrImage::new(width, height, data)
}

fn read_scanline(cur: &mut Cursor, scan: &mut [[u8; 4]]) -> Result<()> {
    let width = scan.len();
    let start = cur.pos;
    let head = cur.bytes.get(start..start + 4);
    let is_rle = matches!(head, Some(&[2, 2, hi, lo])
        if (8..32768).contains(&width) && (hi as usize) << 8 | lo as usize == width && hi & 0x80 == 0);
    if !is_rle {
        return read_flat(cur, scan);
    }
    cur.pos += 4;
    for c in 0..4 {
        let mut x = 0;
        while x < width {
            let at = cur.pos;
            let count = cur.byte("scanline")?;
            if count > 128 {
                let n = (count - 128) as usize;
                if x + n > width {
                    return Err(Error::parse(at, "run overruns scanline"));
                }
                let v = cur.byte("scanline")?;
                for p in &mut scan[x..x + n] {
                    p[c] = v;
                }
                x += n;
            } else {
                let n = count as usize;
                if n == 0 || x + n > width {
                    return Err(Error::parse(at, "bad literal count in scanline"));
                }
                for p in &mut scan[x..x + n] {
                    p[c] = cur.byte("scanline")?;
                }
                x += n;
            }
        }
    }
    Ok(())
}

/// Flat pixels, with the old-style `(1, 1, 1, n)` repeat marker.
fn read_flat(cur: &mut Cursor, scan: &mut [[u8; 4]]) -> Result<()> {
    let mut x = 0;
    let mut shift = 0;
    while x < scan.len() {
        let at = cur.pos;
        let mut p = [0u8; 4];
        for b in &mut p {
            *b = cur.byte("scanline")?;
        }
        if p[0] == 1 && p[1] == 1 && p[2] == 1 {
            if x == 0 {
                return Err(Error::parse(at, "repeat marker at start of scanline"));
            }
            let n = (p[3] as usize) << shift;
            if x + n > scan.len() {
                return Err(Error::parse(at, "run overruns scanline"));
            }
            let prev = scan[x - 1];
            for q in &mut scan[x..x + n] {
                *q = prev;
            }
            x += n;
            shift += 8;
        } else {
            scan[x] = p;
            x += 1;
            shift = 0;
        }
    }
    Ok(())
}

/// Serialize with adaptive RLE scanlines (flat when the width is outside the
/// RLE-encodable range).
pub fn write_radiance_hdr(img: &HdrImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes();
    let rle = (8..32768).contains(&w);
    let mut chan = vec![0u8; w];
    for y in 0..h {
        let px: Vec<[u8; 4]> = (0..w).map(|x| encode_rgbe(img.pixel(x, y))).collect();
        if !rle {
            for p in &px {
                out.extend_from_slice(p);
            }
            continue;
        }
        out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
        for c in 0..4 {
            for (d, p) in chan.iter_mut().zip(&px) {
                *d = p[c];
            }
            rle_channel(&chan, &mut out);
        }
    }
    out
}

fn rle_channel(data: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let n = data.len();
    let mut i = 0;
    while i < n {
        // find the next run of at least MIN_RUN
        let mut run_start = i;
        let mut run_len = 0;
        while run_start < n {
            run_len = 1;
            while run_start + run_len < n
                && run_len < 127
                && data[run_start + run_len] == data[run_start]
            {
                run_len += 1;
            }
            if run_len >= MIN_RUN {
                break;
            }
            run_start += run_len;
        }
        if run_start >= n {
            run_len = 0;
        }
        while i < run_start {
            let k = (run_start - i).min(128);
            out.push(k as u8);
            out.extend_from_slice(&data[i..i + k]);
            i += k;
        }
        if run_len >= MIN_RUN {
            out.push(128 + run_len as u8);
            out.push(data[run_start]);
            i = run_start + run_len;
        }
    }
}

pub fn read_hdr(path: impl AsRef<Path>) -> Result<HdrImage> {
    read_radiance_hdr(&std::fs::read(path)?)
}

pub fn write_hdr(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_radiance_hdr(img))?;
    Ok(())
}
