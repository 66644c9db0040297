//! Procedural HDR scenes for fixtures, toy training sets and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hdrio::HdrImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scene {
    Window,
    Sunset,
    Lamps,
    Checker,
    Foliage,
}

impl Scene {
    pub const ALL: [Scene; 5] = [
        Scene::Window,
        Scene::Sunset,
        Scene::Lamps,
        Scene::Checker,
        Scene::Foliage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Window => "window",
            Scene::Sunset => "sunset",
            Scene::Lamps => "lamps",
            Scene::Checker => "checker",
            Scene::Foliage => "foliage",
        }
    }
}

/// Smooth value noise in `[0, 1]`, lattice spacing `cell` pixels.
struct Noise {
    gw: usize,
    lattice: Vec<f64>,
    cell: f64,
}

impl Noise {
    fn new(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: f64) -> Self {
        let gw = (w as f64 / cell) as usize + 2;
        let gh = (h as f64 / cell) as usize + 2;
        Self {
            gw,
            lattice: (0..gw * gh).map(|_| rng.random()).collect(),
            cell,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - ix as f64), s(fy - iy as f64));
        let g = |i: usize, j: usize| self.lattice[j * self.gw + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Multi-octave texture in roughly `[0, 1]`.
fn fbm(octaves: &[Noise], x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    let mut amp = 0.5;
    let mut norm = 0.0;
    for o in octaves {
        v += amp * o.at(x, y);
        norm += amp;
        amp *= 0.5;
    }
    v / norm
}

pub fn render(scene: Scene, width: usize, height: usize, seed: u64) -> HdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene as u64) << 32);
    let scale = width.max(height) as f64;
    let octaves: Vec<Noise> = [0.25, 0.12, 0.06, 0.03]
        .iter()
        .map(|f| Noise::new(&mut rng, width, height, (f * scale).max(1.5)))
        .collect();
    let tint: [f64; 3] = [rng.random_range(0.8..1.2), 1.0, rng.random_range(0.8..1.2)];
    let lights: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.15..0.85) * width as f64,
                rng.random_range(0.15..0.85) * height as f64,
                rng.random_range(0.03..0.08) * scale,
                10f64.powf(rng.random_range(2.0..3.0)),
            )
        })
        .collect();
    let win = (
        rng.random_range(0.15..0.4),
        rng.random_range(0.1..0.3),
        rng.random_range(0.55..0.85),
        rng.random_range(0.5..0.75),
    );
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (xf / width as f64, yf / height as f64);
            let t = fbm(&octaves, xf, yf);
            let (lum, color) = match scene {
                Scene::Window => {
                    let inside = u > win.0 && u < win.2 && v > win.1 && v < win.3;
                    if inside {
                        (60.0 * (1.0 + v) * (0.6 + 0.8 * t), [0.8, 0.95, 1.2])
                    } else {
                        (0.05 + 0.25 * t * t, [1.1, 1.0, 0.8])
                    }
                }
                Scene::Sunset => {
                    let horizon = 0.62 + 0.04 * (t - 0.5);
                    if v < horizon {
                        let sky = 0.5 + 8.0 * (v / horizon).powi(3);
                        let d2 = (u - 0.55).powi(2) + (v - horizon + 0.08).powi(2);
                        let sun = 4000.0 * (-d2 / 0.0015).exp();
                        (sky * (0.85 + 0.3 * t) + sun, [1.25, 0.9, 0.7])
                    } else {
                        (0.01 + 0.08 * t, [0.7, 0.85, 0.6])
                    }
                }
                Scene::Lamps => {
                    let mut l = 0.02 + 0.1 * t;
                    for &(cx, cy, r, peak) in &lights {
                        let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                        l += peak * (-d2 / (2.0 * r * r)).exp();
                    }
                    (l, [1.2, 1.0, 0.75])
                }
                Scene::Checker => {
                    let cx = (u * 4.0) as usize;
                    let cy = (v * 4.0) as usize;
                    let level = ((cx + 3 * cy) % 5) as f64 - 2.0;
                    (10f64.powf(level) * (0.7 + 0.6 * t), [1.0, 1.0, 1.0])
                }
                Scene::Foliage => (10f64.powf(4.0 * t - 1.5), [0.75, 1.1, 0.7]),
            };
            for c in 0..3 {
                let jx = (xf + 37.0 * c as f64) % width as f64;
                let jitter = 1.0 + 0.1 * (fbm(&octaves[2..], jx, yf) - 0.5);
                data.push(lum * color[c] * tint[c] * jitter);
            }
        }
    }
    HdrImage::new(width, height, data).expect("procedural radiance is finite and nonnegative")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_high_range() {
        for s in Scene::ALL {
            let a = render(s, 40, 30, 7);
            assert_eq!(a, render(s, 40, 30, 7));
            let y = crate::hdrio::luminance(&a).unwrap();
            let lo = y.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.data.iter().cloned().fold(0.0, f64::max);
            assert!(hi / lo > 50.0, "{} range {}", s.name(), hi / lo);
        }
    }
}
