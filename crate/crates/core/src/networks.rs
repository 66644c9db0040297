//! Learnable predictors: the kernel-prediction U-Net, the γ regressor, the
//! latent encoder and the patch discriminator.
//!
//! All networks work on single images in NCHW layout with `N = 1`. Weights
//! are generated in `f64` from a seed and cast to the working precision, so
//! an `f32` training model and its `f64` copy start from the same values.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrio::HdrImage;
use crate::pipeline::{self, Prepared, ALPHA_DETAIL, BETA_COLOR, GAMMA_BASE_RANGE, GAMMA_POST_RANGE, K2};
use crate::tensorgrad::gradcheck::{project, rel_error, Report};
use crate::tensorgrad::{Padding, Parameter, Real, Tape, Tensor, Var, WeightContainer};

pub const D_Z: usize = 8;
const SLOPE: f64 = 0.2;
/// Logits are bounded to `±LOGIT_BOUND` before the sigmoid so the γ range
/// stays open even in `f32`.
const LOGIT_BOUND: f64 = 8.0;
const POOL: usize = 8;
const TCN_HIDDEN: usize = 64;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub d_z: usize,
    pub channels: usize,
    pub levels: usize,
    /// Feed the log luminance to the discriminator alongside the LDR image.
    #[serde(default)]
    pub conditional_disc: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_z: D_Z,
            channels: 16,
            levels: 3,
            conditional_disc: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.channels < 2 || self.levels == 0 || self.levels > 6 {
            return Err(Error::Config(format!("unusable network config {self:?}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// How parameters enter a tape: as gradient-receiving leaves, or as
/// constants for a network that is not being updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

fn bind<T: Real>(tape: &Tape<T>, p: &Parameter<T>, mode: Mode) -> Var<T> {
    match mode {
        Mode::Train => tape.param(p),
        Mode::Frozen => tape.frozen(p),
    }
}

fn checked<T: Real>(v: Var<T>, layer: &str) -> Result<Var<T>> {
    if v.all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("activations of layer {layer}")))
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-a..a))
}

#[derive(Clone, Debug)]
struct Conv<T> {
    w: Parameter<T>,
    b: Parameter<T>,
    stride: usize,
}

impl<T: Real> Conv<T> {
    fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = xavier(rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
        Self {
            w: Parameter::new(format!("{name}.w"), w.cast()),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros([cout])),
            stride,
        }
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let tape = x.tape();
        let k = self.w.tensor.shape()[2];
        let y = x.conv2d(
            &bind(tape, &self.w, mode),
            Some(&bind(tape, &self.b, mode)),
            self.stride,
            Padding::Replicate(k / 2),
        )?;
        checked(y, self.name())
    }

    fn name(&self) -> &str {
        self.w.name().trim_end_matches(".w")
    }

    fn params(&self) -> [&Parameter<T>; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        Conv {
            w: self.w.cast(),
            b: self.b.cast(),
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug)]
struct Linear<T> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Real> Linear<T> {
    fn new(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = xavier(rng, &[n_in, n_out], n_in, n_out);
        Self {
            w: Parameter::new(format!("{name}.w"), w.cast()),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros([1, n_out])),
        }
    }

    fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let tape = x.tape();
        let y = x
            .matmul(&bind(tape, &self.w, mode))?
            .add(&bind(tape, &self.b, mode))?;
        checked(y, self.w.name().trim_end_matches(".w"))
    }

    fn params(&self) -> [&Parameter<T>; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

fn lrelu<T: Real>(x: Var<T>) -> Result<Var<T>> {
    x.leaky_relu(SLOPE)
}

fn image_dims<T: Real>(x: &Var<T>, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    match *x.shape() {
        [1, c, h, w] if c == channels => Ok((h, w)),
        _ => Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![1, channels, 0, 0],
        }),
    }
}

fn latent_row<T: Real>(z: &Var<T>, d_z: usize, op: &'static str) -> Result<()> {
    if z.shape() != [1, d_z] {
        return Err(Error::Shape {
            op,
            lhs: z.shape().to_vec(),
            rhs: vec![1, d_z],
        });
    }
    if !z.all_finite() {
        return Err(Error::NonFinite(format!("latent code given to {op}")));
    }
    Ok(())
}

/// Kernel-prediction U-Net with the latent code tiled into extra input
/// channels.
#[derive(Clone, Debug)]
pub struct EdgePreservingNet<T> {
    d_z: usize,
    stem: [Conv<T>; 2],
    down: Vec<Conv<T>>,
    enc: Vec<Conv<T>>,
    up: Vec<Conv<T>>,
    merge: Vec<Conv<T>>,
    head: Conv<T>,
}

impl<T: Real> EdgePreservingNet<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let ch = |i: usize| c << i;
        let stem = [
            Conv::new("epn.stem0", 1 + cfg.d_z, c, 3, 1, rng),
            Conv::new("epn.stem1", c, c, 3, 1, rng),
        ];
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for i in 1..=cfg.levels {
            down.push(Conv::new(&format!("epn.down{i}"), ch(i - 1), ch(i), 3, 2, rng));
            if i < cfg.levels {
                enc.push(Conv::new(&format!("epn.enc{i}"), ch(i), ch(i), 3, 1, rng));
            }
        }
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for i in 0..cfg.levels {
            up.push(Conv::new(&format!("epn.up{i}"), ch(i + 1), ch(i), 3, 1, rng));
            merge.push(Conv::new(&format!("epn.merge{i}"), ch(i + 1), ch(i), 3, 1, rng));
        }
        Self {
            d_z: cfg.d_z,
            stem,
            down,
            enc,
            up,
            merge,
            head: Conv::new("epn.head", c, K2, 1, 1, rng),
        }
    }

    /// Raw nonnegative kernels `[1, K², H, W]` for log luminance
    /// `[1, 1, H, W]` and latent `[1, d_z]`.
    pub fn forward(&self, log_lum: &Var<T>, z: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let (h, w) = image_dims(log_lum, 1, "predict_kernels")?;
        latent_row(z, self.d_z, "predict_kernels")?;
        let tiled = z.reshape(&[1, self.d_z, 1, 1])?.broadcast_to(&[1, self.d_z, h, w])?;
        let x = Var::concat(&[log_lum.clone(), tiled], 1)?;
        let mut x = lrelu(self.stem[0].forward(&x, mode)?)?;
        x = lrelu(self.stem[1].forward(&x, mode)?)?;
        let mut skips = vec![x.clone()];
        for (i, d) in self.down.iter().enumerate() {
            x = lrelu(d.forward(&x, mode)?)?;
            if let Some(e) = self.enc.get(i) {
                x = lrelu(e.forward(&x, mode)?)?;
                skips.push(x.clone());
            }
        }
        for i in (0..self.up.len()).rev() {
            let skip = &skips[i];
            let (sh, sw) = (skip.shape()[2], skip.shape()[3]);
            let u = x.upsample_nearest2x()?.slice(2, 0, sh)?.slice(3, 0, sw)?;
            let u = lrelu(self.up[i].forward(&u, mode)?)?;
            x = lrelu(self.merge[i].forward(&Var::concat(&[u, skip.clone()], 1)?, mode)?)?;
        }
        checked(self.head.forward(&x, mode)?.softplus()?, "epn.head.softplus")
    }

    fn convs(&self) -> impl Iterator<Item = &Conv<T>> {
        self.stem
            .iter()
            .chain(&self.down)
            .chain(&self.enc)
            .chain(&self.up)
            .chain(&self.merge)
            .chain(std::iter::once(&self.head))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv<T>> {
        self.stem
            .iter_mut()
            .chain(&mut self.down)
            .chain(&mut self.enc)
            .chain(&mut self.up)
            .chain(&mut self.merge)
            .chain(std::iter::once(&mut self.head))
    }

    fn cast<U: Real>(&self) -> EdgePreservingNet<U> {
        EdgePreservingNet {
            d_z: self.d_z,
            stem: [self.stem[0].cast(), self.stem[1].cast()],
            down: self.down.iter().map(Conv::cast).collect(),
            enc: self.enc.iter().map(Conv::cast).collect(),
            up: self.up.iter().map(Conv::cast).collect(),
            merge: self.merge.iter().map(Conv::cast).collect(),
            head: self.head.cast(),
        }
    }
}

/// Strided conv stack, adaptive pooling to 8×8, then two fully-connected
/// layers; the latent code joins the flattened features.
#[derive(Clone, Debug)]
pub struct ToneCompressingNet<T> {
    d_z: usize,
    convs: [Conv<T>; 3],
    fc1: Linear<T>,
    fc2: Linear<T>,
}

/// Map an unbounded logit into the open interval `(lo, hi)`.
fn squash<T: Real>(x: &Var<T>, (lo, hi): (f64, f64)) -> Result<Var<T>> {
    x.mul_scalar(1.0 / LOGIT_BOUND)?
        .tanh()?
        .mul_scalar(LOGIT_BOUND)?
        .sigmoid()?
        .mul_scalar(hi - lo)?
        .add_scalar(lo)
}

impl<T: Real> ToneCompressingNet<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let convs = [
            Conv::new("tcn.conv0", 1, c / 2, 3, 2, rng),
            Conv::new("tcn.conv1", c / 2, c, 3, 2, rng),
            Conv::new("tcn.conv2", c, c, 3, 2, rng),
        ];
        Self {
            d_z: cfg.d_z,
            convs,
            fc1: Linear::new("tcn.fc1", c * POOL * POOL + cfg.d_z, TCN_HIDDEN, rng),
            fc2: Linear::new("tcn.fc2", TCN_HIDDEN, 2, rng),
        }
    }

    /// `(γ_base, γ_post)` as `[1]`-shaped variables.
    pub fn forward(&self, log_lum: &Var<T>, z: &Var<T>, mode: Mode) -> Result<(Var<T>, Var<T>)> {
        image_dims(log_lum, 1, "predict_gammas")?;
        latent_row(z, self.d_z, "predict_gammas")?;
        let mut x = log_lum.clone();
        for c in &self.convs {
            x = lrelu(c.forward(&x, mode)?)?;
        }
        let feat = x.adaptive_avg_pool2d(POOL, POOL)?;
        let n = feat.numel();
        let feat = Var::concat(&[feat.reshape(&[1, n])?, z.clone()], 1)?;
        let hdn = lrelu(self.fc1.forward(&feat, mode)?)?;
        let out = self.fc2.forward(&hdn, mode)?;
        let gb = squash(&out.slice(1, 0, 1)?.reshape(&[1])?, GAMMA_BASE_RANGE)?;
        let gp = squash(&out.slice(1, 1, 1)?.reshape(&[1])?, GAMMA_POST_RANGE)?;
        Ok((gb, gp))
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.convs.iter().flat_map(Conv::params).collect();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.convs.iter_mut().flat_map(Conv::params_mut).collect();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn cast<U: Real>(&self) -> ToneCompressingNet<U> {
        ToneCompressingNet {
            d_z: self.d_z,
            convs: [self.convs[0].cast(), self.convs[1].cast(), self.convs[2].cast()],
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

/// Encoder output: mean and log-variance rows `[1, d_z]`.
pub struct Posterior<T: Real> {
    pub mu: Var<T>,
    pub logvar: Var<T>,
}

impl<T: Real> Posterior<T> {
    pub fn sigma(&self) -> Result<Var<T>> {
        self.logvar.mul_scalar(0.5)?.exp()
    }

    /// `mu + sigma * noise`, differentiable in `mu` and `logvar`.
    pub fn sample(&self, noise: &[f64]) -> Result<Var<T>> {
        let d = self.mu.numel();
        if noise.len() != d {
            return Err(Error::contract(format!("noise of length {} for d_z {d}", noise.len())));
        }
        let n = self
            .mu
            .tape()
            .constant(Tensor::new([1, d], noise.iter().map(|&v| T::c(v)).collect())?);
        self.mu.add(&self.sigma()?.mul(&n)?)
    }

    /// `KL(N(mu, sigma²) || N(0, I))`, summed over dimensions.
    pub fn kl(&self) -> Result<Var<T>> {
        self.mu
            .square()?
            .add(&self.logvar.exp()?)?
            .sub(&self.logvar)?
            .add_scalar(-1.0)?
            .sum()?
            .mul_scalar(0.5)
    }
}

#[derive(Clone, Debug)]
pub struct LatentEncoder<T> {
    convs: [Conv<T>; 3],
    fc: Linear<T>,
}

impl<T: Real> LatentEncoder<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            convs: [
                Conv::new("enc.conv0", 3, c, 3, 2, rng),
                Conv::new("enc.conv1", c, 2 * c, 3, 2, rng),
                Conv::new("enc.conv2", 2 * c, 2 * c, 3, 2, rng),
            ],
            fc: Linear::new("enc.fc", 2 * c, 2 * cfg.d_z, rng),
        }
    }

    /// Posterior over the latent code for an LDR image `[1, 3, H, W]`.
    pub fn forward(&self, ldr: &Var<T>, mode: Mode) -> Result<Posterior<T>> {
        image_dims(ldr, 3, "encode")?;
        let mut x = ldr.clone();
        for c in &self.convs {
            x = lrelu(c.forward(&x, mode)?)?;
        }
        let ch = x.shape()[1];
        let feat = x.adaptive_avg_pool2d(1, 1)?.reshape(&[1, ch])?;
        let out = self.fc.forward(&feat, mode)?;
        let d = out.shape()[1] / 2;
        Ok(Posterior {
            mu: out.slice(1, 0, d)?,
            logvar: out.slice(1, d, d)?,
        })
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.convs.iter().flat_map(Conv::params).collect();
        v.extend(self.fc.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.convs.iter_mut().flat_map(Conv::params_mut).collect();
        v.extend(self.fc.params_mut());
        v
    }

    fn cast<U: Real>(&self) -> LatentEncoder<U> {
        LatentEncoder {
            convs: [self.convs[0].cast(), self.convs[1].cast(), self.convs[2].cast()],
            fc: self.fc.cast(),
        }
    }
}

/// Patch discriminator: three stride-2 blocks and a 1×1 scoring conv.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    conditional: bool,
    convs: [Conv<T>; 3],
    head: Conv<T>,
}

impl<T: Real> Discriminator<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let cin = if cfg.conditional_disc { 4 } else { 3 };
        Self {
            conditional: cfg.conditional_disc,
            convs: [
                Conv::new("disc.conv0", cin, c, 3, 2, rng),
                Conv::new("disc.conv1", c, 2 * c, 3, 2, rng),
                Conv::new("disc.conv2", 2 * c, 4 * c, 3, 2, rng),
            ],
            head: Conv::new("disc.head", 4 * c, 1, 1, 1, rng),
        }
    }

    /// Score map `[1, 1, ⌈H/8⌉, ⌈W/8⌉]`. `log_lum` is only read by a
    /// conditional discriminator.
    pub fn forward(&self, ldr: &Var<T>, log_lum: Option<&Var<T>>, mode: Mode) -> Result<Var<T>> {
        image_dims(ldr, 3, "discriminate")?;
        let mut x = match (self.conditional, log_lum) {
            (false, _) => ldr.clone(),
            (true, Some(l)) => Var::concat(&[ldr.clone(), l.clone()], 1)?,
            (true, None) => {
                return Err(Error::contract("conditional discriminator needs the log luminance"))
            }
        };
        for c in &self.convs {
            x = lrelu(c.forward(&x, mode)?)?;
        }
        self.head.forward(&x, mode)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        self.convs
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(Conv::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.convs
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(Conv::params_mut)
            .collect()
    }

    fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            conditional: self.conditional,
            convs: [self.convs[0].cast(), self.convs[1].cast(), self.convs[2].cast()],
            head: self.head.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaOverride {
    pub gamma_base: Option<f64>,
    pub gamma_post: Option<f64>,
}

impl GammaOverride {
    pub fn validate(&self) -> Result<()> {
        for (name, v, (lo, hi)) in [
            ("gamma_base", self.gamma_base, GAMMA_BASE_RANGE),
            ("gamma_post", self.gamma_post, GAMMA_POST_RANGE),
        ] {
            if let Some(v) = v {
                if !(v >= lo && v <= hi) {
                    return Err(Error::contract(format!("{name} {v} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }}

/// One generator evaluation.
pub struct Generated<T: Real> {
    pub log_lum: Var<T>,
    pub gamma_base: Var<T>,
    pub gamma_post: Var<T>,
    pub stages: pipeline::diff::Stages<T>,
}

/// The four networks of one model.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: NetConfig,
    pub epn: EdgePreservingNet<T>,
    pub tcn: ToneCompressingNet<T>,
    pub encoder: LatentEncoder<T>,
    pub disc: Discriminator<T>,
}

impl<T: Real> Model<T> {
    /// Xavier-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            epn: EdgePreservingNet::new(&config, &mut rng),
            tcn: ToneCompressingNet::new(&config, &mut rng),
            encoder: LatentEncoder::new(&config, &mut rng),
            disc: Discriminator::new(&config, &mut rng),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            epn: self.epn.cast(),
            tcn: self.tcn.cast(),
            encoder: self.encoder.cast(),
            disc: self.disc.cast(),
        }
    }

    /// Parameters updated by the generator step: kernel net, γ net, encoder.
    pub fn generator_params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.epn.convs().flat_map(Conv::params).collect();
        v.extend(self.tcn.params());
        v.extend(self.encoder.params());
        v
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Self::split_mut(&mut self.epn, &mut self.tcn, &mut self.encoder)
    }

    fn split_mut<'a>(
        epn: &'a mut EdgePreservingNet<T>,
        tcn: &'a mut ToneCompressingNet<T>,
        encoder: &'a mut LatentEncoder<T>,
    ) -> Vec<&'a mut Parameter<T>> {
        let mut v: Vec<_> = epn.convs_mut().flat_map(Conv::params_mut).collect();
        v.extend(tcn.params_mut());
        v.extend(encoder.params_mut());
        v
    }

    pub fn disc_params(&self) -> Vec<&Parameter<T>> {
        self.disc.params()
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.disc.params_mut()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.generator_params();
        v.extend(self.disc_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = Self::split_mut(&mut self.epn, &mut self.tcn, &mut self.encoder);
        v.extend(self.disc.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Raw kernels `[1, K², H, W]` for a log-luminance plane.
    pub fn predict_kernels(&self, log_lum: &Var<T>, z: &Var<T>, mode: Mode) -> Result<Var<T>> {
        self.epn.forward(log_lum, z, mode)
    }

    pub fn predict_gammas(&self, log_lum: &Var<T>, z: &Var<T>, mode: Mode) -> Result<(Var<T>, Var<T>)> {
        self.tcn.forward(log_lum, z, mode)
    }

    pub fn encode(&self, ldr: &Var<T>, mode: Mode) -> Result<Posterior<T>> {
        self.encoder.forward(ldr, mode)
    }

    pub fn discriminate(&self, ldr: &Var<T>, log_lum: Option<&Var<T>>, mode: Mode) -> Result<Var<T>> {
        self.disc.forward(ldr, log_lum, mode)
    }

    /// Kernels, γ values and the tone-mapping chain for one latent code.
    pub fn generate(&self, prep: &Prepared, z: &Var<T>, mode: Mode) -> Result<Generated<T>> {
        self.generate_with(prep, z, GammaOverride::default(), mode)
    }

    /// [`generate`](Self::generate) with fixed values replacing either
    /// predicted gamma; overrides must lie inside the gamma ranges.
    pub fn generate_with(&self, prep: &Prepared, z: &Var<T>, over: GammaOverride, mode: Mode) -> Result<Generated<T>> {
        let tape = z.tape();
        let l = tape.constant(prep.log_lum_tensor().cast());
        let raw = self.predict_kernels(&l, z, mode)?;
        let (mut gamma_base, mut gamma_post) = self.predict_gammas(&l, z, mode)?;
        over.validate()?;
        if let Some(g) = over.gamma_base {
            gamma_base = tape.constant(Tensor::new([1], vec![T::c(g)])?);
        }
        if let Some(g) = over.gamma_post {
            gamma_post = tape.constant(Tensor::new([1], vec![T::c(g)])?);
        }
        let stages = pipeline::diff::tonemap(prep, &raw, &gamma_base, &gamma_post, ALPHA_DETAIL, BETA_COLOR)?;
        Ok(Generated {
            log_lum: l,
            gamma_base,
            gamma_post,
            stages,
        })
    }

    /// Weights plus the architecture manifest.
    pub fn to_container(&self) -> Result<WeightContainer> {
        let mut c = WeightContainer::new();
        c.metadata.insert(MANIFEST_KEY.into(), self.config.to_toml());
        for p in self.params() {
            c.insert(p.name(), &p.tensor)?;
        }
        Ok(c)
    }

    /// Rebuild from a container; every discrepancy between the stored
    /// tensors and the architecture in the manifest is listed in the error.
    pub fn from_container(c: &WeightContainer) -> Result<Self> {
        let manifest = c
            .metadata
            .get(MANIFEST_KEY)
            .ok_or_else(|| Error::Weights("container has no model manifest".into()))?;
        let config = NetConfig::from_toml(manifest).map_err(|e| Error::Weights(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        let mut problems = Vec::new();
        let mut expected = Vec::new();
        for p in model.params_mut() {
            expected.push(p.name().to_owned());
            let shape = p.tensor.shape().to_vec();
            match c.get(p.name()) {
                None => problems.push(format!("missing tensor {:?}", p.name())),
                Some(e) if e.shape != shape => problems.push(format!(
                    "tensor {:?} has shape {:?}, expected {shape:?}",
                    p.name(),
                    e.shape
                )),
                Some(_) => p.tensor = c.tensor(p.name(), &shape)?,
            }
        }
        for e in c.entries() {
            if !expected.contains(&e.name) {
                problems.push(format!("unexpected tensor {:?}", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Weights(problems.join("; ")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&WeightContainer::load(path)?)
    }
}

/// A latent row `[1, d_z]` as a constant on `tape`.
pub fn latent_const<T: Real>(tape: &Tape<T>, z: &[f64]) -> Result<Var<T>> {
    Ok(tape.constant(Tensor::new([1, z.len()], z.iter().map(|&v| T::c(v)).collect())?))
}

/// Standard-normal latent code drawn from `rng`.
pub fn sample_latent(rng: &mut impl Rng, d_z: usize) -> Vec<f64> {
    (0..d_z)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Finite-difference check of the full generator (kernel net, γ net and the
/// tone-mapping chain up to the unclamped LDR) with respect to the latent
/// code and `n_weights` generator weights spread evenly over all tensors.
/// The probe is the weighted mean of the output, so gradients are on the
/// scale of a unit loss.
pub fn generator_gradcheck(
    model: &Model<f64>,
    hdr: &HdrImage,
    z: &[f64],
    n_weights: usize,
    h: f64,
) -> Result<Report> {
    let prep = Prepared::new(hdr)?;
    let eval = |m: &Model<f64>, z: &[f64], grads: bool| -> Result<(f64, Vec<f64>, Vec<Option<Tensor<f64>>>)> {
        let tape = Tape::<f64>::new();
        let mode = if grads { Mode::Train } else { Mode::Frozen };
        let zv = tape.leaf(Tensor::new([1, z.len()], z.to_vec())?, grads);
        let st = m.generate(&prep, &zv, mode)?.stages;
        let n = st.ldr_unclamped.numel() as f64;
        let loss = project(&st.ldr_unclamped)?.mul_scalar(1.0 / n)?;
        if !grads {
            return Ok((loss.item(), Vec::new(), Vec::new()));
        }
        tape.backward(&loss)?;
        let gz = zv.grad().map_or(vec![0.0; z.len()], |g| g.into_data());
        let gw = m.generator_params().iter().map(|p| tape.param_grad(p)).collect();
        Ok((loss.item(), gz, gw))
    };
    let (_, gz, gw) = eval(model, z, true)?;
    let mut report = Report {
        max_rel_error: 0.0,
        worst: None,
    };
    let mut note = |slot: usize, j: usize, a: f64, num: f64| {
        let e = rel_error(a, num);
        if !report.max_rel_error.is_nan() && (e.is_nan() || e > report.max_rel_error) {
            report.max_rel_error = e;
            report.worst = Some((slot, j, a, num));
        }
    };
    let mut zp = z.to_vec();
    for j in 0..z.len() {
        let num = central(h, |d| {
            zp[j] = z[j] + d;
            let f = eval(model, &zp, false).map(|r| r.0);
            zp[j] = z[j];
            f
        })?;
        note(0, j, gz[j], num);
    }
    let sizes: Vec<usize> = model.generator_params().iter().map(|p| p.tensor.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe = model.clone();
    for s in 0..n_weights {
        let mut flat = (s * total) / n_weights.max(1) + s % 7;
        flat %= total;
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let w0 = model.generator_params()[pi].tensor.data()[off];
        let num = central(h, |d| {
            probe.generator_params_mut()[pi].tensor.data_mut()[off] = w0 + d;
            let f = eval(&probe, z, false).map(|r| r.0);
            probe.generator_params_mut()[pi].tensor.data_mut()[off] = w0;
            f
        })?;
        let a = gw[pi].as_ref().map_or(0.0, |g| g.data()[off]);
        note(1 + pi, off, a, num);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let c = NetConfig {
            conditional_disc: true,
            ..NetConfig::default()
        };
        assert_eq!(NetConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(NetConfig::from_toml("d_z = 0\nchannels = 16\nlevels = 3").is_err());
    }

    #[test]
    fn squash_is_open_at_extremes_in_f32() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2], vec![1e6f32, -1e6]).unwrap());
        let g = squash(&x, GAMMA_BASE_RANGE).unwrap().to_vec();
        assert!(g[0] < GAMMA_BASE_RANGE.1 as f32 && g[1] > GAMMA_BASE_RANGE.0 as f32);
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let tape = Tape::<f64>::new();
        let p = Posterior {
            mu: tape.constant(Tensor::zeros([1, 4])),
            logvar: tape.constant(Tensor::zeros([1, 4])),
        };
        assert_eq!(p.kl().unwrap().item(), 0.0);
    }
}
