//! Losses, the two-branch adversarial training loop, dataset construction
//! from classical operators, and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrio::{self, HdrImage, LdrImage};
use crate::networks::{latent_const, sample_latent, Mode, Model, NetConfig};
use crate::pipeline::diff::ldr_tensor;
use crate::pipeline::{Prepared, BETA_COLOR};
use crate::tensorgrad::{
    adam_step, AdamConfig, AdamState, Parameter, Real, Tape, Tensor, Var, WeightContainer,
};
use crate::tmqi::{self, TmqiConfig, TmqiScore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_div: f64,
    pub lambda_tv: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_div: 5.0,
            lambda_tv: 1.0,
            tau: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_div, self.lambda_tv, self.tau];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// `loss_G = -mean(D(fake))`.
pub fn hinge_g<T: Real>(d_fake: &Var<T>) -> Result<Var<T>> {
    d_fake.mean()?.neg()
}

/// `loss_D = mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake)))`.
pub fn hinge_d<T: Real>(d_real: &Var<T>, d_fake: &Var<T>) -> Result<Var<T>> {
    d_real
        .neg()?
        .add_scalar(1.0)?
        .relu()?
        .mean()?
        .add(&d_fake.add_scalar(1.0)?.relu()?.mean()?)
}

/// `(loss_G, loss_D)` from discriminator score maps on real and fake images.
pub fn hinge_losses<T: Real>(d_real: &Var<T>, d_fake: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    Ok((hinge_g(d_fake)?, hinge_d(d_real, d_fake)?))
}

/// `min(mean|out1 - out2| / ||z1 - z2||_1, tau)`.
pub fn diversity_loss<T: Real>(
    out1: &Var<T>,
    out2: &Var<T>,
    z1: &[f64],
    z2: &[f64],
    tau: f64,
) -> Result<Var<T>> {
    if z1.len() != z2.len() {
        return Err(Error::contract(format!(
            "latent codes of lengths {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    let dz: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b).abs()).sum();
    if dz == 0.0 {
        return Err(Error::contract("diversity loss needs two distinct latent codes"));
    }
    out1.sub(out2)?.abs()?.mean()?.mul_scalar(1.0 / dz)?.min_scalar(tau)
}

/// Mean over pixels of `sqrt(dx² + dy²)` with forward differences, zero
/// past the last row and column. `base` is `[1, 1, H, W]`.
pub fn tv_loss<T: Real>(base: &Var<T>) -> Result<Var<T>> {
    let (h, w) = match *base.shape() {
        [1, 1, h, w] => (h, w),
        _ => {
            return Err(Error::Shape {
                op: "tv_loss",
                lhs: base.shape().to_vec(),
                rhs: vec![1, 1, 0, 0],
            })
        }
    };
    let tape = base.tape();
    let diff = |axis: usize, n: usize| -> Result<Var<T>> {
        if n < 2 {
            return Ok(tape.constant(Tensor::zeros([1, 1, h, w])));
        }
        let d = base.slice(axis, 1, n - 1)?.sub(&base.slice(axis, 0, n - 1)?)?;
        let mut pad = vec![1, 1, h, w];
        pad[axis] = 1;
        Var::concat(&[d, tape.constant(Tensor::zeros(pad))], axis)
    };
    let (dy, dx) = (diff(2, h)?, diff(3, w)?);
    dx.square()?.add(&dy.square()?)?.sqrt()?.mean()
}

/// Scalar loss terms of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub l_g: f64,
    pub l_d: f64,
    pub l_div: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_z: f64,
    pub l_tv: f64,
}

impl Components {
    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("l_g", self.l_g),
            ("l_d", self.l_d),
            ("l_div", self.l_div),
            ("l_rec", self.l_rec),
            ("l_kl", self.l_kl),
            ("l_z", self.l_z),
            ("l_tv", self.l_tv),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!("loss term {name} = {v}"))),
            None => Ok(()),
        }
    }

    /// `L_G + L_D - λ_div·L_div + λ_rec·L_rec + L_kl + L_z + λ_tv·L_tv`.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        self.check_finite()?;
        Ok(self.l_g + self.l_d - w.lambda_div * self.l_div
            + w.lambda_rec * self.l_rec
            + self.l_kl
            + self.l_z
            + w.lambda_tv * self.l_tv)
    }
}

/// One HDR image with a selected target.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub name: String,
    pub hdr: HdrImage,
    pub target: LdrImage,
    pub operator: String,
    pub score: TmqiScore,
}

/// Fixed-curve classical operator producing candidate targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Classical {
    /// Global photographic operator with the given key.
    Reinhard(f64),
    /// Adaptive logarithmic mapping with the given bias.
    Drago(f64),
    /// `(L / L_max)^g`.
    Gamma(f64),
}

pub const DISPLAY_GAMMA: f64 = 2.2;

impl Classical {
    pub const ALL: [Classical; 9] = [
        Classical::Reinhard(0.09),
        Classical::Reinhard(0.18),
        Classical::Reinhard(0.36),
        Classical::Drago(0.7),
        Classical::Drago(0.85),
        Classical::Drago(0.95),
        Classical::Gamma(1.0 / 1.8),
        Classical::Gamma(1.0 / 2.2),
        Classical::Gamma(1.0 / 2.8),
    ];

    pub fn name(&self) -> String {
        match self {
            Classical::Reinhard(k) => format!("reinhard-{k}"),
            Classical::Drago(b) => format!("drago-{b}"),
            Classical::Gamma(g) => format!("gamma-{:.3}", g),
        }
    }

    /// Display value for every luminance sample.
    fn curve(&self, lum: &[f64]) -> Vec<f64> {
        let n = lum.len() as f64;
        let log_avg = (lum.iter().map(|l| (l + 1e-6).ln()).sum::<f64>() / n).exp();
        let lmax = lum.iter().cloned().fold(0.0, f64::max);
        let disp = |v: f64| v.clamp(0.0, 1.0).powf(1.0 / DISPLAY_GAMMA);
        match *self {
            Classical::Reinhard(key) => lum
                .iter()
                .map(|l| {
                    let s = key * l / log_avg;
                    disp(s / (1.0 + s))
                })
                .collect(),
            Classical::Drago(b) => {
                let wmax = lmax / log_avg;
                let scale = 1.0 / (wmax + 1.0).log10();
                let p = b.ln() / 0.5f64.ln();
                lum.iter()
                    .map(|l| {
                        let lw = l / log_avg;
                        let d = scale * (lw + 1.0).ln() / (2.0 + 8.0 * (lw / wmax).powf(p)).ln();
                        disp(d)
                    })
                    .collect()
            }
            Classical::Gamma(g) => lum.iter().map(|l| (l / lmax).powf(g)).collect(),
        }
    }

    /// Tone curve on luminance with the pipeline's color rule
    /// `(c / L)^β · T(L)`.
    pub fn apply(&self, hdr: &HdrImage) -> Result<LdrImage> {
        let lum = hdrio::luminance(hdr)?;
        let t = self.curve(&lum.data);
        let mut out = Vec::with_capacity(hdr.data().len());
        for (p, px) in hdr.data().chunks_exact(3).enumerate() {
            for c in px {
                out.push((c / lum.data[p]).powf(BETA_COLOR) * t[p]);
            }
        }
        Ok(LdrImage::clamped(hdr.width(), hdr.height(), out)?.quantized())
    }
}

/// Every classical candidate for `hdr`, scored and sorted by descending Q
/// (ties keep operator order).
pub fn rank_candidates(hdr: &HdrImage) -> Result<Vec<(Classical, LdrImage, TmqiScore)>> {
    let cfg = TmqiConfig::fit(hdr.height(), hdr.width())?;
    let mut scored = Classical::ALL
        .iter()
        .map(|op| {
            let ldr = op.apply(hdr)?;
            let s = tmqi::tmqi_with(hdr, &ldr, &cfg)?;
            Ok((*op, ldr, s))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.2.q.total_cmp(&a.2.q));
    Ok(scored)
}

/// Top-`k` targets per image for in-memory HDR images.
pub fn build_pairs(images: Vec<(String, HdrImage)>, k: usize) -> Result<Vec<TrainingPair>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let ranked: Vec<_> = images
        .par_iter()
        .map(|(_, hdr)| rank_candidates(hdr))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for ((name, hdr), cands) in images.into_iter().zip(ranked) {
        for (op, ldr, score) in cands.into_iter().take(k) {
            pairs.push(TrainingPair {
                name: name.clone(),
                hdr: hdr.clone(),
                target: ldr,
                operator: op.name(),
                score,
            });
        }
    }
    Ok(pairs)
}

/// `.hdr` files of a directory in name order; unreadable files are skipped
/// with a warning.
pub fn read_hdr_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, HdrImage)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("hdr")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match hdrio::read_hdr(&p) {
            Ok(img) => out.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), img)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no readable .hdr files in {}", dir.display())));
    }
    Ok(out)
}

pub fn build_dataset(hdr_dir: impl AsRef<Path>, k: usize) -> Result<Vec<TrainingPair>> {
    build_pairs(read_hdr_dir(hdr_dir)?, k)
}

/// Write each target as PNG plus a whitespace-separated manifest
/// `name rank operator png q s n`; returns the manifest path.
pub fn write_dataset(pairs: &[TrainingPair], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut manifest = String::from("# name rank operator png q s n\n");
    let mut rank = 0;
    for (i, p) in pairs.iter().enumerate() {
        rank = if i > 0 && pairs[i - 1].name == p.name { rank + 1 } else { 1 };
        let png = format!("{}_top{}_{}.png", p.name, rank, p.operator);
        hdrio::write_png8(&p.target, out_dir.join(&png))?;
        manifest.push_str(&format!(
            "{} {} {} {} {:.6} {:.6} {:.6}\n",
            p.name, rank, p.operator, png, p.score.q, p.score.s, p.score.n
        ));
    }
    let path = out_dir.join("pairs.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

fn flip(data: &[f64], w: usize, h: usize, horizontal: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal { (w - 1 - x, y) } else { (x, h - 1 - y) };
            out.extend_from_slice(&data[3 * (sy * w + sx)..3 * (sy * w + sx) + 3]);
        }
    }
    out
}

/// Mirror HDR and target together, left-right or top-bottom.
pub fn flip_pair(pair: &TrainingPair, horizontal: bool) -> Result<TrainingPair> {
    let (w, h) = (pair.hdr.width(), pair.hdr.height());
    Ok(TrainingPair {
        hdr: HdrImage::new(w, h, flip(pair.hdr.data(), w, h, horizontal))?,
        target: LdrImage::new(w, h, flip(pair.target.data(), w, h, horizontal))?,
        ..pair.clone()
    })
}

/// Crop offsets and flips drawn for one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub x0: usize,
    pub y0: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn draw(rng: &mut impl Rng, w: usize, h: usize, patch: usize) -> Result<Self> {
        if patch == 0 || w < patch || h < patch {
            return Err(Error::Config(format!(
                "image {w}x{h} is smaller than the {patch} px patch; lower `patch` in the config"
            )));
        }
        Ok(Self {
            x0: rng.random_range(0..=w - patch),
            y0: rng.random_range(0..=h - patch),
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        })
    }

    pub fn apply(&self, pair: &TrainingPair, patch: usize) -> Result<TrainingPair> {
        let mut p = TrainingPair {
            hdr: pair.hdr.crop(self.x0, self.y0, patch, patch)?,
            target: pair.target.crop(self.x0, self.y0, patch, patch)?,
            ..pair.clone()
        };
        if self.flip_h {
            p = flip_pair(&p, true)?;
        }
        if self.flip_v {
            p = flip_pair(&p, false)?;
        }
        Ok(p)
    }
}

/// Random aligned crop to `patch` plus random flips.
pub fn augment(pair: &TrainingPair, patch: usize, rng: &mut impl Rng) -> Result<TrainingPair> {
    if pair.target.width() != pair.hdr.width() || pair.target.height() != pair.hdr.height() {
        return Err(Error::Shape {
            op: "augment",
            lhs: vec![pair.hdr.height(), pair.hdr.width()],
            rhs: vec![pair.target.height(), pair.target.width()],
        });
    }
    Augmentation::draw(rng, pair.hdr.width(), pair.hdr.height(), patch)?.apply(pair, patch)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub hdr_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lambda_rec: f64,
    pub lambda_div: f64,
    pub lambda_tv: f64,
    pub tau: f64,
    pub d_z: usize,
    pub channels: usize,
    pub levels: usize,
    pub conditional_disc: bool,
    pub seed: u64,
    pub top_k: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let n = NetConfig::default();
        Self {
            patch: 64,
            steps: 200,
            lr_g: 5e-5,
            lr_d: 2e-4,
            lambda_rec: w.lambda_rec,
            lambda_div: w.lambda_div,
            lambda_tv: w.lambda_tv,
            tau: w.tau,
            d_z: n.d_z,
            channels: n.channels,
            levels: n.levels,
            conditional_disc: n.conditional_disc,
            seed: 0,
            top_k: 3,
            checkpoint_every: 0,
            paths: Paths::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        self.weights().validate()?;
        if self.patch == 0 || self.top_k == 0 {
            return Err(Error::Config("patch and top_k must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            d_z: self.d_z,
            channels: self.channels,
            levels: self.levels,
            conditional_disc: self.conditional_disc,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_div: self.lambda_div,
            lambda_tv: self.lambda_tv,
            tau: self.tau,
        }
    }
}

/// Per-step record; the CSV log has one row of these columns per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub l_g: f64,
    pub l_d: f64,
    pub l_div: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_z: f64,
    pub l_tv: f64,
    /// Generator weights bit-unchanged by the discriminator update and
    /// discriminator weights bit-unchanged by the generator update.
    #[serde(skip)]
    pub isolated: bool,
}

impl LossReport {
    pub fn components(&self) -> Components {
        Components {
            l_g: self.l_g,
            l_d: self.l_d,
            l_div: self.l_div,
            l_rec: self.l_rec,
            l_kl: self.l_kl,
            l_z: self.l_z,
            l_tv: self.l_tv,
        }
    }
}

fn snapshot(params: &[&Parameter<f32>]) -> Vec<Vec<u32>> {
    params
        .iter()
        .map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn grads(tape: &Tape<f32>, params: &[&Parameter<f32>]) -> Vec<Option<Tensor<f32>>> {
    params.iter().map(|p| tape.param_grad(p)).collect()
}

const MODEL_FILE: &str = "model.tsw";
const OPTIM_FILE: &str = "optimizer.tsw";
const MANIFEST_FILE: &str = "manifest.toml";

/// Model, optimizer moments and data stream of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    adam_g: AdamState<f32>,
    adam_d: AdamState<f32>,
    rng: ChaCha8Rng,
    pairs: Vec<TrainingPair>,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, pairs: Vec<TrainingPair>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("training needs at least one pair".into()));
        }
        let model = Model::new(config.net(), config.seed)?;
        let adam_g = AdamState::new(model.generator_params());
        let adam_d = AdamState::new(model.disc_params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            config,
            model,
            adam_g,
            adam_d,
            rng,
            pairs,
            step: 0,
        })
    }

    /// One discriminator update followed by one generator update over the
    /// cVAE branch (z encoded from the target) and the cLR branch (z from
    /// the prior).
    pub fn train_step(&mut self) -> Result<LossReport> {
        let cfg = &self.config;
        let w = cfg.weights();
        let idx = self.rng.random_range(0..self.pairs.len());
        let pair = augment(&self.pairs[idx], cfg.patch, &mut self.rng)?;
        let z_prior = sample_latent(&mut self.rng, cfg.d_z);
        let noise = sample_latent(&mut self.rng, cfg.d_z);
        let prep = Prepared::new(&pair.hdr)?;
        let target = ldr_tensor::<f32>(&pair.target);

        let tg = Tape::<f32>::new();
        let real = tg.constant(target.clone());
        let post = self.model.encode(&real, Mode::Train)?;
        let z_enc = post.sample(&noise)?;
        let vae = self.model.generate(&prep, &z_enc, Mode::Train)?;
        let zp = latent_const(&tg, &z_prior)?;
        let clr = self.model.generate(&prep, &zp, Mode::Train)?;
        let fake_vae = &vae.stages.ldr_unclamped;
        let fake_clr = &clr.stages.ldr_unclamped;

        let td = Tape::<f32>::new();
        let cond_d = td.constant(prep.log_lum_tensor().cast());
        let cond_d = cfg.conditional_disc.then_some(&cond_d);
        let d_real = self.model.discriminate(&td.constant(target), cond_d, Mode::Train)?;
        let d_vae = self.model.discriminate(&td.constant(fake_vae.value()), cond_d, Mode::Train)?;
        let d_clr = self.model.discriminate(&td.constant(fake_clr.value()), cond_d, Mode::Train)?;
        let l_d = hinge_d(&d_real, &d_vae)?.add(&hinge_d(&d_real, &d_clr)?)?;
        let l_d_value = l_d.item() as f64;
        if !l_d_value.is_finite() {
            return Err(Error::NonFinite(format!("loss term l_d at step {}", self.step)));
        }
        td.backward(&l_d)?;
        let g_before = snapshot(&self.model.generator_params());
        let gd = grads(&td, &self.model.disc_params());
        adam_step(
            &mut self.model.disc_params_mut(),
            &gd,
            &mut self.adam_d,
            &AdamConfig::with_lr(cfg.lr_d),
        )?;
        let mut isolated = g_before == snapshot(&self.model.generator_params());

        let cond_g = cfg.conditional_disc.then_some(&vae.log_lum);
        let l_g = hinge_g(&self.model.discriminate(fake_vae, cond_g, Mode::Frozen)?)?
            .add(&hinge_g(&self.model.discriminate(fake_clr, cond_g, Mode::Frozen)?)?)?;
        let l_rec = fake_vae.sub(&real)?.abs()?.mean()?;
        let l_kl = post.kl()?;
        let mu_back = self.model.encode(fake_clr, Mode::Frozen)?.mu;
        let l_z = mu_back.sub(&zp)?.abs()?.mean()?;
        let z_enc_value: Vec<f64> = z_enc.to_vec().iter().map(|v| v.f64()).collect();
        let l_div = diversity_loss(fake_vae, fake_clr, &z_enc_value, &z_prior, w.tau)?;
        let l_tv = tv_loss(&vae.stages.base)?
            .add(&tv_loss(&clr.stages.base)?)?
            .mul_scalar(0.5)?;
        let report = LossReport {
            step: self.step,
            l_g: l_g.item() as f64,
            l_d: l_d_value,
            l_div: l_div.item() as f64,
            l_rec: l_rec.item() as f64,
            l_kl: l_kl.item() as f64,
            l_z: l_z.item() as f64,
            l_tv: l_tv.item() as f64,
            isolated,
        };
        report
            .components()
            .check_finite()
            .map_err(|e| Error::NonFinite(format!("{e} at step {}", self.step)))?;
        let objective = l_g
            .add(&l_rec.mul_scalar(w.lambda_rec)?)?
            .add(&l_kl)?
            .add(&l_z)?
            .sub(&l_div.mul_scalar(w.lambda_div)?)?
            .add(&l_tv.mul_scalar(w.lambda_tv)?)?;
        tg.backward(&objective)?;
        let d_before = snapshot(&self.model.disc_params());
        let gg = grads(&tg, &self.model.generator_params());
        adam_step(
            &mut self.model.generator_params_mut(),
            &gg,
            &mut self.adam_g,
            &AdamConfig::with_lr(cfg.lr_g),
        )?;
        isolated &= d_before == snapshot(&self.model.disc_params());
        self.step += 1;
        Ok(LossReport { isolated, ..report })
    }

    /// Run until `config.steps`, appending each report to the CSV log in
    /// `out_dir` (if given) and checkpointing there.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                let path = d.join("losses.csv");
                let append = self.step > 0 && path.exists();
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(path)?;
                Some(csv::WriterBuilder::new().has_headers(!append).from_writer(file))
            }
            None => None,
        };
        let mut reports = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step()?;
            if let Some(log) = log.as_mut() {
                log.serialize(r).map_err(|e| Error::Io(e.into()))?;
                log.flush()?;
            }
            on_step(&r);
            reports.push(r);
            let every = self.config.checkpoint_every;
            if let Some(d) = out_dir {
                if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                    self.save_checkpoint(d)?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.save_checkpoint(d)?;
        }
        Ok(reports)
    }

    /// Model container (with manifest), a readable manifest copy, and the
    /// optimizer/data-stream state.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.model.save(dir.join(MODEL_FILE))?;
        fs::write(dir.join(MANIFEST_FILE), self.model.config.to_toml())?;
        let mut c = WeightContainer::new();
        for (tag, st) in [("g", &self.adam_g), ("d", &self.adam_d)] {
            c.metadata.insert(format!("{tag}.step"), st.step.to_string());
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                c.insert(format!("{tag}.m.{i}"), &Tensor::new([m.len()], m.clone())?)?;
                c.insert(format!("{tag}.v.{i}"), &Tensor::new([v.len()], v.clone())?)?;
            }
        }
        c.metadata.insert("step".into(), self.step.to_string());
        c.metadata.insert("rng.word_pos".into(), self.rng.get_word_pos().to_string());
        c.save(dir.join(OPTIM_FILE))
    }

    /// Continue a run from a checkpoint written by [`Trainer::save_checkpoint`]
    /// with the same config and data.
    pub fn resume(config: TrainConfig, pairs: Vec<TrainingPair>, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = Self::new(config, pairs)?;
        let model = Model::load(dir.join(MODEL_FILE))?;
        if model.config != t.config.net() {
            return Err(Error::Weights(format!(
                "checkpoint architecture {:?} differs from config {:?}",
                model.config,
                t.config.net()
            )));
        }
        t.model = model;
        let c = WeightContainer::load(dir.join(OPTIM_FILE))?;
        let meta = |k: &str| -> Result<String> {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Weights(format!("optimizer state lacks {k:?}")))
        };
        let num = |k: &str| -> Result<u128> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Weights(format!("optimizer state field {k:?} is not a number")))
        };
        for (tag, st) in [("g", &mut t.adam_g), ("d", &mut t.adam_d)] {
            st.step = num(&format!("{tag}.step"))? as u64;
            for i in 0..st.m.len() {
                let n = st.m[i].len();
                st.m[i] = c.tensor::<f32>(&format!("{tag}.m.{i}"), &[n])?.into_data();
                st.v[i] = c.tensor::<f32>(&format!("{tag}.v.{i}"), &[n])?.into_data();
            }
        }
        t.step = num("step")? as usize;
        t.rng.set_word_pos(num("rng.word_pos")?);
        Ok(t)
    }

    /// [`diversity_probe`] over the distinct training images.
    pub fn diversity_probe(&self, pairs: usize, seed: u64) -> Result<f64> {
        let mut hdrs: Vec<&HdrImage> = Vec::new();
        for p in &self.pairs {
            if hdrs.last().is_none_or(|h| *h != &p.hdr) {
                hdrs.push(&p.hdr);
            }
        }
        diversity_probe(&self.model, &hdrs, self.config.patch, pairs, seed)
    }
}

/// Mean L1 distance between clamped outputs for `pairs` random latent pairs,
/// averaged over the images (each center-cropped to at most `patch`).
pub fn diversity_probe<T: Real>(
    model: &Model<T>,
    hdrs: &[&HdrImage],
    patch: usize,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if hdrs.is_empty() || pairs == 0 {
        return Err(Error::contract("diversity probe needs images and latent pairs"));
    }
    let preps = hdrs
        .iter()
        .map(|h| {
            let (w, ht) = (patch.min(h.width()), patch.min(h.height()));
            Prepared::new(&h.crop((h.width() - w) / 2, (h.height() - ht) / 2, w, ht)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = model.config.d_z;
    let mut total = 0.0;
    for _ in 0..pairs {
        let (za, zb) = (sample_latent(&mut rng, d_z), sample_latent(&mut rng, d_z));
        for prep in &preps {
            let tape = Tape::<T>::new();
            let oa = model.generate(prep, &latent_const(&tape, &za)?, Mode::Frozen)?.stages.ldr;
            let ob = model.generate(prep, &latent_const(&tape, &zb)?, Mode::Frozen)?.stages.ldr;
            total += oa.sub(&ob)?.abs()?.mean()?.item().f64();
        }
    }
    Ok(total / (pairs * preps.len()) as f64)
}
