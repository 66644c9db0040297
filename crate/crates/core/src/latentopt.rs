//! Gradient ascent on TMQI over the latent code of a frozen model.

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdrio::{HdrImage, LdrImage};
use crate::networks::{sample_latent, GammaOverride, Generated, Mode, Model};
use crate::pipeline::{diff, Prepared};
use crate::tensorgrad::{adam_step, AdamConfig, AdamState, Parameter, Real, Tape, Tensor};
use crate::tmqi::{score_var, HdrReference, TmqiConfig, TmqiScore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub iters: usize,
    pub adam: AdamConfig,
    /// Seed for the random starts of a sweep.
    pub seed: u64,
    /// L1 radius under which two codes count as the same candidate;
    /// `None` means `0.1 * d_z`.
    pub dedup_radius: Option<f64>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            iters: 30,
            adam: AdamConfig::with_lr(0.05),
            seed: 0,
            dedup_radius: None,
        }
    }
}

/// Everything about one HDR image the objective needs, computed once.
#[derive(Clone, Debug)]
pub struct Objective {
    pub prep: Prepared,
    pub reference: HdrReference,
    pub tmqi: TmqiConfig,
}

impl Objective {
    pub fn new(hdr: &HdrImage) -> Result<Self> {
        Ok(Self {
            prep: Prepared::new(hdr)?,
            reference: HdrReference::new(hdr)?,
            tmqi: TmqiConfig::fit(hdr.height(), hdr.width())?,
        })
    }

    fn check(&self, model: &Model<f64>, z: &[f64]) -> Result<()> {
        if z.len() != model.config.d_z {
            return Err(Error::contract(format!(
                "latent code has {} entries, the model expects d_z = {}",
                z.len(),
                model.config.d_z
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent code is not finite"));
        }
        Ok(())
    }

    fn forward(&self, model: &Model<f64>, tape: &Tape<f64>, z: &[f64]) -> Result<Generated<f64>> {
        self.check(model, z)?;
        let zv = tape.constant(Tensor::new([1, z.len()], z.to_vec())?);
        model.generate(&self.prep, &zv, Mode::Frozen)
    }

    pub fn score(&self, model: &Model<f64>, z: &[f64]) -> Result<TmqiScore> {
        let tape = Tape::new();
        let g = self.forward(model, &tape, z)?;
        Ok(score_var(&self.reference, &g.stages.ldr, &self.tmqi)?.values())
    }

    /// Score and `dq/dz`.
    pub fn score_grad(&self, model: &Model<f64>, z: &[f64]) -> Result<(TmqiScore, Vec<f64>)> {
        self.check(model, z)?;
        let tape = Tape::new();
        let zv = tape.var(Tensor::new([1, z.len()], z.to_vec())?);
        let g = model.generate(&self.prep, &zv, Mode::Frozen)?;
        let sv = score_var(&self.reference, &g.stages.ldr, &self.tmqi)?;
        let score = sv.values();
        if !score.q.is_finite() {
            return Ok((score, vec![f64::NAN; z.len()]));
        }
        tape.backward(&sv.q)?;
        let grad = zv.grad().map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; z.len()]);
        Ok((score, grad))
    }

    /// Clamped output image and the gammas used for it.
    pub fn render(&self, model: &Model<f64>, z: &[f64], over: GammaOverride) -> Result<Rendered> {
        self.check(model, z)?;
        let tape = Tape::new();
        let zv = tape.constant(Tensor::new([1, z.len()], z.to_vec())?);
        let g = model.generate_with(&self.prep, &zv, over, Mode::Frozen)?;
        Ok(Rendered {
            image: diff::to_ldr(&g.stages.ldr)?,
            gamma_base: g.gamma_base.item(),
            gamma_post: g.gamma_post.item(),
        })
    }

    /// Score of a finished image (e.g. after 8-bit quantization).
    pub fn score_image(&self, ldr: &LdrImage) -> Result<TmqiScore> {
        if (ldr.width(), ldr.height()) != (self.prep.width, self.prep.height) {
            return Err(Error::Shape {
                op: "score_image",
                lhs: vec![self.prep.height, self.prep.width],
                rhs: vec![ldr.height(), ldr.width()],
            });
        }
        let tape = Tape::<f64>::new();
        Ok(score_var(&self.reference, &tape.constant(diff::ldr_tensor(ldr)), &self.tmqi)?.values())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: LdrImage,
    pub gamma_base: f64,
    pub gamma_post: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptStep {
    pub z: Vec<f64>,
    pub score: TmqiScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptRun {
    pub z0: Vec<f64>,
    pub config: LatentConfig,
    /// `(z_t, q_t)` for `t = 0..=iters`, shorter if aborted.
    pub trajectory: Vec<OptStep>,
    /// Set when a non-finite score stopped the run early.
    pub aborted: Option<String>,
}

impl OptRun {
    pub fn last(&self) -> &OptStep {
        self.trajectory.last().expect("trajectory holds at least z0")
    }

    pub fn z_star(&self) -> &[f64] {
        &self.last().z
    }

    pub fn gain(&self) -> f64 {
        self.last().score.q - self.trajectory[0].score.q
    }
}

/// Digest of every weight bit, for checking that a search left the model
/// untouched.
pub fn weights_digest<T: Real>(model: &Model<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in model.params() {
        p.name().hash(&mut h);
        for v in p.tensor.data() {
            v.f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Adam ascent on `q(z)` from `z0` for `config.iters` steps.
pub fn optimize_latent(model: &Model<f64>, obj: &Objective, z0: &[f64], config: &LatentConfig) -> Result<OptRun> {
    obj.check(model, z0)?;
    let mut z = Parameter::new("z", Tensor::new([z0.len()], z0.to_vec())?);
    let mut adam = AdamState::new([&z]);
    let mut run = OptRun {
        z0: z0.to_vec(),
        config: *config,
        trajectory: Vec::with_capacity(config.iters + 1),
        aborted: None,
    };
    for t in 0..=config.iters {
        let zt = z.tensor.data().to_vec();
        if zt.iter().any(|v| !v.is_finite()) {
            run.aborted = Some(format!("latent code diverged at iteration {t}"));
            break;
        }
        let step = if t < config.iters {
            obj.score_grad(model, &zt)
        } else {
            obj.score(model, &zt).map(|s| (s, Vec::new()))
        };
        let (score, grad) = match step {
            Ok(v) => v,
            Err(Error::NonFinite(msg)) => {
                run.aborted = Some(format!("iteration {t}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if !(score.q.is_finite() && score.s.is_finite() && score.n.is_finite()) {
            run.aborted = Some(format!("non-finite score at iteration {t}: {score:?}"));
            break;
        }
        run.trajectory.push(OptStep { z: zt, score });
        if t == config.iters {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            run.aborted = Some(format!("non-finite gradient at iteration {t}"));
            break;
        }
        let descent = Tensor::new([grad.len()], grad.iter().map(|g| -g).collect())?;
        adam_step(&mut [&mut z], &[Some(descent)], &mut adam, &config.adam)?;
    }
    if run.trajectory.is_empty() {
        return Err(Error::NonFinite(run.aborted.take().unwrap_or_default()));
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub z: Vec<f64>,
    pub score: TmqiScore,
    pub preview: Option<PathBuf>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Sort by `q` descending (ties by `z` lexicographic) and drop every code
/// within `radius` (L1) of a better one.
pub fn rank_and_dedup(mut cands: Vec<Candidate>, radius: f64) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.score.q.total_cmp(&a.score.q).then_with(|| lex(&a.z, &b.z)));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| l1(&k.z, &c.z) >= radius) {
            kept.push(c);
        }
    }
    kept
}

/// Random starts drawn from `config.seed`.
pub fn sweep_starts(n: usize, d_z: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_latent(&mut rng, d_z)).collect()
}

/// `n` independent searches in parallel, ranked and deduplicated. Aborted
/// runs contribute their last finite step.
pub fn candidate_sweep(model: &Model<f64>, obj: &Objective, n: usize, config: &LatentConfig) -> Result<Vec<Candidate>> {
    if n == 0 {
        return Err(Error::contract("candidate sweep needs at least one start"));
    }
    let d_z = model.config.d_z;
    let runs = sweep_starts(n, d_z, config.seed)
        .par_iter()
        .map(|z0| optimize_latent(model, obj, z0, config))
        .collect::<Result<Vec<_>>>()?;
    let cands = runs
        .into_iter()
        .map(|r| Candidate {
            z: r.z_star().to_vec(),
            score: r.last().score,
            preview: None,
        })
        .collect();
    Ok(rank_and_dedup(cands, config.dedup_radius.unwrap_or(0.1 * d_z as f64)))
}

/// Text report, one candidate per line.
pub fn report(cands: &[Candidate]) -> String {
    let mut out = String::from("# rank q s n preview z\n");
    for (i, c) in cands.iter().enumerate() {
        let preview = c.preview.as_ref().map_or("-".into(), |p| p.display().to_string());
        let z: Vec<String> = c.z.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {} {}",
            i + 1,
            c.score.q,
            c.score.s,
            c.score.n,
            preview,
            z.join(",")
        );
    }
    out
}
