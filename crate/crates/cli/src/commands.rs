use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use tonescope::hdrio::{self, HdrImage, LdrImage};
use tonescope::latentopt::{self, candidate_sweep, LatentConfig, Objective};
use tonescope::networks::{GammaOverride, Model};
use tonescope::pipeline::{self, PipelineParams, PredictedKernels};
use tonescope::tmqi::{self, TmqiConfig, TmqiScore};
use tonescope::training::{self, TrainConfig, Trainer};
use tonescope_client::api::{OptimizeRequest, RenderRequest};
use tonescope_client::{Client, ClientError};

use crate::{LatentArgs, RemoteCommand};

/// Fallback kernel width when no weights are given.
pub const FALLBACK_SIGMA: f64 = 2.0;

#[derive(Debug)]
pub enum Failure {
    /// Unreadable or malformed input, I/O, missing configuration.
    Input(String),
    /// A request that breaks an operation's contract.
    Contract(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Contract(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Contract(m) => f.write_str(m),
        }
    }
}

impl From<tonescope::Error> for Failure {
    fn from(e: tonescope::Error) -> Self {
        if e.is_contract_violation() {
            Failure::Contract(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.status() {
            Some(400) => Failure::Contract(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn read_hdr(path: &Path) -> Result<HdrImage, Failure> {
    hdrio::read_hdr(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_model(weights: Option<&Path>, what: &str) -> Result<Model<f64>, Failure> {
    let path = weights.ok_or_else(|| {
        Failure::Input(format!("{what} needs model weights (--weights or TONESCOPE_WEIGHTS)"))
    })?;
    let m = Model::<f32>::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(m.cast())
}

/// The latent code requested by `--z` / `--z-seed`, zeros if neither.
pub fn latent_code(args: &LatentArgs, d_z: usize) -> Result<Vec<f64>, Failure> {
    let z = match (&args.z, args.z_seed) {
        (Some(text), _) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Failure::Input(format!("--z: cannot parse {s:?} as a number")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(seed)) => latentopt::sweep_starts(1, d_z, seed).remove(0),
        (None, None) => vec![0.0; d_z],
    };
    if z.len() != d_z {
        return Err(Failure::Contract(format!(
            "--z has {} values but the model expects d_z = {d_z}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Failure::Contract("--z values must be finite".into()));
    }
    Ok(z)
}

fn score_or_none(hdr: &HdrImage, ldr: &LdrImage) -> Option<TmqiScore> {
    let cfg = TmqiConfig::fit(hdr.height(), hdr.width()).ok()?;
    tmqi::tmqi_with(hdr, ldr, &cfg).ok()
}

fn print_scores(score: Option<TmqiScore>) {
    match score {
        Some(s) => println!("q {:.6} s {:.6} n {:.6}", s.q, s.s, s.n),
        None => println!("q - s - n - (image too small to score)"),
    }
}

pub fn tonemap(
    input: &Path,
    out: &Path,
    weights: Option<&Path>,
    latent: &LatentArgs,
    srgb: bool,
) -> Result<(), Failure> {
    let hdr = read_hdr(input)?;
    let over = GammaOverride {
        gamma_base: latent.gamma_base,
        gamma_post: latent.gamma_post,
    };
    over.validate()?;
    let (ldr, gb, gp) = match weights {
        None => {
            if latent.z.is_some() || latent.z_seed.is_some() {
                return Err(Failure::Contract(
                    "--z/--z-seed need --weights; the classical fallback has no latent code".into(),
                ));
            }
            let mid = PipelineParams::default();
            let params = PipelineParams::new(
                over.gamma_base.unwrap_or(mid.gamma_base),
                over.gamma_post.unwrap_or(mid.gamma_post),
            );
            let kernels = PredictedKernels::gaussian(hdr.height(), hdr.width(), FALLBACK_SIGMA);
            let ldr = pipeline::tonemap(&hdr, &kernels, &params)?;
            (ldr, params.gamma_base, params.gamma_post)
        }
        Some(_) => {
            let model = load_model(weights, "tonemap")?;
            let z = latent_code(latent, model.config.d_z)?;
            let prep = pipeline::Prepared::new(&hdr)?;
            let tape = tonescope::tensorgrad::Tape::<f64>::new();
            let zv = tape.constant(tonescope::tensorgrad::Tensor::new([1, z.len()], z)?);
            let g = model.generate_with(&prep, &zv, over, tonescope::networks::Mode::Frozen)?;
            (pipeline::diff::to_ldr(&g.stages.ldr)?, g.gamma_base.item(), g.gamma_post.item())
        }
    };
    let image = if srgb { ldr.srgb_encoded() } else { ldr }.quantized();
    hdrio::write_png8(&image, out)?;
    print_scores(score_or_none(&hdr, &image));
    println!("gamma_base {gb:.6} gamma_post {gp:.6}");
    Ok(())
}

pub fn train(config: &Path, resume: bool) -> Result<(), Failure> {
    let cfg = TrainConfig::load(config)?;
    let hdr_dir = cfg
        .paths
        .hdr_dir
        .clone()
        .ok_or_else(|| Failure::Input("config lacks paths.hdr_dir".into()))?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Input("config lacks paths.out_dir".into()))?;
    let pairs = training::build_dataset(&hdr_dir, cfg.top_k)?;
    let mut trainer = if resume {
        Trainer::resume(cfg, pairs, &out_dir)?
    } else {
        Trainer::new(cfg, pairs)?
    };
    let total = trainer.config.steps;
    trainer.run(Some(&out_dir), |r| {
        if (r.step + 1) % 10 == 0 || r.step + 1 == total {
            println!(
                "step {} l_g {:.4} l_d {:.4} l_rec {:.4} l_div {:.5} l_kl {:.5} l_z {:.4} l_tv {:.4}",
                r.step + 1,
                r.l_g,
                r.l_d,
                r.l_rec,
                r.l_div,
                r.l_kl,
                r.l_z,
                r.l_tv
            );
        }
    })?;
    println!("checkpoint written to {}", out_dir.display());
    Ok(())
}

pub fn tmqi(hdr: &Path, ldr: &Path) -> Result<(), Failure> {
    let h = read_hdr(hdr)?;
    let l = hdrio::read_png8(ldr).map_err(|e| Failure::Input(format!("{}: {e}", ldr.display())))?;
    let cfg = TmqiConfig::fit(h.height(), h.width())?;
    let s = tmqi::tmqi_with(&h, &l, &cfg)?;
    println!("{:.6} {:.6} {:.6}", s.q, s.s, s.n);
    Ok(())
}

pub fn explore(
    input: &Path,
    starts: usize,
    out_dir: &Path,
    weights: Option<&Path>,
    iters: usize,
    seed: u64,
    max_edge: usize,
) -> Result<(), Failure> {
    if starts == 0 {
        return Err(Failure::Contract("--starts must be at least 1".into()));
    }
    let model = load_model(weights, "explore")?;
    let hdr = read_hdr(input)?.downscale_to(max_edge.max(1));
    let obj = Objective::new(&hdr)?;
    let cfg = LatentConfig {
        iters,
        seed,
        ..LatentConfig::default()
    };
    let mut cands = candidate_sweep(&model, &obj, starts, &cfg)?;
    fs::create_dir_all(out_dir)?;
    for (i, c) in cands.iter_mut().enumerate() {
        let r = obj.render(&model, &c.z, GammaOverride::default())?;
        let path = out_dir.join(format!("candidate_{}.png", i + 1));
        hdrio::write_png8(&r.image.quantized(), &path)?;
        c.preview = Some(path);
    }
    let report = latentopt::report(&cands);
    fs::write(out_dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn dataset(hdr_dir: &Path, k: usize, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let pairs = training::build_dataset(hdr_dir, k)?;
    let out = out_dir.unwrap_or_else(|| hdr_dir.join("dataset"));
    let manifest = training::write_dataset(&pairs, &out)?;
    println!("{} targets, manifest {}", pairs.len(), manifest.display());
    Ok(())
}

pub fn serve(weights: Option<&Path>, host: &str, port: u16) -> Result<(), Failure> {
    let path = weights.ok_or_else(|| Failure::Input("serve needs model weights (--weights or TONESCOPE_WEIGHTS)".into()))?;
    let state = tonescope_server::AppState::from_weights(path)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| Failure::Input(format!("invalid listen address {host}:{port}")))?;
    eprintln!("serving on http://{addr}");
    tonescope_server::run(addr, state)?;
    Ok(())
}

pub fn remote(url: &str, command: RemoteCommand) -> Result<(), Failure> {
    let client = Client::new(url)?;
    match command {
        RemoteCommand::Health => {
            client.health()?;
            println!("ok");
        }
        RemoteCommand::Render { input, out, latent } => {
            let session = client.create_session(fs::read(&input)?)?;
            let z = latent_code(&latent, session.d_z)?;
            let r = client.render(
                &session.session_id,
                &RenderRequest {
                    z,
                    gamma_base: latent.gamma_base,
                    gamma_post: latent.gamma_post,
                },
            )?;
            fs::write(&out, client.preview(&r.preview_url)?)?;
            println!("q {:.6} s {:.6} n {:.6}", r.q, r.s, r.n);
            println!("gamma_base {:.6} gamma_post {:.6}", r.gamma_base, r.gamma_post);
        }
        RemoteCommand::Optimize {
            input,
            starts,
            iters,
            out_dir,
        } => {
            let session = client.create_session(fs::read(&input)?)?;
            let resp = client.optimize(&session.session_id, OptimizeRequest { starts, iters })?;
            if let Some(d) = &out_dir {
                fs::create_dir_all(d)?;
            }
            println!("# rank q s n z");
            for (i, c) in resp.candidates.iter().enumerate() {
                if let Some(d) = &out_dir {
                    fs::write(d.join(format!("candidate_{}.png", i + 1)), client.preview(&c.preview_url)?)?;
                }
                let z: Vec<String> = c.z.iter().map(|v| format!("{v:.6}")).collect();
                println!("{} {:.6} {:.6} {:.6} {}", i + 1, c.q, c.s, c.n, z.join(","));
            }
        }
    }
    Ok(())
}
