use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonescope::hdrio::{self, HdrImage, LdrImage};
use tonescope::networks::Model;
use tonescope::pipeline::{decompose, PredictedKernels, Prepared};
use tonescope::synth::{self, Scene};
use tonescope::tensorgrad::{Tape, Tensor, Var};
use tonescope::tmqi::{tmqi_with, TmqiConfig};
use tonescope::training::*;
use tonescope::Error;

fn constant(tape: &Tape<f64>, shape: &[usize], v: f64) -> Var<f64> {
    tape.constant(Tensor::full(shape.to_vec(), v))
}

fn plane(tape: &Tape<f64>, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Var<f64> {
    let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
    tape.constant(Tensor::new([1, 1, h, w], data).unwrap())
}

fn toy_images(n: usize, size: usize) -> Vec<(String, HdrImage)> {
    Scene::ALL[..n]
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name().to_string(), synth::render(*s, size, size, 40 + i as u64)))
        .collect()
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        patch: 16,
        steps,
        channels: 4,
        levels: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn hinge_examples() {
    let t = Tape::<f64>::new();
    let s = [1, 1, 2, 2];
    let ones = constant(&t, &s, 1.0);
    let neg = constant(&t, &s, -1.0);
    let zero = constant(&t, &s, 0.0);
    assert_eq!(hinge_d(&ones, &neg).unwrap().item(), 0.0);
    assert_eq!(hinge_d(&zero, &zero).unwrap().item(), 2.0);
    let (g, _) = hinge_losses(&ones, &constant(&t, &s, 0.37)).unwrap();
    assert_eq!(g.item(), -0.37);
    assert!(hinge_d(&constant(&t, &s, 3.0), &constant(&t, &s, -4.0)).unwrap().item() == 0.0);
}

#[test]
fn diversity_examples() {
    let t = Tape::<f64>::new();
    let a = plane(&t, 2, 2, |_, _| 0.3);
    let b = plane(&t, 2, 2, |_, _| 0.4);
    let z1 = [0.0, 0.0];
    let z2 = [0.25, -0.25];
    assert_eq!(diversity_loss(&a, &a, &z1, &z2, 10.0).unwrap().item(), 0.0);

    let brute = (0..4).map(|_| (0.4f64 - 0.3).abs()).sum::<f64>() / 4.0 / 0.5;
    let got = diversity_loss(&a, &b, &z1, &z2, 10.0).unwrap().item();
    assert!((got - brute).abs() < 1e-12, "{got} vs {brute}");

    let clipped = diversity_loss(&a, &b, &z1, &z2, 0.05).unwrap().item();
    assert_eq!(clipped, 0.05);

    let err = diversity_loss(&a, &b, &z1, &z1, 10.0).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert!(diversity_loss(&a, &b, &z1, &[0.0], 10.0).is_err());
}

fn tv_brute(img: &[f64], h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = img[y * w + x];
            let dx = if x + 1 < w { img[y * w + x + 1] - v } else { 0.0 };
            let dy = if y + 1 < h { img[(y + 1) * w + x] - v } else { 0.0 };
            sum += (dx * dx + dy * dy).sqrt();
        }
    }
    sum / (h * w) as f64
}

#[test]
fn tv_examples() {
    let t = Tape::<f64>::new();
    assert_eq!(tv_loss(&plane(&t, 5, 5, |_, _| 0.7)).unwrap().item(), 0.0);

    let (n, s) = (6, 0.3);
    let ramp = plane(&t, n, n, |_, x| s * x as f64);
    let got = tv_loss(&ramp).unwrap().item();
    assert!((got - tv_brute(&ramp.to_vec(), n, n)).abs() < 1e-12);
    assert!((got - s * (n - 1) as f64 / n as f64).abs() < 1e-12);

    let edge = plane(&t, 5, 7, |y, x| if x >= 3 && y >= 2 { 1.0 } else { 0.0 });
    let got = tv_loss(&edge).unwrap().item();
    assert!((got - tv_brute(&edge.to_vec(), 5, 7)).abs() < 1e-12);
}

#[test]
fn total_objective_examples() {
    let w = LossWeights::default();
    assert_eq!(Components::default().total(&w).unwrap(), 0.0);
    let c = Components {
        l_g: 1.0,
        l_d: 2.0,
        l_div: 0.5,
        l_rec: 0.1,
        l_kl: 0.2,
        l_z: 0.3,
        l_tv: 0.4,
    };
    assert!((c.total(&w).unwrap() - 1.5).abs() < 1e-12);

    let no_div = LossWeights { lambda_div: 0.0, ..w };
    let base = Components { l_div: 0.0, ..c };
    assert_eq!(c.total(&no_div).unwrap(), base.total(&no_div).unwrap());

    let more = Components { l_div: 0.6, ..c };
    assert!(more.total(&w).unwrap() < c.total(&w).unwrap());

    let bad = Components { l_kl: f64::NAN, ..c };
    assert!(bad.total(&w).unwrap_err().to_string().contains("l_kl"));
    assert!(LossWeights { lambda_rec: -1.0, ..w }.validate().is_err());
}

#[test]
fn training_is_deterministic() {
    let pairs = build_pairs(toy_images(2, 24), 1).unwrap();
    let run = || {
        let mut t = Trainer::new(small_config(4), pairs.clone()).unwrap();
        let r = t.run(None, |_| {}).unwrap();
        (r, t.model.to_container().unwrap().to_bytes())
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert!(a.iter().all(|r| r.isolated && r.components().check_finite().is_ok()));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let pairs = build_pairs(toy_images(2, 24), 1).unwrap();
    let mut full = Trainer::new(small_config(5), pairs.clone()).unwrap();
    let straight = full.run(None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(small_config(2), pairs.clone()).unwrap();
    first.run(Some(dir.path()), |_| {}).unwrap();
    let mut second = Trainer::resume(small_config(5), pairs, dir.path()).unwrap();
    let rest = second.run(Some(dir.path()), |_| {}).unwrap();

    assert_eq!(&straight[2..], &rest[..]);
    assert_eq!(
        full.model.to_container().unwrap().to_bytes(),
        second.model.to_container().unwrap().to_bytes()
    );
    let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "step,l_g,l_d,l_div,l_rec,l_kl,l_z,l_tv");
    assert_eq!(lines.len(), 6);
    let steps: Vec<usize> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    assert!(Model::<f32>::load(dir.path().join("model.tsw")).is_ok());
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn training_rejects_patch_larger_than_image() {
    let pairs = build_pairs(toy_images(1, 12), 1).unwrap();
    let mut t = Trainer::new(small_config(1), pairs).unwrap();
    let err = t.train_step().unwrap_err().to_string();
    assert!(err.contains("patch"), "{err}");
}

#[test]
fn dataset_selection_matches_exhaustive_sort() {
    let (name, hdr) = toy_images(3, 40).pop().unwrap();
    let cfg = TmqiConfig::fit(hdr.height(), hdr.width()).unwrap();
    let mut scored: Vec<_> = Classical::ALL
        .iter()
        .map(|op| (op.name(), tmqi_with(&hdr, &op.apply(&hdr).unwrap(), &cfg).unwrap().q))
        .collect();
    let mut qs: Vec<f64> = scored.iter().map(|s| s.1).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    assert_eq!(qs.len(), scored.len(), "scores not strictly ordered");
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));

    let ranked: Vec<_> = rank_candidates(&hdr).unwrap().iter().map(|c| c.0.name()).collect();
    let expected: Vec<_> = scored.iter().map(|s| s.0.clone()).collect();
    assert_eq!(ranked, expected);

    let top = build_pairs(vec![(name.clone(), hdr.clone())], 1).unwrap();
    assert_eq!(top.len(), 1);
    assert_eq!(top[0].operator, expected[0]);

    let all = build_pairs(vec![(name, hdr)], 20).unwrap();
    assert_eq!(all.len(), Classical::ALL.len());
    assert!(all.windows(2).all(|w| w[0].score.q >= w[1].score.q));
}

#[test]
fn dataset_directory_skips_unreadable_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_dataset(dir.path(), 2).is_err());
    std::fs::write(dir.path().join("broken.hdr"), b"not an image").unwrap();
    assert!(build_dataset(dir.path(), 2).is_err());
    for (name, img) in toy_images(2, 24) {
        hdrio::write_hdr(&img, dir.path().join(format!("{name}.hdr"))).unwrap();
    }
    let pairs = build_dataset(dir.path(), 2).unwrap();
    assert_eq!(pairs.len(), 4);

    let out = tempfile::tempdir().unwrap();
    let manifest = std::fs::read_to_string(write_dataset(&pairs, out.path()).unwrap()).unwrap();
    let rows: Vec<Vec<&str>> = manifest
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[1]).collect::<Vec<_>>(), ["1", "2", "1", "2"]);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert!(out.path().join(r[3]).exists());
    }
}

#[test]
fn augmentation_keeps_hdr_and_target_aligned() {
    let hdr = synth::render(Scene::ALL[1], 30, 22, 3);
    let lum = hdrio::luminance(&hdr).unwrap();
    let pointwise = |h: &HdrImage| {
        let l = hdrio::luminance(h).unwrap();
        let mut data = Vec::new();
        for (p, px) in h.data().chunks_exact(3).enumerate() {
            let t = l.data[p] / (1.0 + l.data[p]);
            for c in px {
                data.push(((c / l.data[p]).powf(0.6) * t).clamp(0.0, 1.0));
            }
        }
        LdrImage::new(h.width(), h.height(), data).unwrap()
    };
    assert_eq!(lum.data.len(), 30 * 22);
    let pair = TrainingPair {
        name: "x".into(),
        target: pointwise(&hdr),
        hdr,
        operator: "pointwise".into(),
        score: tonescope::tmqi::TmqiScore { q: 0.0, s: 0.0, n: 0.0 },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let aug = augment(&pair, 12, &mut rng).unwrap();
        assert_eq!(aug.target, pointwise(&aug.hdr));
        let prep = Prepared::new(&aug.hdr).unwrap();
        let d = decompose(&PredictedKernels::delta(12, 12), &prep.log_lum).unwrap();
        assert_eq!(d.base, prep.log_lum.data);
        assert!(d.detail.iter().all(|v| *v == 0.0));
    }
    let err = augment(&pair, 23, &mut rng).unwrap_err().to_string();
    assert!(err.contains("smaller patch") || err.contains("lower `patch`"), "{err}");
}

#[test]
fn crop_offsets_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(16..80), rng.random_range(16..80));
        let patch = rng.random_range(1..=w.min(h));
        let a = Augmentation::draw(&mut rng, w, h, patch).unwrap();
        assert!(a.x0 + patch <= w && a.y0 + patch <= h);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flip_is_an_involution(w in 1usize..9, h in 1usize..9, seed in 0u64..500, horizontal: bool) {
        let hdr = synth::render(Scene::ALL[(seed % 5) as usize], w, h, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = LdrImage::new(w, h, (0..3 * w * h).map(|_| rng.random()).collect()).unwrap();
        let pair = TrainingPair {
            name: "p".into(),
            hdr,
            target,
            operator: "none".into(),
            score: tonescope::tmqi::TmqiScore { q: 0.0, s: 0.0, n: 0.0 },
        };
        let back = flip_pair(&flip_pair(&pair, horizontal).unwrap(), horizontal).unwrap();
        prop_assert_eq!(back.hdr, pair.hdr);
        prop_assert_eq!(back.target, pair.target);
    }

    #[test]
    fn diversity_stays_in_clip_range(a in 0.0f64..1.0, b in 0.0f64..1.0, dz in 1e-6f64..2.0, tau in 0.0f64..20.0) {
        let t = Tape::<f64>::new();
        let x = plane(&t, 2, 3, |y, _| a * y as f64);
        let y = plane(&t, 2, 3, |_, c| b * c as f64);
        let v = diversity_loss(&x, &y, &[0.0, 0.0], &[dz, 0.0], tau).unwrap().item();
        prop_assert!((0.0..=tau).contains(&v));
    }
}

#[test]
fn desk_smoke_run() {
    let pairs = build_pairs(toy_images(4, 96), 1).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let mut t = Trainer::new(cfg, pairs).unwrap();
    let reports = t.run(None, |_| {}).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(reports.len(), 200);
    assert!(reports.iter().all(|r| r.components().check_finite().is_ok()));
    assert!(reports.iter().all(|r| r.isolated));
    let mean = |rs: &[LossReport]| rs.iter().map(|r| r.l_rec).sum::<f64>() / rs.len() as f64;
    let (first, last) = (mean(&reports[..10]), mean(&reports[190..]));
    assert!(last <= 0.8 * first, "l_rec {first} -> {last}");
    assert!(elapsed.as_secs() < 15 * 60);
    let probe = t.diversity_probe(5, 1).unwrap();
    assert!(probe.is_finite() && probe > 0.0);
    println!("smoke: l_rec {first:.4} -> {last:.4}, diversity probe {probe:.3e}, {elapsed:?}");
}
