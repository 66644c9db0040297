use proptest::prelude::*;
use tonescope::latentopt::*;
use tonescope::networks::{Model, NetConfig};
use tonescope::synth::{self, Scene};
use tonescope::tmqi::TmqiScore;
use tonescope::Error;

fn small_model(seed: u64) -> Model<f64> {
    let cfg = NetConfig {
        channels: 4,
        levels: 2,
        ..NetConfig::default()
    };
    Model::<f32>::new(cfg, seed).unwrap().cast()
}

fn objective(scene: usize) -> Objective {
    Objective::new(&synth::render(Scene::ALL[scene], 32, 28, 11)).unwrap()
}

fn config(iters: usize) -> LatentConfig {
    LatentConfig {
        iters,
        ..LatentConfig::default()
    }
}

#[test]
fn zero_iterations_return_the_start() {
    let (m, obj) = (small_model(1), objective(0));
    let z0 = sweep_starts(1, 8, 3).pop().unwrap();
    let run = optimize_latent(&m, &obj, &z0, &config(0)).unwrap();
    assert_eq!(run.trajectory.len(), 1);
    assert_eq!(run.z_star(), &z0[..]);
    assert_eq!(run.last().score, obj.score(&m, &z0).unwrap());
    assert!(run.aborted.is_none());
}

#[test]
fn runs_are_deterministic_and_leave_weights_alone() {
    let f32_model = Model::<f32>::new(
        NetConfig {
            channels: 4,
            levels: 2,
            ..NetConfig::default()
        },
        2,
    )
    .unwrap();
    let before = weights_digest(&f32_model);
    let m = f32_model.cast::<f64>();
    let before64 = weights_digest(&m);
    let obj = objective(1);
    let z0 = sweep_starts(1, 8, 4).pop().unwrap();
    let a = optimize_latent(&m, &obj, &z0, &config(6)).unwrap();
    let b = optimize_latent(&m, &obj, &z0, &config(6)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trajectory.len(), 7);
    assert!(a.trajectory.iter().all(|s| s.score.q.is_finite() && (0.0..=1.0).contains(&s.score.q)));
    assert_eq!(weights_digest(&m), before64);
    assert_eq!(weights_digest(&f32_model), before);
}

#[test]
fn wrong_latent_length_is_a_contract_error() {
    let (m, obj) = (small_model(1), objective(0));
    let err = optimize_latent(&m, &obj, &[0.0; 3], &config(2)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(err.to_string().contains("d_z = 8"), "{err}");
    assert!(optimize_latent(&m, &obj, &[f64::NAN; 8], &config(2)).is_err());
}

#[test]
fn divergence_aborts_with_the_trajectory_so_far() {
    let (m, obj) = (small_model(3), objective(2));
    let mut cfg = config(5);
    cfg.adam.lr = 1e308;
    let run = optimize_latent(&m, &obj, &[0.1; 8], &cfg).unwrap();
    assert!(run.aborted.is_some(), "{run:?}");
    assert!(!run.trajectory.is_empty() && run.trajectory.len() < 6);
    assert!(run.trajectory.iter().all(|s| s.score.q.is_finite()));
}

#[test]
fn gradient_is_an_ascent_direction() {
    let (m, obj) = (small_model(4), objective(3));
    let h = 1e-5;
    for z in sweep_starts(3, 8, 21) {
        let (_, g) = obj.score_grad(&m, &z).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        let step = |s: f64| -> f64 {
            let zz: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + s * b / norm).collect();
            obj.score(&m, &zz).unwrap().q
        };
        let fd = (step(h) - step(-h)) / (2.0 * h);
        assert!(fd > 0.0, "finite difference {fd}");
        assert!((fd - norm).abs() / norm < 1e-3, "fd {fd} vs |g| {norm}");
        assert!(step(1e-4) > obj.score(&m, &z).unwrap().q);
    }
}

#[test]
fn sweep_with_one_start_gives_one_candidate() {
    let (m, obj) = (small_model(5), objective(4));
    let c = candidate_sweep(&m, &obj, 1, &config(3)).unwrap();
    assert_eq!(c.len(), 1);
    assert!(candidate_sweep(&m, &obj, 0, &config(3)).is_err());
}

#[test]
fn sweep_is_ranked_deterministic_and_bounded() {
    let (m, obj) = (small_model(6), objective(0));
    let a = candidate_sweep(&m, &obj, 4, &config(4)).unwrap();
    let b = candidate_sweep(&m, &obj, 4, &config(4)).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 4);
    assert!(a.windows(2).all(|w| w[0].score.q >= w[1].score.q));
    let text = report(&a);
    let rows: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), a.len());
    assert!(rows[0].starts_with("1 "));
    assert_eq!(rows[0].split(' ').count(), 6);
}

fn cand(z: Vec<f64>, q: f64) -> Candidate {
    Candidate {
        z,
        score: TmqiScore { q, s: q, n: q },
        preview: None,
    }
}

#[test]
fn near_identical_codes_collapse_to_the_better_one() {
    let out = rank_and_dedup(
        vec![cand(vec![0.0; 8], 0.5), cand(vec![0.05; 8], 0.7), cand(vec![1.0; 8], 0.6)],
        0.8,
    );
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].score.q, 0.7);
    assert_eq!(out[1].score.q, 0.6);
}

#[test]
fn ties_break_by_latent_order() {
    let out = rank_and_dedup(vec![cand(vec![2.0, 0.0], 0.5), cand(vec![-1.0, 5.0], 0.5)], 0.1);
    assert_eq!(out[0].z, vec![-1.0, 5.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_matches_an_exhaustive_sort(qs in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let cands: Vec<_> = qs.iter().enumerate().map(|(i, q)| cand(vec![i as f64 * 2.0, 0.0], *q)).collect();
        let out = rank_and_dedup(cands, 0.8);
        let mut sorted = qs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f64> = out.iter().map(|c| c.score.q).collect();
        prop_assert_eq!(got, sorted);
    }

    #[test]
    fn retained_codes_are_separated(zs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..10)) {
        let cands: Vec<_> = zs.iter().enumerate().map(|(i, z)| cand(z.clone(), i as f64 / 10.0)).collect();
        let out = rank_and_dedup(cands, 0.5);
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                let d: f64 = a.z.iter().zip(&b.z).map(|(x, y)| (x - y).abs()).sum();
                prop_assert!(d >= 0.5);
            }
        }
    }
}
