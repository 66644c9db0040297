use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tonescope::hdrio::{read_png8, write_hdr};
use tonescope::networks::{Model, NetConfig};
use tonescope::synth::{self, Scene};
use tonescope_server::{spawn_local, AppState};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/tmqi");

fn fixture(name: &str) -> PathBuf {
    Path::new(FIXTURES).join(name)
}

fn tonescope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tonescope"))
        .args(args)
        .env_remove("TONESCOPE_WEIGHTS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tonescope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_weights(dir: &Path) -> PathBuf {
    let cfg = NetConfig {
        channels: 4,
        levels: 2,
        ..NetConfig::default()
    };
    let path = dir.join("model.tsw");
    Model::<f32>::new(cfg, 9).unwrap().save(&path).unwrap();
    path
}

fn small_hdr(dir: &Path, w: usize, h: usize) -> PathBuf {
    let path = dir.join(format!("scene_{w}x{h}.hdr"));
    write_hdr(&synth::render(Scene::ALL[2], w, h, 4), &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fallback_tonemap_writes_rgb_png_of_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.png");
    let stdout = ok(&["tonemap", "--in", s(&fixture("sunset.hdr")), "--out", s(&out)]);
    let img = read_png8(&out).unwrap();
    assert_eq!((img.width(), img.height()), (192, 192));
    assert!(stdout.starts_with("q "), "{stdout}");
    assert!(stdout.contains("gamma_base 1.800000 gamma_post 2.700000"));

    let srgb = dir.path().join("srgb.png");
    ok(&["tonemap", "--in", s(&fixture("sunset.hdr")), "--out", s(&srgb), "--srgb"]);
    assert_ne!(fs::read(&out).unwrap(), fs::read(&srgb).unwrap());
}

#[test]
fn same_seed_gives_identical_png() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_weights(dir.path());
    let hdr = small_hdr(dir.path(), 40, 30);
    let (a, b, c) = (dir.path().join("a.png"), dir.path().join("b.png"), dir.path().join("c.png"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["tonemap", "--in", s(&hdr), "--out", s(out), "--weights", s(&w), "--z-seed", seed]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let z = dir.path().join("z.png");
    ok(&["tonemap", "--in", s(&hdr), "--out", s(&z), "--weights", s(&w), "--z", "0.5,-1,0,0,0,0,0,2"]);
    assert!(z.exists());
}

#[test]
fn weights_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_weights(dir.path());
    let hdr = small_hdr(dir.path(), 24, 24);
    let out = Command::new(env!("CARGO_BIN_EXE_tonescope"))
        .args(["tonemap", "--in", s(&hdr), "--out", s(&dir.path().join("e.png")), "--z-seed", "1"])
        .env("TONESCOPE_WEIGHTS", &w)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_weights(dir.path());
    let hdr = small_hdr(dir.path(), 24, 24);
    let out = dir.path().join("o.png");

    let r = tonescope(&["tonemap", "--in", s(&hdr), "--out", s(&out), "--weights", s(&w), "--z", "1,2,3"]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("d_z = 8"));

    let r = tonescope(&["tonemap", "--in", s(&hdr), "--out", s(&out), "--z-seed", "1"]);
    assert_eq!(code(&r), 3);
    let r = tonescope(&["tonemap", "--in", s(&hdr), "--out", s(&out), "--gamma-post", "9"]);
    assert_eq!(code(&r), 3);

    let r = tonescope(&["tonemap", "--in", s(&hdr), "--out", s(&out), "--weights", s(&w), "--z", "1,x"]);
    assert_eq!(code(&r), 2);
    let r = tonescope(&["tonemap", "--in", s(&dir.path().join("missing.hdr")), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    let junk = dir.path().join("junk.hdr");
    fs::write(&junk, b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 2\n\x01").unwrap();
    assert_eq!(code(&tonescope(&["tonemap", "--in", s(&junk), "--out", s(&out)])), 2);
    let bad_w = dir.path().join("bad.tsw");
    fs::write(&bad_w, b"nope").unwrap();
    let r = tonescope(&["tonemap", "--in", s(&hdr), "--out", s(&out), "--weights", s(&bad_w)]);
    assert_eq!(code(&r), 2);
    assert_eq!(code(&tonescope(&["tonemap", "--in", s(&hdr)])), 2);
    assert_eq!(code(&tonescope(&["serve", "--weights", s(&bad_w)])), 2);
    assert_eq!(code(&tonescope(&["explore", "--in", s(&hdr), "--out-dir", s(dir.path())])), 2);
}

#[test]
fn tmqi_prints_the_library_score() {
    for name in ["window", "sunset", "lamps"] {
        let (hdr, ldr) = (fixture(&format!("{name}.hdr")), fixture(&format!("{name}.png")));
        let out = ok(&["tmqi", "--hdr", s(&hdr), "--ldr", s(&ldr)]);
        let got: Vec<f64> = out.split_whitespace().map(|v| v.parse().unwrap()).collect();
        let h = tonescope::hdrio::read_hdr(&hdr).unwrap();
        let want = tonescope::tmqi::tmqi(&h, &read_png8(&ldr).unwrap()).unwrap();
        for (g, w) in got.iter().zip([want.q, want.s, want.n]) {
            assert!((g - w).abs() <= 1e-6, "{name}: {got:?} vs {want:?}");
        }
        assert!(out.trim().split(' ').all(|v| v.split('.').nth(1).unwrap().len() == 6));
    }
}

#[test]
fn explore_writes_ranked_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_weights(dir.path());
    let hdr = small_hdr(dir.path(), 36, 32);
    let out_dir = dir.path().join("explore");
    ok(&[
        "explore", "--in", s(&hdr), "--starts", "3", "--out-dir", s(&out_dir), "--weights", s(&w), "--iters", "4",
    ]);
    let pngs = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!((1..=3).contains(&pngs));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    let rows: Vec<Vec<&str>> = report
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').collect())
        .collect();
    assert_eq!(rows.len(), pngs);
    let qs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(qs.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows.iter().all(|r| Path::new(r[4]).exists() && r[5].split(',').count() == 8));
}

fn toy_dir(dir: &Path) -> PathBuf {
    let hdr_dir = dir.join("hdr");
    fs::create_dir_all(&hdr_dir).unwrap();
    for (i, scene) in Scene::ALL[..4].iter().enumerate() {
        write_hdr(&synth::render(*scene, 96, 96, 40 + i as u64), hdr_dir.join(format!("{}.hdr", scene.name()))).unwrap();
    }
    hdr_dir
}

#[test]
fn train_fifty_steps_writes_loadable_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let hdr_dir = toy_dir(dir.path());
    let out_dir = dir.path().join("run");
    let config = dir.path().join("train.toml");
    fs::write(
        &config,
        format!(
            "steps = 50\ntop_k = 1\n[paths]\nhdr_dir = {:?}\nout_dir = {:?}\n",
            s(&hdr_dir),
            s(&out_dir)
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&config)]);
    assert!(Model::<f32>::load(out_dir.join("model.tsw")).is_ok());
    let csv = fs::read_to_string(out_dir.join("losses.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 50);
    for row in rows {
        assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{row}");
    }

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "stepz = 3").unwrap();
    assert_eq!(code(&tonescope(&["train", "--config", s(&bad)])), 2);
}

#[test]
fn dataset_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let hdr_dir = toy_dir(dir.path());
    let out = dir.path().join("targets");
    ok(&["dataset", "--hdr-dir", s(&hdr_dir), "--k", "2", "--out-dir", s(&out)]);
    let manifest = fs::read_to_string(out.join("pairs.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 8);
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&tonescope(&["dataset", "--hdr-dir", s(&empty)])), 2);
}

#[test]
fn remote_render_agrees_with_local_full_resolution_score() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_weights(dir.path());
    let url = spawn_local(AppState::from_weights(&w).unwrap()).unwrap();
    let hdr = small_hdr(dir.path(), 640, 400);

    assert_eq!(ok(&["remote", "--url", &url, "health"]).trim(), "ok");
    let preview = dir.path().join("remote.png");
    let remote = ok(&["remote", "--url", &url, "render", "--in", s(&hdr), "--out", s(&preview), "--z-seed", "2"]);
    let img = read_png8(&preview).unwrap();
    assert_eq!((img.width(), img.height()), (512, 320));

    let full = dir.path().join("full.png");
    ok(&["tonemap", "--in", s(&hdr), "--out", s(&full), "--weights", s(&w), "--z-seed", "2"]);
    let local = ok(&["tmqi", "--hdr", s(&hdr), "--ldr", s(&full)]);
    let q_remote: f64 = remote.split_whitespace().nth(1).unwrap().parse().unwrap();
    let q_local: f64 = local.split_whitespace().next().unwrap().parse().unwrap();
    assert!((q_remote - q_local).abs() <= 2e-2, "remote {q_remote} vs local {q_local}");

    let r = tonescope(&["remote", "--url", &url, "render", "--in", s(&hdr), "--out", s(&preview), "--z", "1,2"]);
    assert_eq!(code(&r), 3);
    let opt = ok(&["remote", "--url", &url, "optimize", "--in", s(&small_hdr(dir.path(), 40, 40)), "--starts", "2", "--iters", "3"]);
    assert!(opt.lines().count() >= 2);
    let r = tonescope(&["remote", "--url", "http://127.0.0.1:9", "health"]);
    assert_eq!(code(&r), 2);
}
