use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonescope::hdrio::*;
use tonescope::Error;

fn random_hdr(w: usize, h: usize, seed: u64) -> HdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3)
        .map(|_| 2f64.powf(rng.random_range(-8.0..8.0)))
        .collect();
    HdrImage::new(w, h, data).unwrap()
}

#[test]
fn luminance_definition() {
    let img = HdrImage::new(2, 1, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let y = luminance(&img).unwrap();
    assert_eq!(y.data, vec![1.0, 0.2126]);
}

#[test]
fn luminance_matches_brute_force() {
    let img = random_hdr(7, 5, 1);
    let y = luminance(&img).unwrap();
    for py in 0..5 {
        for px in 0..7 {
            let [r, g, b] = img.pixel(px, py);
            assert_eq!(y.data[py * 7 + px], 0.2126 * r + 0.7152 * g + 0.0722 * b);
        }
    }
}

#[test]
fn luminance_floor_and_all_zero() {
    let img = HdrImage::new(2, 1, vec![0.0, 0.0, 0.0, 4.0, 4.0, 4.0]).unwrap();
    let y = luminance(&img).unwrap();
    assert_eq!(y.data, vec![4e-6, 4.0]);
    let zero = HdrImage::new(2, 1, vec![0.0; 6]).unwrap();
    assert!(matches!(luminance(&zero), Err(Error::Degenerate(_))));
}

#[test]
fn log_normalize_endpoints_and_degenerate() {
    let lum = Luminance {
        width: 2,
        height: 1,
        data: vec![1.0, std::f64::consts::E],
    };
    let l = log_normalize(&lum).unwrap();
    assert_eq!(l.data, vec![0.0, 1.0]);
    assert!(!l.degenerate);
    let c = Luminance {
        width: 3,
        height: 1,
        data: vec![2.5; 3],
    };
    let l = log_normalize(&c).unwrap();
    assert_eq!(l.data, vec![0.5; 3]);
    assert!(l.degenerate);
}

#[test]
fn log_normalize_matches_brute_force() {
    let y = luminance(&random_hdr(4, 4, 9)).unwrap();
    let l = log_normalize(&y).unwrap();
    let lo = y.data.iter().map(|v| v.ln()).fold(f64::INFINITY, f64::min);
    let hi = y.data.iter().map(|v| v.ln()).fold(f64::NEG_INFINITY, f64::max);
    for (got, v) in l.data.iter().zip(&y.data) {
        assert_eq!(*got, (v.ln() - lo) / (hi - lo));
    }
    assert_eq!((l.logmin, l.logmax), (lo, hi));
}

#[test]
fn rgbe_round_trip_sweep() {
    // channels share the max channel's binade, so every mantissa is >= 128
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for e in -100..=100 {
        for _ in 0..50 {
            let base = 2f64.powi(e);
            let rgb = [0, 1, 2].map(|_| base * rng.random_range(1.0..2.0));
            let dec = decode_rgbe(encode_rgbe(rgb));
            for c in 0..3 {
                worst = worst.max((dec[c] - rgb[c]).abs() / rgb[c]);
            }
            // smaller channels: within half a quantization step, <= max/255
            let m = rgb.iter().cloned().fold(0.0, f64::max);
            let mixed = [m, m * rng.random::<f64>(), 0.0];
            let dec = decode_rgbe(encode_rgbe(mixed));
            for c in 0..3 {
                assert!((dec[c] - mixed[c]).abs() <= m / 255.0);
            }
        }
    }
    assert!(worst <= 1.0 / 256.0, "worst relative error {worst}");
    assert_eq!(decode_rgbe([0, 0, 0, 0]), [0.0; 3]);
    assert_eq!(encode_rgbe([0.0; 3]), [0; 4]);
}

#[test]
fn file_round_trip_rle_and_flat() {
    for (w, h) in [(37, 11), (5, 3), (200, 2)] {
        let img = random_hdr(w, h, w as u64);
        let bytes = write_radiance_hdr(&img);
        let back = read_radiance_hdr(&bytes).unwrap();
        assert_eq!((back.width(), back.height()), (w, h));
        for (a, b) in img.data().chunks(3).zip(back.data().chunks(3)) {
            let m = a.iter().cloned().fold(0.0, f64::max);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= m / 255.0);
            }
        }
        // decode-encode is a fixed point
        assert_eq!(write_radiance_hdr(&back), bytes);
    }
}

#[test]
fn rle_output_is_smaller_on_flat_regions() {
    let img = HdrImage::new(64, 4, vec![0.5; 64 * 4 * 3]).unwrap();
    assert!(write_radiance_hdr(&img).len() < 64 * 4 * 4 / 4);
}

fn header(res: &str) -> Vec<u8> {
    format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n{res}\n").into_bytes()
}

#[test]
fn parse_errors_carry_offsets() {
    match read_radiance_hdr(b"P6\n2 2\n255\n") {
        Err(Error::Parse { offset: 0, msg }) => assert!(msg.contains("magic")),
        other => panic!("{other:?}"),
    }
    let h = header("+Y 2 +X 2");
    let res_at = h.len() - "+Y 2 +X 2\n".len();
    match read_radiance_hdr(&h) {
        Err(Error::Parse { offset, msg }) => {
            assert_eq!(offset, res_at);
            assert!(msg.contains("orientation"));
        }
        other => panic!("{other:?}"),
    }
    let mut t = header("-Y 2 +X 2");
    let data_at = t.len();
    t.extend_from_slice(&[128, 128, 128, 129, 128, 128]);
    match read_radiance_hdr(&t) {
        Err(Error::Parse { offset, msg }) => {
            assert!(offset >= data_at && offset <= t.len());
            assert!(msg.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
    let mut bad_run = header("-Y 1 +X 8");
    let at = bad_run.len() + 4;
    bad_run.extend_from_slice(&[2, 2, 0, 8, 140, 1]);
    match read_radiance_hdr(&bad_run) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, at),
        other => panic!("{other:?}"),
    }
}

#[test]
fn png_write_then_decode_matches_quantized_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<f64> = (0..9 * 6 * 3).map(|_| rng.random()).collect();
    let mut img = data.clone();
    img[..3].copy_from_slice(&[0.0, 1.0, 0.5]);
    let ldr = LdrImage::new(9, 6, img).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.png");
    write_png8(&ldr, &p).unwrap();
    let back = read_png8(&p).unwrap();
    assert_eq!(back, ldr.quantized());
    let bytes: Vec<u8> = back.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    assert_eq!(&bytes[..3], &[0, 255, 128]);
}

proptest! {
    #[test]
    fn luminance_is_linear(seed in 0u64..1000, a in 0.01f64..100.0) {
        let img = random_hdr(3, 3, seed);
        let y = luminance(&img).unwrap();
        let ya = luminance(&img.scaled(a).unwrap()).unwrap();
        for (p, q) in y.data.iter().zip(&ya.data) {
            prop_assert!((a * p - q).abs() <= 1e-12 * q.abs());
        }
    }

    #[test]
    fn log_normalize_is_monotone_onto_unit_interval(
        vals in prop::collection::vec(1e-3f64..1e3, 2..40)
    ) {
        prop_assume!(vals.iter().any(|v| *v != vals[0]));
        let lum = Luminance { width: vals.len(), height: 1, data: vals.clone() };
        let l = log_normalize(&lum).unwrap();
        let lo = l.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = l.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!((lo, hi), (0.0, 1.0));
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                if vals[i] < vals[j] {
                    prop_assert!(l.data[i] <= l.data[j]);
                }
            }
        }
    }

    #[test]
    fn rgbe_reencode_within_one_mantissa_step(p in any::<[u8; 4]>()) {
        prop_assume!(p[3] > 0 && p[3] < 250 && p[..3].iter().any(|&m| m >= 128));
        let q = encode_rgbe(decode_rgbe(p));
        if q[3] == p[3] {
            for c in 0..3 {
                prop_assert!((q[c] as i32 - p[c] as i32).abs() <= 1);
            }
        }
        prop_assert_eq!(decode_rgbe(q), decode_rgbe(p));
    }
}

#[test]
fn decode_agrees_with_reference_decoder() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let text = std::fs::read_to_string(root.join("rgbe_reference.txt")).unwrap();
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let img = read_hdr(root.join(f[0])).unwrap();
        if f[1] == "sum" {
            let s: f64 = img.data().iter().sum();
            let want: f64 = f[2].parse().unwrap();
            assert!((s - want).abs() <= 1e-9 * want, "{}: {s} vs {want}", f[0]);
        } else {
            let (x, y): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            let want: Vec<f64> = f[3..6].iter().map(|v| v.parse().unwrap()).collect();
            assert_eq!(img.pixel(x, y).to_vec(), want, "{line}");
        }
        checked += 1;
    }
    assert!(checked >= 20);
}
