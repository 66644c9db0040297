//! Regenerate the committed test fixtures under `tests/fixtures`. Scores in
//! `tests/fixtures/tmqi/manifest.txt` and decoded samples in
//! `tests/fixtures/rgbe_reference.txt` come from the Python oracles in
//! `tests/oracle`, run afterwards.
//!
//! cargo run -p tonescope-core --example make_fixtures

use std::path::Path;

use tonescope::hdrio::{self, LdrImage};
use tonescope::pipeline::{tonemap, PipelineParams, PredictedKernels};
use tonescope::synth::{render, Scene};

const TMQI_SIZE: usize = 192;

fn main() -> tonescope::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let tdir = dir.join("tmqi");
    std::fs::create_dir_all(&tdir)?;
    hdrio::write_hdr(&render(Scene::Foliage, 8, 8, 1), dir.join("pipeline_8x8.hdr"))?;

    let params = [(1.0, 2.0), (1.8, 2.7), (2.6, 3.5), (1.2, 3.2), (2.2, 1.9)];
    for (scene, (gb, gp)) in Scene::ALL.into_iter().zip(params) {
        let hdr = render(scene, TMQI_SIZE, TMQI_SIZE, 11);
        hdrio::write_hdr(&hdr, tdir.join(format!("{}.hdr", scene.name())))?;
        // score what was written, after RGBE quantization
        let hdr = hdrio::read_hdr(tdir.join(format!("{}.hdr", scene.name())))?;
        let k = PredictedKernels::gaussian(TMQI_SIZE, TMQI_SIZE, 2.0);
        let ldr = tonemap(&hdr, &k, &PipelineParams::new(gb, gp))?;
        hdrio::write_png8(&ldr, tdir.join(format!("{}.png", scene.name())))?;
    }

    // grey images derived from the foliage luminance
    let hdr = hdrio::read_hdr(tdir.join("foliage.hdr"))?;
    let lum: Vec<f64> = hdrio::luminance(&hdr)?.data;
    let lo = lum.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let grey = |f: &dyn Fn(f64) -> f64| -> tonescope::Result<LdrImage> {
        let d = lum.iter().flat_map(|l| [f(*l); 3]).collect();
        LdrImage::new(TMQI_SIZE, TMQI_SIZE, d)
    };
    let affine = |l: f64| (l - lo) / (hi - lo);
    hdrio::write_png8(&grey(&affine)?, tdir.join("affine.png"))?;
    hdrio::write_png8(&grey(&|l| 0.7 * affine(l))?, tdir.join("affine_low.png"))?;
    hdrio::write_png8(&grey(&|l| 0.7 * affine(l) + 0.2)?, tdir.join("affine_shift.png"))?;
    hdrio::write_png8(&grey(&|_| 0.5)?, tdir.join("constant.png"))?;
    let loga = |l: f64| (l.ln() - lo.ln()) / (hi.ln() - lo.ln());
    hdrio::write_png8(&grey(&loga)?, tdir.join("log.png"))?;
    Ok(())
}
