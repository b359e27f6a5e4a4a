//! Bundle persistence and the toy dataset generator used by experiments.

use crate::PipelineError;
use pmr_core::flow::{load_flow, save_flow, ScalarField};
use pmr_core::media::{io, FrameClip};
use pmr_core::turbsim::{
    degrade_with, sample_blur_map, zero_mean_tilt_sequence, DegradationBundle, TurbulenceParams,
};
use pmr_core::{synth, Scalar};
use std::path::Path;

fn io_err(path: &Path, reason: String) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), reason }
}

/// Bundle directory layout: `clean/`, `blur_only/`, `degraded/` frame
/// directories, `tilts/NNNNNN.pmrw` flow files, `blur_map.pmrw` (sigma in the
/// dx slot), and a `params.json` manifest echoing the simulator parameters.
pub fn save_bundle<S: Scalar>(
    bundle: &DegradationBundle<S>,
    params: &TurbulenceParams,
    dir: &Path,
) -> Result<(), PipelineError> {
    io::save_clip(&bundle.clean, &dir.join("clean"))?;
    io::save_clip(&bundle.blur_only, &dir.join("blur_only"))?;
    io::save_clip(&bundle.degraded, &dir.join("degraded"))?;
    let tilt_dir = dir.join("tilts");
    std::fs::create_dir_all(&tilt_dir).map_err(|e| io_err(&tilt_dir, e.to_string()))?;
    for (i, tilt) in bundle.true_tilts.iter().enumerate() {
        save_flow(tilt, &tilt_dir.join(format!("{i:06}.pmrw")))?;
    }
    let (h, w) = (bundle.blur_map.h(), bundle.blur_map.w());
    let as_flow = pmr_core::flow::FlowField::from_fn(h, w, |y, x| {
        (bundle.blur_map.get(y, x), S::zero())
    });
    save_flow(&as_flow, &dir.join("blur_map.pmrw"))?;
    let manifest = serde_json::to_string_pretty(params).expect("params serialize");
    io::write_text(&dir.join("params.json"), &manifest)?;
    Ok(())
}

/// Load a bundle saved by [`save_bundle`]. Frame data goes through 8-bit
/// quantization, so the reconstruction identity holds only approximately for
/// clips that round-tripped through PNG.
pub fn load_bundle<S: Scalar>(dir: &Path) -> Result<DegradationBundle<S>, PipelineError> {
    let clean = io::load_clip(&dir.join("clean"))?;
    let blur_only = io::load_clip(&dir.join("blur_only"))?;
    let degraded = io::load_clip(&dir.join("degraded"))?;
    let tilt_dir = dir.join("tilts");
    let mut tilt_paths: Vec<_> = std::fs::read_dir(&tilt_dir)
        .map_err(|e| io_err(&tilt_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pmrw"))
        .collect();
    tilt_paths.sort();
    let true_tilts = tilt_paths
        .iter()
        .map(|p| load_flow::<S>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let map_flow = load_flow::<S>(&dir.join("blur_map.pmrw"))?;
    let (h, w) = (map_flow.h(), map_flow.w());
    let blur_map = ScalarField::new(h, w, (0..h * w).map(|i| map_flow.data()[2 * i]).collect());
    Ok(DegradationBundle { clean, blur_only, degraded, true_tilts, blur_map })
}

pub fn load_params(dir: &Path) -> Result<TurbulenceParams, PipelineError> {
    let path = dir.join("params.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e.to_string()))
}

/// Default degradation strength of the toy corpus: long-correlation tilt a
/// network can learn from, blur that is visible on the sprite texture.
pub fn toy_params(seed: u64) -> TurbulenceParams {
    TurbulenceParams {
        sigma_tilt: 1.8,
        corr_len: 24.0,
        blur_sigma_min: 0.6,
        blur_sigma_max: 1.4,
        blur_corr_len: 10.0,
        seed,
    }
}

/// Toy scene: a long-wavelength wave background with a mid-frequency
/// textured sprite translating at an integer velocity. The sprite gives the
/// segmentation stage a genuine dynamic region and the de-blur stage visible
/// high-frequency content.
pub fn toy_scene<S: Scalar>(t: usize, h: usize, w: usize, seed: u64) -> FrameClip<S> {
    use rand::prelude::*;
    let bg = synth::wave_frame_components::<S>(h, w, 1, seed, &[(0.38, 40.0)]);
    let side = (h.min(w) / 4).max(8);
    let sprite = synth::wave_frame_components::<S>(side, side, 1, seed.wrapping_add(13), &[
        (0.28, 7.0),
        (0.10, 18.0),
    ]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(29));
    let (vx, vy) = *[(1i64, 0i64), (0, 1), (1, 1), (-1, 0), (0, -1), (-1, 1)]
        .choose(&mut rng)
        .unwrap();
    let start_y = (h / 4 + rng.random_range(0..h / 4)) as i64;
    let start_x = (w / 4 + rng.random_range(0..w / 4)) as i64;
    let frames = (0..t)
        .map(|ti| {
            let oy = (start_y + vy * ti as i64).clamp(0, (h - side) as i64) as usize;
            let ox = (start_x + vx * ti as i64).clamp(0, (w - side) as i64) as usize;
            pmr_core::media::Frame::from_fn(h, w, 1, |y, x, ch| {
                if y >= oy && y < oy + side && x >= ox && x < ox + side {
                    sprite.get(y - oy, x - ox, ch)
                } else {
                    bg.get(y, x, ch)
                }
            })
        })
        .collect();
    FrameClip::new(frames).expect("valid scene")
}

/// A bundle over a wave scene with drift-free tilts: the supervised targets
/// of both training phases are reachable on these fixtures.
pub fn toy_bundle<S: Scalar>(
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<DegradationBundle<S>, PipelineError> {
    toy_bundle_with(t, h, w, seed, &toy_params(seed))
}

/// Toy bundle with explicit degradation strength.
pub fn toy_bundle_with<S: Scalar>(
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
    params: &TurbulenceParams,
) -> Result<DegradationBundle<S>, PipelineError> {
    let clean = toy_scene::<S>(t, h, w, seed);
    let blur_map = sample_blur_map::<S>(params, h, w, params.seed)?;
    let tilts = zero_mean_tilt_sequence::<S>(params, t, h, w, params.seed)?;
    Ok(degrade_with(&clean, &blur_map, tilts)?)
}

/// Deterministic toy corpus of `n` clips.
pub fn toy_dataset<S: Scalar>(n: usize, t: usize, h: usize, w: usize, seed: u64) -> Vec<DegradationBundle<S>> {
    (0..n)
        .map(|i| toy_bundle(t, h, w, seed.wrapping_add(1000 * i as u64)).expect("valid fixture"))
        .collect()
}
