//! Deterministic synthetic scenes and fields for experiments and tests.

use crate::filters::blur_plane;
use crate::flow::FlowField;
use crate::media::{Frame, FrameClip};
use crate::scalar::Scalar;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Smoothed uniform noise rescaled into `[lo, hi]`.
pub fn smooth_noise_plane(h: usize, w: usize, sigma: f64, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let sm = blur_plane(&raw, h, w, sigma);
    let min = sm.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    sm.iter().map(|v| lo + (v - min) / span * (hi - lo)).collect()
}

/// One textured frame with mid-frequency content, samples in `[0.05, 0.95]`.
pub fn textured_frame<S: Scalar>(h: usize, w: usize, c: usize, seed: u64) -> Frame<S> {
    smooth_textured_frame(h, w, c, 1.2, seed)
}

/// Textured frame with adjustable spatial smoothness.
pub fn smooth_textured_frame<S: Scalar>(
    h: usize,
    w: usize,
    c: usize,
    sigma: f64,
    seed: u64,
) -> Frame<S> {
    let planes: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            smooth_noise_plane(h, w, sigma, 0.05, 0.95, seed.wrapping_mul(31).wrapping_add(ch as u64))
        })
        .collect();
    Frame::from_fn(h, w, c, |y, x, ch| S::of(planes[ch][y * w + x]))
}

/// T distinct textured frames (temporally independent noise).
pub fn textured_clip<S: Scalar>(t: usize, h: usize, w: usize, c: usize, seed: u64) -> FrameClip<S> {
    let frames = (0..t)
        .map(|ti| textured_frame(h, w, c, seed.wrapping_add(1000 * ti as u64 + 7)))
        .collect();
    FrameClip::new(frames).expect("synthetic frames are valid")
}

/// A static scene repeated T times.
pub fn static_clip<S: Scalar>(t: usize, h: usize, w: usize, c: usize, seed: u64) -> FrameClip<S> {
    let frame = textured_frame(h, w, c, seed);
    FrameClip::new(vec![frame; t]).expect("synthetic frames are valid")
}

/// Textured background with a textured square sprite translating at integer
/// velocity `(vx, vy)` pixels per frame; the sprite clamps at the borders.
pub fn moving_clip<S: Scalar>(
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
    vx: i64,
    vy: i64,
    side: usize,
) -> FrameClip<S> {
    let bg = textured_frame::<S>(h, w, c, seed);
    let sprite_plane = smooth_noise_plane(side, side, 0.8, 0.6, 1.0, seed.wrapping_add(17));
    let (start_y, start_x) = (h as i64 / 4, w as i64 / 4);
    let frames = (0..t)
        .map(|ti| {
            let oy = (start_y + vy * ti as i64).clamp(0, (h - side) as i64) as usize;
            let ox = (start_x + vx * ti as i64).clamp(0, (w - side) as i64) as usize;
            Frame::from_fn(h, w, c, |y, x, ch| {
                if y >= oy && y < oy + side && x >= ox && x < ox + side {
                    S::of(sprite_plane[(y - oy) * side + (x - ox)])
                } else {
                    bg.get(y, x, ch)
                }
            })
        })
        .collect();
    FrameClip::new(frames).expect("synthetic frames are valid")
}

/// Smooth low-curvature scene: a strong long-wavelength sinusoid plus a
/// weaker mid-frequency one, with seed-randomized orientations and phases.
/// Bilinear resampling is nearly exact on these, which makes them the
/// fixture of choice for warp-supervised training.
pub fn wave_frame<S: Scalar>(h: usize, w: usize, c: usize, seed: u64) -> Frame<S> {
    wave_frame_components(h, w, c, seed, &[(0.30, 32.0), (0.12, 12.0)])
}

/// Wave scene with a custom `(amplitude, wavelength)` mix.
pub fn wave_frame_components<S: Scalar>(
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
    mix: &[(f64, f64)],
) -> Frame<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut components = Vec::new();
    for &(amp, lambda_base) in mix {
        let angle = rng.random::<f64>() * tau;
        let lambda = lambda_base * (0.85 + 0.3 * rng.random::<f64>());
        let phase = rng.random::<f64>() * tau;
        components.push((amp, angle.cos() * tau / lambda, angle.sin() * tau / lambda, phase));
    }
    Frame::from_fn(h, w, c, |y, x, ch| {
        let mut v = 0.5;
        for &(amp, kx, ky, phase) in &components {
            v += amp * (kx * x as f64 + ky * y as f64 + phase + ch as f64 * 0.7).sin();
        }
        S::of(v.clamp(0.0, 1.0))
    })
}

/// A static wave scene repeated T times.
pub fn wave_clip<S: Scalar>(t: usize, h: usize, w: usize, c: usize, seed: u64) -> FrameClip<S> {
    let frame = wave_frame(h, w, c, seed);
    FrameClip::new(vec![frame; t]).expect("synthetic frames are valid")
}

/// Integer translation with border replication: positive `kx` moves content
/// right, so flow estimated from (a, shifted) recovers `dx = +kx`.
pub fn shift_frame<S: Scalar>(frame: &Frame<S>, kx: i64, ky: i64) -> Frame<S> {
    let (h, w, c) = frame.shape();
    Frame::from_fn(h, w, c, |y, x, ch| {
        let sy = (y as i64 - ky).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - kx).clamp(0, w as i64 - 1) as usize;
        frame.get(sy, sx, ch)
    })
}

/// White uniform noise flow with components in `[-amp, amp]`.
pub fn random_flow<S: Scalar>(h: usize, w: usize, amp: f64, seed: u64) -> FlowField<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField::from_fn(h, w, |_, _| {
        (
            S::of((rng.random::<f64>() * 2.0 - 1.0) * amp),
            S::of((rng.random::<f64>() * 2.0 - 1.0) * amp),
        )
    })
}

/// Spatially smooth flow whose peak magnitude equals `amp`.
pub fn smooth_flow(h: usize, w: usize, amp: f64, corr: f64, seed: u64) -> FlowField<f64> {
    let dx = smooth_noise_plane(h, w, corr, -1.0, 1.0, seed);
    let dy = smooth_noise_plane(h, w, corr, -1.0, 1.0, seed.wrapping_add(99));
    let peak = dx
        .iter()
        .zip(&dy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    let k = if peak > 0.0 { amp / peak } else { 0.0 };
    FlowField::from_fn(h, w, |y, x| (dx[y * w + x] * k, dy[y * w + x] * k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = textured_clip::<f32>(2, 16, 16, 1, 5);
        let b = textured_clip::<f32>(2, 16, 16, 1, 5);
        assert_eq!(a, b);
        let c = textured_clip::<f32>(2, 16, 16, 1, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn moving_clip_object_moves() {
        let clip = moving_clip::<f64>(4, 32, 32, 1, 1, 2, 0, 8);
        assert_ne!(clip.frame(0), clip.frame(3));
    }
}
