//! Reference image-quality metrics. Peak value is fixed at 1.0 (clips are
//! normalized); a zero-MSE comparison yields the `f64::INFINITY` sentinel
//! rather than an error.

use super::clip::{Frame, FrameClip, MediaError};
use crate::scalar::Scalar;

/// PSNR/SSIM pair for one comparison.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityScore {
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn mse_slices<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.f64() - y.f64();
        acc += d * d;
    }
    acc / a.len() as f64
}

/// `10*log10(1/MSE)` across all frames; +infinity when the inputs agree exactly.
pub fn psnr<S: Scalar>(a: &FrameClip<S>, b: &FrameClip<S>) -> Result<f64, MediaError> {
    if a.shape() != b.shape() {
        return Err(MediaError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let mut acc = 0.0;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        acc += mse_slices(fa.data(), fb.data());
    }
    Ok(mse_to_db(acc / a.t() as f64))
}

pub fn psnr_frames<S: Scalar>(a: &Frame<S>, b: &Frame<S>) -> Result<f64, MediaError> {
    if a.shape() != b.shape() {
        return Err(MediaError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(mse_to_db(mse_slices(a.data(), b.data())))
}

fn mse_to_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[((dy + r) * (2 * r + 1) + dx + r) as usize] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over valid 11x11 windows on the channel-mean frame.
pub fn ssim<S: Scalar>(a: &Frame<S>, b: &Frame<S>) -> Result<f64, MediaError> {
    if a.shape() != b.shape() {
        return Err(MediaError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MediaError::WindowTooLarge { h, w, window: SSIM_WINDOW });
    }
    let ga = a.channel_mean();
    let gb = b.channel_mean();
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wv = win[dy * SSIM_WINDOW + dx];
                    let va = ga.get(y0 + dy, x0 + dx, 0).f64();
                    let vb = gb.get(y0 + dy, x0 + dx, 0).f64();
                    ma += wv * va;
                    mb += wv * vb;
                    saa += wv * va * va;
                    sbb += wv * vb * vb;
                    sab += wv * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-clip score: PSNR over all samples, SSIM averaged over frames.
pub fn clip_quality<S: Scalar>(a: &FrameClip<S>, b: &FrameClip<S>) -> Result<QualityScore, MediaError> {
    let psnr_db = psnr(a, b)?;
    let mut s = 0.0;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        s += ssim(fa, fb)?;
    }
    Ok(QualityScore { psnr_db, ssim: s / a.t() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_identity_is_infinite() {
        let clip = synth::textured_clip::<f64>(2, 16, 16, 1, 1);
        assert_eq!(psnr(&clip, &clip).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset_is_twenty_db() {
        // residual 0.1 everywhere -> MSE 0.01 -> exactly 20 dB
        let a = FrameClip::new(vec![Frame::<f64>::from_fn(16, 16, 1, |_, _, _| 0.2)]).unwrap();
        let b = FrameClip::new(vec![Frame::<f64>::from_fn(16, 16, 1, |_, _, _| 0.3)]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_brute_force_mse_loop() {
        let a = synth::textured_clip::<f64>(3, 16, 16, 3, 5);
        let b = synth::textured_clip::<f64>(3, 16, 16, 3, 6);
        let mut acc = 0.0;
        let mut n = 0usize;
        for t in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    for ch in 0..3 {
                        let d = a.frame(t).get(y, x, ch) - b.frame(t).get(y, x, ch);
                        acc += d * d;
                        n += 1;
                    }
                }
            }
        }
        let expect = 10.0 * (1.0 / (acc / n as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric_and_noise_monotone() {
        let clean = synth::textured_clip::<f64>(1, 32, 32, 1, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..32 * 32).map(|_| rng.random::<f64>() - 0.5).collect();
        let noisy = |amp: f64| {
            clean
                .map_frames(|f| {
                    let mut i = 0;
                    Frame::from_fn(32, 32, 1, |y, x, _| {
                        let v = (f.get(y, x, 0) + amp * noise[i % noise.len()]).clamp(0.0, 1.0);
                        i += 1;
                        v
                    })
                })
                .unwrap()
        };
        let mut prev = f64::INFINITY;
        for amp in [0.05, 0.1, 0.2] {
            let n = noisy(amp);
            let p = psnr(&clean, &n).unwrap();
            assert!((p - psnr(&n, &clean).unwrap()).abs() < 1e-12);
            assert!(p < prev, "psnr must strictly decrease with noise amplitude");
            prev = p;
        }
    }

    #[test]
    fn ssim_self_is_one_and_symmetric() {
        let a = synth::textured_clip::<f64>(1, 24, 24, 1, 2);
        let fa = a.frame(0);
        assert!((ssim(fa, fa).unwrap() - 1.0).abs() < 1e-12);
        let b = synth::textured_clip::<f64>(1, 24, 24, 1, 3);
        let fb = b.frame(0);
        assert!((ssim(fa, fb).unwrap() - ssim(fb, fa).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_checkerboard_inversion_is_negative() {
        let a = Frame::<f64>::from_fn(16, 16, 1, |y, x, _| ((x + y) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_direct_per_window_formula() {
        let a = synth::textured_clip::<f64>(1, 32, 32, 1, 21);
        let b = synth::textured_clip::<f64>(1, 32, 32, 1, 22);
        let (fa, fb) = (a.frame(0), b.frame(0));
        // oracle: weighted moments accumulated as explicit deviations
        let win = gaussian_window();
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=32 - SSIM_WINDOW {
            for x0 in 0..=32 - SSIM_WINDOW {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        ma += win[dy * SSIM_WINDOW + dx] * fa.get(y0 + dy, x0 + dx, 0);
                        mb += win[dy * SSIM_WINDOW + dx] * fb.get(y0 + dy, x0 + dx, 0);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = win[dy * SSIM_WINDOW + dx];
                        let da = fa.get(y0 + dy, x0 + dx, 0) - ma;
                        let db = fb.get(y0 + dy, x0 + dx, 0) - mb;
                        va += wv * da * da;
                        vb += wv * db * db;
                        cov += wv * da * db;
                    }
                }
                total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                    / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1;
            }
        }
        let expect = total / count as f64;
        assert!((ssim(fa, fb).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Frame::<f32>::zeros(8, 8, 1);
        assert!(matches!(ssim(&a, &a), Err(MediaError::WindowTooLarge { .. })));
    }
}
