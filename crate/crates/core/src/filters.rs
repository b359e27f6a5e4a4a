//! Separable Gaussian filtering on planes and frames, replicate borders.

use crate::media::Frame;
use crate::scalar::Scalar;

/// Normalized 1-D Gaussian taps with radius `ceil(3*sigma)`; `[1]` when
/// sigma is not positive.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> =
        (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Horizontal-then-vertical convolution of a single `h`x`w` plane.
pub fn blur_plane<S: Scalar>(data: &[S], h: usize, w: usize, sigma: f64) -> Vec<S> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![S::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let xs = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * data[y * w + xs].f64();
            }
            tmp[y * w + x] = S::of(acc);
        }
    }
    let mut out = vec![S::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let ys = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[ys * w + x].f64();
            }
            out[y * w + x] = S::of(acc);
        }
    }
    out
}

/// Per-channel Gaussian blur of a frame.
pub fn blur_frame<S: Scalar>(frame: &Frame<S>, sigma: f64) -> Frame<S> {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let (h, w, c) = frame.shape();
    let mut out = Frame::zeros(h, w, c);
    for ch in 0..c {
        let plane: Vec<S> = (0..h * w).map(|i| frame.get(i / w, i % w, ch)).collect();
        let blurred = blur_plane(&plane, h, w, sigma);
        for i in 0..h * w {
            out.set(i / w, i % w, ch, blurred[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() / 2 {
            assert!((k[i] - k[k.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let f = Frame::<f32>::from_fn(8, 8, 1, |y, x, _| (y * 8 + x) as f32 / 64.0);
        assert_eq!(blur_frame(&f, 0.0), f);
    }

    #[test]
    fn constant_plane_is_fixed_point() {
        let data = vec![0.4f64; 12 * 10];
        let out = blur_plane(&data, 12, 10, 1.7);
        for v in out {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }
}
