//! Motion segmentation enhancement: pick the most uniform flow map, segment
//! dynamic pixels, and stabilize the static background with intensity-adaptive
//! temporal Gaussian weighting while dynamic pixels pass through untouched.

use crate::dei::{dynamic_mask_and_dpr, DynamicMask};
use crate::flow::{flow_magnitude, FlowField};
use crate::media::{Frame, FrameClip, MediaError};
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MseError {
    #[error("no flow fields supplied")]
    NoFlows,
    #[error("weights need at least one frame")]
    NoFrames,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Media(#[from] MediaError),
}

/// Flow-uniformity scores; the argmin selects the segmentation flow.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdScore {
    pub per_flow_scores: Vec<f64>,
    pub best_index: usize,
    pub best_value: f64,
}

/// `score = max(m)/2 - mean(|max(m)/2 - m|)` on the magnitude field `m`;
/// lower means a more uniform magnitude distribution. Ties break to the
/// lowest index.
pub fn ofd_select<S: Scalar>(flows: &[FlowField<S>]) -> Result<OfdScore, MseError> {
    if flows.is_empty() {
        return Err(MseError::NoFlows);
    }
    let per_flow_scores: Vec<f64> = flows
        .iter()
        .map(|f| {
            let m = flow_magnitude(f);
            let half_max = m.max_value().f64() / 2.0;
            let mean_dev = m.data().iter().map(|v| (half_max - v.f64()).abs()).sum::<f64>()
                / m.data().len() as f64;
            half_max - mean_dev
        })
        .collect();
    let mut best_index = 0;
    for (i, &s) in per_flow_scores.iter().enumerate() {
        if s < per_flow_scores[best_index] {
            best_index = i;
        }
    }
    Ok(OfdScore { best_value: per_flow_scores[best_index], per_flow_scores, best_index })
}

/// Same rule as the analyzer's mask: normalized magnitude thresholded at 0.5.
/// With `cleanup`, a 3x3 morphological open then close removes speckle.
pub fn segment_dynamic<S: Scalar>(flow: &FlowField<S>, cleanup: bool) -> DynamicMask {
    let (masks, _) = dynamic_mask_and_dpr(std::slice::from_ref(flow)).expect("one flow present");
    let mask = masks.into_iter().next().unwrap();
    if cleanup {
        morph_close(&morph_open(&mask))
    } else {
        mask
    }
}

fn morph_erode(mask: &DynamicMask) -> DynamicMask {
    let (h, w) = (mask.h(), mask.w());
    let mut bits = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            'probe: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if !mask.get(yy, xx) {
                        all = false;
                        break 'probe;
                    }
                }
            }
            bits[y * w + x] = all;
        }
    }
    DynamicMask::new(h, w, bits)
}

fn morph_dilate(mask: &DynamicMask) -> DynamicMask {
    let (h, w) = (mask.h(), mask.w());
    let mut bits = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            'probe: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if mask.get(yy, xx) {
                        bits[y * w + x] = true;
                        break 'probe;
                    }
                }
            }
        }
    }
    DynamicMask::new(h, w, bits)
}

fn morph_open(mask: &DynamicMask) -> DynamicMask {
    morph_dilate(&morph_erode(mask))
}

fn morph_close(mask: &DynamicMask) -> DynamicMask {
    morph_erode(&morph_dilate(mask))
}

/// Trailing-window temporal weights. `raw[i] = exp(-(N-i)^2 / (2 sigma^2))`
/// for i = 1..=N with `sigma = max(cn2, 1e-3)`; the current frame always
/// carries raw weight 1 and `normalized` sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Floor applied to `cn2` so a vanishing intensity degenerates to a delta on
/// the current frame instead of a division by zero.
pub const CN2_SIGMA_FLOOR: f64 = 1e-3;

pub fn gaussian_weights(n_frames: usize, cn2: f64) -> Result<TemporalWeights, MseError> {
    if n_frames == 0 {
        return Err(MseError::NoFrames);
    }
    let sigma = cn2.max(CN2_SIGMA_FLOOR);
    let raw: Vec<f64> = (1..=n_frames)
        .map(|i| {
            let d = (n_frames - i) as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    let normalized = raw.iter().map(|v| v / sum).collect();
    Ok(TemporalWeights { raw, normalized })
}

/// Blend each frame's static pixels over a trailing window (clamped at the
/// clip start, tail weights renormalized); dynamic pixels are copied verbatim
/// from the current frame.
pub fn enhance<S: Scalar>(
    clip: &FrameClip<S>,
    mask: &DynamicMask,
    weights: &TemporalWeights,
) -> Result<FrameClip<S>, MseError> {
    let (t, h, w, c) = clip.shape();
    if (mask.h(), mask.w()) != (h, w) {
        return Err(MseError::ShapeMismatch(format!(
            "mask {}x{} vs frames {}x{}",
            mask.h(),
            mask.w(),
            h,
            w
        )));
    }
    let window = weights.normalized.len();
    if window == 0 || window > t {
        return Err(MseError::ShapeMismatch(format!(
            "blend window {window} does not fit {t} frames"
        )));
    }
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let avail = (k + 1).min(window);
        let tail = &weights.raw[window - avail..];
        let tail_sum: f64 = tail.iter().sum();
        let mut out = Frame::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    for ch in 0..c {
                        out.set(y, x, ch, clip.frame(k).get(y, x, ch));
                    }
                } else {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for (i, &wv) in tail.iter().enumerate() {
                            let src = k + 1 - avail + i;
                            acc += wv / tail_sum * clip.frame(src).get(y, x, ch).f64();
                        }
                        out.set(y, x, ch, S::of(acc));
                    }
                }
            }
        }
        frames.push(out);
    }
    let mut out = FrameClip::from_frames_clamped(frames)?;
    out.frame_rate = clip.frame_rate;
    out.meta = clip.meta.clone();
    Ok(out)
}
