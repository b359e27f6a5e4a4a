use crate::scalar::Scalar;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("no frames found")]
    NoFrames,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("unsupported geometry {h}x{w}: H and W must be even and at least 8")]
    BadDimensions { h: usize, w: usize },
    #[error("sample out of range [0,1]: {value} at flat index {index}")]
    OutOfRange { value: f64, index: usize },
    #[error("failed to decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("frame {h}x{w} smaller than the {window}-tap metric window")]
    WindowTooLarge { h: usize, w: usize, window: usize },
    #[error("unsupported channel count {0} (expected 1, 3 or 4)")]
    BadChannels(usize),
}

/// A single multi-channel image, row-major `(y, x, channel)`, samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<S> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<S>,
}

impl<S: Scalar> Frame<S> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![S::zero(); h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<S>) -> Result<Self, MediaError> {
        if data.len() != h * w * c {
            return Err(MediaError::ShapeMismatch {
                expected: format!("{}x{}x{} = {} samples", h, w, c, h * w * c),
                got: format!("{} samples", data.len()),
            });
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> S {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: S) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Average over channels, yielding a single-channel frame.
    pub fn channel_mean(&self) -> Frame<S> {
        if self.c == 1 {
            return self.clone();
        }
        let inv = S::of(1.0 / self.c as f64);
        let mut out = Frame::zeros(self.h, self.w, 1);
        for i in 0..self.h * self.w {
            let mut acc = S::zero();
            for ch in 0..self.c {
                acc += self.data[i * self.c + ch];
            }
            out.data[i] = acc * inv;
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Frame<S> {
        Frame { h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.max(S::zero()).min(S::one());
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipMeta {
    pub source: Option<PathBuf>,
    pub color_space: ColorSpace,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ColorSpace {
    /// Linear samples in [0, 1]; the only space this workspace operates in.
    #[default]
    Linear,
}

/// An ordered sequence of equal-shaped frames; the universal video carrier.
///
/// Invariants, enforced at construction: at least one frame, identical frame
/// shapes, H and W even and >= 8, every sample in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip<S> {
    frames: Vec<Frame<S>>,
    pub frame_rate: Option<f64>,
    pub meta: ClipMeta,
}

impl<S: Scalar> FrameClip<S> {
    pub fn new(frames: Vec<Frame<S>>) -> Result<Self, MediaError> {
        let first = frames.first().ok_or(MediaError::NoFrames)?;
        let shape = first.shape();
        let (h, w, _) = shape;
        if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(MediaError::BadDimensions { h, w });
        }
        for f in &frames {
            if f.shape() != shape {
                return Err(MediaError::ShapeMismatch {
                    expected: format!("{:?}", shape),
                    got: format!("{:?}", f.shape()),
                });
            }
            for (i, &v) in f.data().iter().enumerate() {
                if !(v >= S::zero() && v <= S::one()) {
                    return Err(MediaError::OutOfRange { value: v.f64(), index: i });
                }
            }
        }
        Ok(Self { frames, frame_rate: None, meta: ClipMeta::default() })
    }

    /// Construction for internal producers whose outputs are in range by
    /// convexity; samples are clamped rather than re-validated.
    pub fn from_frames_clamped(mut frames: Vec<Frame<S>>) -> Result<Self, MediaError> {
        for f in &mut frames {
            f.clamp01();
        }
        Self::new(frames)
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.frames.len()
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.frames[0].h()
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.frames[0].w()
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.frames[0].c()
    }
    /// (T, H, W, C)
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.t(), self.h(), self.w(), self.c())
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &Frame<S> {
        &self.frames[t]
    }

    #[inline]
    pub fn frames(&self) -> &[Frame<S>] {
        &self.frames
    }

    pub fn map_frames(&self, f: impl Fn(&Frame<S>) -> Frame<S>) -> Result<Self, MediaError> {
        let mut clip = Self::new(self.frames.iter().map(f).collect::<Vec<_>>())?;
        clip.frame_rate = self.frame_rate;
        clip.meta = self.meta.clone();
        Ok(clip)
    }

    /// Spatial crop of every frame. The origin is inclusive.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self, MediaError> {
        if y0 + h > self.h() || x0 + w > self.w() {
            return Err(MediaError::ShapeMismatch {
                expected: format!("crop within {}x{}", self.h(), self.w()),
                got: format!("origin ({y0},{x0}) size {h}x{w}"),
            });
        }
        let c = self.c();
        let frames = self
            .frames
            .iter()
            .map(|f| Frame::from_fn(h, w, c, |y, x, ch| f.get(y0 + y, x0 + x, ch)))
            .collect();
        Self::new(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_mixed_shapes() {
        assert!(matches!(FrameClip::<f32>::new(vec![]), Err(MediaError::NoFrames)));
        let a = Frame::<f32>::zeros(16, 16, 1);
        let b = Frame::<f32>::zeros(16, 18, 1);
        assert!(matches!(FrameClip::new(vec![a, b]), Err(MediaError::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_odd_or_tiny_dims_and_out_of_range() {
        let odd = Frame::<f32>::zeros(16, 15, 1);
        assert!(matches!(FrameClip::new(vec![odd]), Err(MediaError::BadDimensions { .. })));
        let tiny = Frame::<f32>::zeros(6, 8, 1);
        assert!(matches!(FrameClip::new(vec![tiny]), Err(MediaError::BadDimensions { .. })));
        let mut hot = Frame::<f32>::zeros(8, 8, 1);
        hot.set(0, 0, 0, 1.5);
        assert!(matches!(FrameClip::new(vec![hot]), Err(MediaError::OutOfRange { .. })));
    }

    #[test]
    fn channel_mean_averages() {
        let f = Frame::<f64>::from_fn(8, 8, 3, |_, _, ch| [0.0, 0.3, 0.6][ch]);
        let m = f.channel_mean();
        assert_eq!(m.c(), 1);
        assert!((m.get(4, 4, 0) - 0.3).abs() < 1e-12);
    }
}
