//! Dense optical flow behind a pluggable backend registry, plus the warping
//! and flow arithmetic shared by the simulator, the dynamics analyzer and the
//! restoration stages.
//!
//! Convention used everywhere: flow is a backward-sampling displacement,
//! `out(x) = in(x + f(x))`, components ordered `(dx, dy)` in image
//! coordinates and measured in pixels.

mod classic;

pub use classic::ClassicFlow;

use crate::media::{Frame, FrameClip, MediaError};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("unknown flow backend '{0}'")]
    UnknownBackend(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite flow produced by backend '{0}'")]
    NonFinite(String),
    #[error("flow i/o failed at {path}: {reason}")]
    Io { path: std::path::PathBuf, reason: String },
}

/// Per-pixel 2-vector displacement map, `(dx, dy)` interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<S> {
    h: usize,
    w: usize,
    data: Vec<S>,
}

/// Turbulence-induced geometric offset of an observed frame relative to the
/// stable scene; same layout and warp semantics as a flow field.
pub type TiltField<S> = FlowField<S>;

impl<S: Scalar> FlowField<S> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![S::zero(); h * w * 2] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (S, S)) -> Self {
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { h, w, data }
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
    pub fn get(&self, y: usize, x: usize) -> (S, S) {
        let i = (y * self.w + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: S, dy: S) {
        let i = (y * self.w + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: S) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&v| v * k).collect() }
    }

    /// Elementwise mean of several same-shaped fields.
    pub fn mean_of(fields: &[FlowField<S>]) -> Result<FlowField<S>, FlowError> {
        let first = fields.first().ok_or_else(|| FlowError::ShapeMismatch("empty field list".into()))?;
        let mut acc = FlowField::zeros(first.h, first.w);
        for f in fields {
            if (f.h, f.w) != (first.h, first.w) {
                return Err(FlowError::ShapeMismatch(format!(
                    "{}x{} vs {}x{}",
                    f.h, f.w, first.h, first.w
                )));
            }
            for (a, &b) in acc.data.iter_mut().zip(&f.data) {
                *a += b;
            }
        }
        let inv = S::of(1.0 / fields.len() as f64);
        for v in &mut acc.data {
            *v *= inv;
        }
        Ok(acc)
    }
}

/// Non-negative per-pixel scalar map (flow magnitudes, blur sigmas, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<S> {
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> ScalarField<S> {
    pub fn new(h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }
    pub fn constant(h: usize, w: usize, v: S) -> Self {
        Self { h, w, data: vec![v; h * w] }
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
    pub fn get(&self, y: usize, x: usize) -> S {
        self.data[y * self.w + x]
    }
    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn max_value(&self) -> S {
        self.data.iter().copied().fold(S::zero(), S::max)
    }
    pub fn min_value(&self) -> S {
        self.data.iter().copied().fold(S::infinity(), S::min)
    }
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel Euclidean norm of a flow field.
pub fn flow_magnitude<S: Scalar>(f: &FlowField<S>) -> ScalarField<S> {
    let data = (0..f.h * f.w)
        .map(|i| {
            let dx = f.data[2 * i];
            let dy = f.data[2 * i + 1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    ScalarField { h: f.h, w: f.w, data }
}

pub const NORMALIZE_EPS: f64 = 1e-8;

/// Scale a non-negative field by its maximum (floored at a small epsilon so
/// an all-zero input maps to all zeros).
pub fn normalize_magnitude<S: Scalar>(m: &ScalarField<S>) -> ScalarField<S> {
    let peak = m.max_value().max(S::of(NORMALIZE_EPS));
    ScalarField { h: m.h, w: m.w, data: m.data.iter().map(|&v| v / peak).collect() }
}

/// Backward bilinear warp with border replication: `out(x) = in(x + f(x))`.
/// The zero field is the exact identity.
pub fn warp_frame<S: Scalar>(frame: &Frame<S>, f: &FlowField<S>) -> Result<Frame<S>, FlowError> {
    let (h, w, c) = frame.shape();
    if (f.h, f.w) != (h, w) {
        return Err(FlowError::ShapeMismatch(format!(
            "frame {}x{} vs field {}x{}",
            h, w, f.h, f.w
        )));
    }
    let mut out = Frame::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f.get(y, x);
            let sx = (S::of(x as f64) + dx).f64().clamp(0.0, (w - 1) as f64);
            let sy = (S::of(y as f64) + dy).f64().clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = S::of(sx - x0 as f64);
            let fy = S::of(sy - y0 as f64);
            for ch in 0..c {
                let top = frame.get(y0, x0, ch) + (frame.get(y0, x1, ch) - frame.get(y0, x0, ch)) * fx;
                let bot = frame.get(y1, x0, ch) + (frame.get(y1, x1, ch) - frame.get(y1, x0, ch)) * fx;
                out.set(y, x, ch, top + (bot - top) * fy);
            }
        }
    }
    Ok(out)
}

/// Warp every frame of a clip by its own field.
pub fn warp_clip<S: Scalar>(
    clip: &FrameClip<S>,
    fields: &[FlowField<S>],
) -> Result<FrameClip<S>, FlowError> {
    if fields.len() != clip.t() {
        return Err(FlowError::ShapeMismatch(format!(
            "{} frames vs {} fields",
            clip.t(),
            fields.len()
        )));
    }
    let frames = clip
        .frames()
        .iter()
        .zip(fields)
        .map(|(fr, fl)| warp_frame(fr, fl))
        .collect::<Result<Vec<_>, _>>()?;
    FrameClip::from_frames_clamped(frames)
        .map_err(|e: MediaError| FlowError::ShapeMismatch(e.to_string()))
}

/// A dense flow estimator. Backends must be stateless or internally
/// synchronized; estimates must be deterministic for fixed inputs.
pub trait FlowEstimator<S: Scalar>: Send + Sync {
    fn estimate(&self, a: &Frame<S>, b: &Frame<S>) -> Result<FlowField<S>, FlowError>;
}

/// String-keyed backend registry; `"classic"` is always present.
pub struct FlowRegistry<S: Scalar> {
    backends: BTreeMap<String, Arc<dyn FlowEstimator<S>>>,
}

pub const CLASSIC_BACKEND: &str = "classic";

impl<S: Scalar> FlowRegistry<S> {
    /// Registry holding only the bundled classical estimator.
    pub fn standard() -> Self {
        let mut backends: BTreeMap<String, Arc<dyn FlowEstimator<S>>> = BTreeMap::new();
        backends.insert(CLASSIC_BACKEND.to_string(), Arc::new(ClassicFlow::default()));
        Self { backends }
    }

    pub fn register(&mut self, id: impl Into<String>, backend: Arc<dyn FlowEstimator<S>>) {
        self.backends.insert(id.into(), backend);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn FlowEstimator<S>>, FlowError> {
        self.backends.get(id).ok_or_else(|| FlowError::UnknownBackend(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(|s| s.as_str())
    }

    /// Estimate dense flow mapping `a` to `b` with the named backend.
    pub fn estimate(&self, a: &Frame<S>, b: &Frame<S>, id: &str) -> Result<FlowField<S>, FlowError> {
        if a.shape() != b.shape() {
            return Err(FlowError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let flow = self.get(id)?.estimate(a, b)?;
        if !flow.is_finite() {
            return Err(FlowError::NonFinite(id.to_string()));
        }
        Ok(flow)
    }
}

const FLOW_MAGIC: &[u8; 4] = b"PMRW";

/// Raw flow file: magic `PMRW`, little-endian u32 H, W, then `H*W*2` f32,
/// `(dx, dy)` interleaved per pixel.
pub fn save_flow<S: Scalar>(f: &FlowField<S>, path: &Path) -> Result<(), FlowError> {
    let mut bytes = Vec::with_capacity(12 + f.data.len() * 4);
    bytes.extend_from_slice(FLOW_MAGIC);
    bytes.extend_from_slice(&(f.h as u32).to_le_bytes());
    bytes.extend_from_slice(&(f.w as u32).to_le_bytes());
    for &v in &f.data {
        bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)
        .map_err(|e| FlowError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_flow<S: Scalar>(path: &Path) -> Result<FlowField<S>, FlowError> {
    let err = |reason: String| FlowError::Io { path: path.to_path_buf(), reason };
    let mut file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| err(e.to_string()))?;
    if &header[..4] != FLOW_MAGIC {
        return Err(err("bad magic".into()));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| err(e.to_string()))?;
    if body.len() != h * w * 8 {
        return Err(err(format!("expected {} payload bytes, got {}", h * w * 8, body.len())));
    }
    let data = (0..h * w * 2)
        .map(|i| S::of(f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap()) as f64))
        .collect();
    Ok(FlowField { h, w, data })
}
