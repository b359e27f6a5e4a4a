//! DET: a depth-4 encoder-decoder predicting multi-scale per-frame tilt
//! fields. The encoder is one DS_align stem followed by three Wave_conv3D
//! halvings; the decoder fuses skip connections through Part_conv3D layers,
//! and the last three decoder layers emit tilt fields at 1/4, 1/2 and full
//! resolution. Tilt heads are zero-initialized so the untrained network is
//! the exact identity on any clip.
//!
//! Correction warps each frame by the negated deviation from the temporal
//! mean tilt: with backward sampling, warping by `(mean - t_i)` is what
//! cancels a frame's own offset, and it makes ground-truth simulator tilts an
//! improvement oracle.

use crate::blocks::{prefixed, prefixed_mut, DsAlign, PartConv3d, PointwiseConv, WaveConv3d};
use crate::checkpoint;
use crate::ops::{sub_temporal_mean_fwd, upsample2x_fwd, warp_offsets_fwd};
use crate::tape::{Tape, VarId};
use crate::tensor::{clip_to_tensor, tensor_to_clip, Tensor};
use crate::NnError;
use pmr_core::flow::TiltField;
use pmr_core::media::FrameClip;
use pmr_core::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DET_DEPTH: usize = 4;
pub const DET_SCALES_OUT: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DetConfig {
    pub base_channels: usize,
    /// Nominal frame count the model is built for; any T >= 2 is accepted.
    pub in_frames: usize,
    pub in_channels: usize,
    /// Fraction of channels convolved inside Part_conv3D.
    pub part_ratio: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self { base_channels: 8, in_frames: 4, in_channels: 3, part_ratio: 0.25 }
    }
}

impl DetConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.base_channels < 4 {
            return Err(NnError::ConfigError("base_channels must be at least 4".into()));
        }
        if self.in_frames < 2 {
            return Err(NnError::ConfigError("in_frames must be at least 2".into()));
        }
        if !(self.part_ratio > 0.0 && self.part_ratio <= 1.0) {
            return Err(NnError::ConfigError("part_ratio must lie in (0, 1]".into()));
        }
        if self.in_channels == 0 {
            return Err(NnError::ConfigError("in_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame tilt fields at 1/4, 1/2 and full resolution (coarse to fine).
#[derive(Debug, Clone)]
pub struct TiltPyramid<S> {
    pub levels: Vec<Vec<TiltField<S>>>,
}

impl<S: Scalar> TiltPyramid<S> {
    /// Upsampling factor that brings `level` to full resolution.
    pub fn level_factor(level: usize) -> usize {
        1 << (DET_SCALES_OUT - 1 - level)
    }

    pub fn frames(&self) -> usize {
        self.levels[0].len()
    }

    /// A pyramid whose every level equals the given full-resolution fields
    /// (after the per-level displacement rescaling). Used to drive the
    /// correction with externally known tilts.
    pub fn from_full_res(fields: &[TiltField<S>]) -> Self {
        let levels = (0..DET_SCALES_OUT)
            .map(|level| {
                let factor = Self::level_factor(level);
                fields
                    .iter()
                    .map(|f| {
                        let (h, w) = (f.h() / factor, f.w() / factor);
                        TiltField::from_fn(h, w, |y, x| {
                            let (dx, dy) = f.get(y * factor, x * factor);
                            (dx / S::of(factor as f64), dy / S::of(factor as f64))
                        })
                    })
                    .collect()
            })
            .collect();
        Self { levels }
    }
}

fn fields_to_tensor<S: Scalar>(fields: &[TiltField<S>]) -> Tensor<S> {
    let (h, w) = (fields[0].h(), fields[0].w());
    let mut data = Vec::with_capacity(fields.len() * h * w * 2);
    for f in fields {
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[fields.len(), h, w, 2], data)
}

fn tensor_to_fields<S: Scalar>(t: &Tensor<S>) -> Vec<TiltField<S>> {
    let s = t.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    assert_eq!(s[3], 2);
    (0..n)
        .map(|i| {
            let base = i * h * w * 2;
            let mut f = TiltField::zeros(h, w);
            f.data_mut().copy_from_slice(&t.data()[base..base + h * w * 2]);
            f
        })
        .collect()
}

/// Per-frame full-resolution tilt: each level upsampled with displacement
/// rescaling, then averaged across levels.
pub fn fuse_pyramid<S: Scalar>(pyr: &TiltPyramid<S>) -> Result<Vec<TiltField<S>>, NnError> {
    if pyr.levels.len() != DET_SCALES_OUT {
        return Err(NnError::ShapeMismatch(format!(
            "pyramid has {} levels, expected {}",
            pyr.levels.len(),
            DET_SCALES_OUT
        )));
    }
    let t = pyr.frames();
    let mut acc: Option<Tensor<S>> = None;
    for (level, fields) in pyr.levels.iter().enumerate() {
        if fields.len() != t {
            return Err(NnError::ShapeMismatch("pyramid frame counts differ per level".into()));
        }
        let factor = TiltPyramid::<S>::level_factor(level);
        let mut tens = fields_to_tensor(fields);
        let mut f = factor;
        while f > 1 {
            tens = upsample2x_fwd(&tens);
            f /= 2;
        }
        let scaled = tens.map(|v| v * S::of(factor as f64));
        match &mut acc {
            None => acc = Some(scaled),
            Some(a) => a.add_assign(&scaled),
        }
    }
    let mean = acc.unwrap().map(|v| v * S::of(1.0 / DET_SCALES_OUT as f64));
    Ok(tensor_to_fields(&mean))
}

/// Temporal mean of the fused full-resolution tilts: the stable tilt field.
pub fn average_tilt<S: Scalar>(pyr: &TiltPyramid<S>) -> Result<TiltField<S>, NnError> {
    let fused = fuse_pyramid(pyr)?;
    Ok(TiltField::mean_of(&fused).expect("non-empty pyramid"))
}

/// Warp frame i by `(mean - t_i)`, cancelling its deviation from the stable
/// geometry. Equal tilts on every frame yield the exact identity.
pub fn detilt_apply_fields<S: Scalar>(
    clip: &FrameClip<S>,
    tilts: &[TiltField<S>],
) -> Result<FrameClip<S>, NnError> {
    if tilts.len() != clip.t() {
        return Err(NnError::ShapeMismatch(format!(
            "{} tilts for {} frames",
            tilts.len(),
            clip.t()
        )));
    }
    if (tilts[0].h(), tilts[0].w()) != (clip.h(), clip.w()) {
        return Err(NnError::ShapeMismatch("tilt resolution differs from frames".into()));
    }
    let x = clip_to_tensor(clip);
    let deviation = sub_temporal_mean_fwd(&fields_to_tensor(tilts));
    let offsets = deviation.map(|v| -v);
    Ok(tensor_to_clip(&warp_offsets_fwd(&x, &offsets)))
}

/// Fuse the pyramid to full resolution and apply the correction.
pub fn detilt_apply<S: Scalar>(
    clip: &FrameClip<S>,
    pyr: &TiltPyramid<S>,
) -> Result<FrameClip<S>, NnError> {
    detilt_apply_fields(clip, &fuse_pyramid(pyr)?)
}

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DetNet<S> {
    pub cfg: DetConfig,
    stem: DsAlign<S>,
    wave1: WaveConv3d<S>,
    wave2: WaveConv3d<S>,
    wave3: WaveConv3d<S>,
    dec1: PartConv3d<S>,
    dec2: PartConv3d<S>,
    dec3: PartConv3d<S>,
    final_align: DsAlign<S>,
    head1: PointwiseConv<S>,
    head2: PointwiseConv<S>,
    head3: PointwiseConv<S>,
}

impl<S: Scalar> DetNet<S> {
    pub fn new(cfg: DetConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = crate::init::seeded(seed);
        let b = cfg.base_channels;
        let r = cfg.part_ratio;
        Ok(Self {
            stem: DsAlign::new(&mut rng, cfg.in_channels, b),
            wave1: WaveConv3d::new(&mut rng, b, 2 * b),
            wave2: WaveConv3d::new(&mut rng, 2 * b, 4 * b),
            wave3: WaveConv3d::new(&mut rng, 4 * b, 8 * b),
            dec1: PartConv3d::new(&mut rng, 12 * b, 4 * b, r),
            dec2: PartConv3d::new(&mut rng, 6 * b, 2 * b, r),
            dec3: PartConv3d::new(&mut rng, 3 * b, b, r),
            final_align: DsAlign::new(&mut rng, b, b),
            head1: PointwiseConv::zeroed(4 * b, 2),
            head2: PointwiseConv::zeroed(2 * b, 2),
            head3: PointwiseConv::zeroed(b, 2),
            cfg,
        })
    }

    fn validate_input(&self, t: usize, h: usize, w: usize, c: usize) -> Result<(), NnError> {
        if t < 2 {
            return Err(NnError::ShapeError("need at least 2 frames".into()));
        }
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(NnError::ShapeError(format!(
                "H and W must be positive multiples of 8, got {h}x{w}"
            )));
        }
        if c != self.cfg.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "clip has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Tape forward: returns the three tilt-level tensors (coarse to fine)
    /// and the corrected clip node.
    pub fn forward_t(
        &self,
        tape: &mut Tape<S>,
        x: VarId,
        ids: &mut Vec<VarId>,
    ) -> ([VarId; 3], VarId) {
        let e1 = self.stem.forward_t(tape, x, ids);
        let e2 = self.wave1.forward_t(tape, e1, ids);
        let e3 = self.wave2.forward_t(tape, e2, ids);
        let e4 = self.wave3.forward_t(tape, e3, ids);

        let u1 = tape.upsample2x(e4);
        let cat1 = tape.concat_c(u1, e3);
        let d1 = self.dec1.forward_t(tape, cat1, ids);
        let t1 = self.head1.forward_t(tape, d1, ids);

        let u2 = tape.upsample2x(d1);
        let cat2 = tape.concat_c(u2, e2);
        let d2 = self.dec2.forward_t(tape, cat2, ids);
        let t2 = self.head2.forward_t(tape, d2, ids);

        let u3 = tape.upsample2x(d2);
        let cat3 = tape.concat_c(u3, e1);
        let d3 = self.dec3.forward_t(tape, cat3, ids);
        let fa = self.final_align.forward_t(tape, d3, ids);
        let t3 = self.head3.forward_t(tape, fa, ids);

        // fuse levels into per-frame full-resolution tilt and correct
        let t1u = tape.upsample2x(t1);
        let t1u = tape.upsample2x(t1u);
        let t1s = tape.scale(t1u, 4.0);
        let t2u = tape.upsample2x(t2);
        let t2s = tape.scale(t2u, 2.0);
        let fused = tape.mean_many(&[t1s, t2s, t3]);
        let deviation = tape.sub_temporal_mean(fused);
        let offsets = tape.scale(deviation, -1.0);
        let corrected = tape.warp_offsets(x, offsets);
        ([t1, t2, t3], corrected)
    }

    /// Inference: multi-scale tilt pyramid plus the corrected clip.
    pub fn det_forward(&self, clip: &FrameClip<S>) -> Result<(TiltPyramid<S>, FrameClip<S>), NnError> {
        let (t, h, w, c) = clip.shape();
        self.validate_input(t, h, w, c)?;
        let mut tape = Tape::new();
        let x = tape.leaf(clip_to_tensor(clip));
        let mut ids = Vec::new();
        let ([t1, t2, t3], corrected) = self.forward_t(&mut tape, x, &mut ids);
        let pyr = TiltPyramid {
            levels: vec![
                tensor_to_fields(tape.value(t1)),
                tensor_to_fields(tape.value(t2)),
                tensor_to_fields(tape.value(t3)),
            ],
        };
        let mut out = tensor_to_clip(tape.value(corrected));
        out.frame_rate = clip.frame_rate;
        out.meta = clip.meta.clone();
        Ok((pyr, out))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = prefixed("stem", self.stem.params());
        v.extend(prefixed("wave1", self.wave1.params()));
        v.extend(prefixed("wave2", self.wave2.params()));
        v.extend(prefixed("wave3", self.wave3.params()));
        v.extend(prefixed("dec1", self.dec1.params()));
        v.extend(prefixed("head1", self.head1.params()));
        v.extend(prefixed("dec2", self.dec2.params()));
        v.extend(prefixed("head2", self.head2.params()));
        v.extend(prefixed("dec3", self.dec3.params()));
        v.extend(prefixed("final_align", self.final_align.params()));
        v.extend(prefixed("head3", self.head3.params()));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut v = prefixed_mut("stem", self.stem.params_mut());
        v.extend(prefixed_mut("wave1", self.wave1.params_mut()));
        v.extend(prefixed_mut("wave2", self.wave2.params_mut()));
        v.extend(prefixed_mut("wave3", self.wave3.params_mut()));
        v.extend(prefixed_mut("dec1", self.dec1.params_mut()));
        v.extend(prefixed_mut("head1", self.head1.params_mut()));
        v.extend(prefixed_mut("dec2", self.dec2.params_mut()));
        v.extend(prefixed_mut("head2", self.head2.params_mut()));
        v.extend(prefixed_mut("dec3", self.dec3.params_mut()));
        v.extend(prefixed_mut("final_align", self.final_align.params_mut()));
        v.extend(prefixed_mut("head3", self.head3.params_mut()));
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        checkpoint::save(path, &cfg, &self.named_params())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let (cfg_json, params) = checkpoint::load::<S>(path)?;
        let cfg: DetConfig = serde_json::from_str(&cfg_json)
            .map_err(|e| NnError::Checkpoint(format!("bad embedded config: {e}")))?;
        let mut net = Self::new(cfg, 0)?;
        checkpoint::assign(net.named_params_mut(), params)?;
        Ok(net)
    }
}

// forward_t leafs parameters in the same order as named_params(); the
// in-order zip is what optimizers rely on.

#[cfg(test)]
mod tests {
    use super::*;
    use pmr_core::synth;

    #[test]
    fn pyramid_shapes_and_identity_at_init() {
        let cfg = DetConfig { base_channels: 4, in_channels: 1, ..Default::default() };
        let net = DetNet::<f32>::new(cfg, 7).unwrap();
        let clip = synth::textured_clip::<f32>(3, 16, 24, 1, 5);
        let (pyr, corrected) = net.det_forward(&clip).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!((pyr.levels[0][0].h(), pyr.levels[0][0].w()), (4, 6));
        assert_eq!((pyr.levels[1][0].h(), pyr.levels[1][0].w()), (8, 12));
        assert_eq!((pyr.levels[2][0].h(), pyr.levels[2][0].w()), (16, 24));
        assert_eq!(pyr.frames(), 3);
        // zero-initialized tilt heads make the correction the exact identity
        assert_eq!(corrected, clip);
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = DetConfig { base_channels: 4, in_channels: 1, ..Default::default() };
        let net = DetNet::<f32>::new(cfg, 7).unwrap();
        let clip = synth::textured_clip::<f32>(3, 12, 12, 1, 5);
        assert!(matches!(net.det_forward(&clip), Err(NnError::ShapeError(_))));
    }

    #[test]
    fn average_tilt_constant_and_antisymmetric() {
        // constant (0.5, 0) full-resolution tilt on every frame and level
        let full: Vec<TiltField<f64>> =
            (0..2).map(|_| TiltField::from_fn(16, 16, |_, _| (0.5, 0.0))).collect();
        let pyr = TiltPyramid::from_full_res(&full);
        let avg = average_tilt(&pyr).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (dx, dy) = avg.get(y, x);
                assert!((dx - 0.5).abs() < 1e-9, "dx {dx}");
                assert!(dy.abs() < 1e-9);
            }
        }

        let plus = synth::smooth_flow(16, 16, 0.7, 3.0, 3);
        let minus = plus.scaled(-1.0);
        let pyr = TiltPyramid::from_full_res(&[plus, minus]);
        let avg = average_tilt(&pyr).unwrap();
        for v in avg.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_matches_explicit_upsample_and_mean() {
        let levels: Vec<Vec<TiltField<f64>>> = (0..3)
            .map(|level| {
                let side = 4usize << level;
                vec![synth::random_flow(side, side, 1.0, 30 + level as u64)]
            })
            .collect();
        let pyr = TiltPyramid { levels: levels.clone() };
        let fused = fuse_pyramid(&pyr).unwrap();

        let mut expect = Tensor::<f64>::zeros(&[1, 16, 16, 2]);
        for (level, fields) in levels.iter().enumerate() {
            let factor = TiltPyramid::<f64>::level_factor(level);
            let mut t = fields_to_tensor(fields);
            let mut f = factor;
            while f > 1 {
                t = upsample2x_fwd(&t);
                f /= 2;
            }
            expect.add_assign(&t.map(|v| v * factor as f64));
        }
        let expect = expect.map(|v| v / 3.0);
        for (a, b) in fused[0].data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_tilts_apply_as_identity() {
        let clip = synth::textured_clip::<f64>(3, 16, 16, 1, 11);
        let shared = synth::smooth_flow(16, 16, 1.0, 3.0, 8);
        let tilts = vec![shared; 3];
        let out = detilt_apply_fields(&clip, &tilts).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn oracle_tilts_improve_static_clip() {
        let clean = synth::static_clip::<f64>(6, 32, 32, 1, 19);
        let params = pmr_core::turbsim::TurbulenceParams {
            sigma_tilt: 1.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            seed: 5,
            ..Default::default()
        };
        let bundle = pmr_core::turbsim::degrade(&clean, &params).unwrap();
        let corrected = detilt_apply_fields(&bundle.degraded, &bundle.true_tilts).unwrap();
        let interior = |c: &FrameClip<f64>| c.crop(8, 8, 16, 16).unwrap();
        let before = pmr_core::media::psnr(&interior(&bundle.degraded), &interior(&clean)).unwrap();
        let after = pmr_core::media::psnr(&interior(&corrected), &interior(&clean)).unwrap();
        assert!(after > before, "oracle de-tilt must improve PSNR: {after} vs {before}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DetConfig { base_channels: 4, in_channels: 1, ..Default::default() };
        let net = DetNet::<f32>::new(cfg, 3).unwrap();
        let path = dir.path().join("det.ckpt");
        net.save(&path).unwrap();
        let back = DetNet::<f32>::load(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        for ((na, a), (nb, b)) in net.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }
}
