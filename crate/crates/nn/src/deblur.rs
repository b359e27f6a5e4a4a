//! DEB: three-resolution hybrid encoder-decoder removing residual
//! non-uniform blur. Encoder levels run [DS_align, STC, STC, STC] with block
//! counts [1, 1, 2, 4]; the decoder runs [STC, STC, DS_align] with counts
//! [2, 1, 1]; skips concatenate and fuse through pointwise projections. The
//! network predicts a residual added to its input (clamped to [0, 1]), with
//! a zero-initialized output projection so it starts as the exact identity.

use crate::blocks::{prefixed, prefixed_mut, DsAlign, DsConv3d, PointwiseConv, StcBlock};
use crate::checkpoint;
use crate::tape::{Tape, VarId};
use crate::tensor::{clip_to_tensor, tensor_to_clip, Tensor};
use crate::NnError;
use pmr_core::media::FrameClip;
use pmr_core::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENC_BLOCKS: [usize; 4] = [1, 1, 2, 4];
pub const DEC_BLOCKS: [usize; 3] = [2, 1, 1];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DebConfig {
    pub base_channels: usize,
    /// Attention heads, shared across levels.
    pub heads: usize,
    pub in_channels: usize,
    /// Predict a correction added to the input rather than the frame itself.
    pub residual_output: bool,
}

impl Default for DebConfig {
    fn default() -> Self {
        Self { base_channels: 12, heads: 2, in_channels: 3, residual_output: true }
    }
}

impl DebConfig {
    /// Channel widths of the three resolutions plus the bottleneck.
    pub fn widths(&self) -> [usize; 3] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b]
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0 {
            return Err(NnError::ConfigError("in_channels must be positive".into()));
        }
        for c in self.widths() {
            if c % (3 * self.heads) != 0 {
                return Err(NnError::ConfigError(format!(
                    "level width {c} must be divisible by 3*heads = {}",
                    3 * self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DebNet<S> {
    pub cfg: DebConfig,
    enc1: DsAlign<S>,
    down1: DsConv3d<S>,
    enc2: Vec<StcBlock<S>>,
    down2: DsConv3d<S>,
    enc3: Vec<StcBlock<S>>,
    enc4: Vec<StcBlock<S>>,
    fuse3: PointwiseConv<S>,
    dec3: Vec<StcBlock<S>>,
    fuse2: PointwiseConv<S>,
    dec2: Vec<StcBlock<S>>,
    fuse1: PointwiseConv<S>,
    dec1: DsAlign<S>,
    out_proj: PointwiseConv<S>,
}

impl<S: Scalar> DebNet<S> {
    pub fn new(cfg: DebConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = crate::init::seeded(seed);
        let [c1, c2, c3] = cfg.widths();
        let heads = cfg.heads;
        let stack = |rng: &mut _, n: usize, c: usize| -> Vec<StcBlock<S>> {
            (0..n).map(|_| StcBlock::new(rng, c, heads)).collect()
        };
        Ok(Self {
            enc1: DsAlign::new(&mut rng, cfg.in_channels, c1),
            down1: DsConv3d::new(&mut rng, c1, c2, 2),
            enc2: stack(&mut rng, ENC_BLOCKS[1], c2),
            down2: DsConv3d::new(&mut rng, c2, c3, 2),
            enc3: stack(&mut rng, ENC_BLOCKS[2], c3),
            enc4: stack(&mut rng, ENC_BLOCKS[3], c3),
            fuse3: PointwiseConv::new(&mut rng, 2 * c3, c3),
            dec3: stack(&mut rng, DEC_BLOCKS[0], c3),
            fuse2: PointwiseConv::new(&mut rng, c3 + c2, c2),
            dec2: stack(&mut rng, DEC_BLOCKS[1], c2),
            fuse1: PointwiseConv::new(&mut rng, c2 + c1, c1),
            dec1: DsAlign::new(&mut rng, c1, c1),
            out_proj: PointwiseConv::zeroed(c1, cfg.in_channels),
            cfg,
        })
    }

    fn validate_input(&self, t: usize, h: usize, w: usize, c: usize) -> Result<(), NnError> {
        if t == 0 {
            return Err(NnError::ShapeError("empty clip".into()));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NnError::ShapeError(format!(
                "H and W must be multiples of 4, got {h}x{w}"
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

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let e1 = self.enc1.forward_t(tape, x, ids);
        let mut e2 = self.down1.forward_t(tape, e1, ids);
        for blk in &self.enc2 {
            e2 = blk.forward_t(tape, e2, ids);
        }
        let mut e3 = self.down2.forward_t(tape, e2, ids);
        for blk in &self.enc3 {
            e3 = blk.forward_t(tape, e3, ids);
        }
        let mut e4 = e3;
        for blk in &self.enc4 {
            e4 = blk.forward_t(tape, e4, ids);
        }

        let cat3 = tape.concat_c(e4, e3);
        let mut d3 = self.fuse3.forward_t(tape, cat3, ids);
        for blk in &self.dec3 {
            d3 = blk.forward_t(tape, d3, ids);
        }
        let u2 = tape.upsample2x(d3);
        let cat2 = tape.concat_c(u2, e2);
        let mut d2 = self.fuse2.forward_t(tape, cat2, ids);
        for blk in &self.dec2 {
            d2 = blk.forward_t(tape, d2, ids);
        }
        let u1 = tape.upsample2x(d2);
        let cat1 = tape.concat_c(u1, e1);
        let f1 = self.fuse1.forward_t(tape, cat1, ids);
        let d1 = self.dec1.forward_t(tape, f1, ids);
        let r = self.out_proj.forward_t(tape, d1, ids);
        let pre = if self.cfg.residual_output { tape.add(x, r) } else { r };
        tape.clamp01(pre)
    }

    pub fn deb_forward(&self, clip: &FrameClip<S>) -> Result<FrameClip<S>, NnError> {
        let (t, h, w, c) = clip.shape();
        self.validate_input(t, h, w, c)?;
        let mut tape = Tape::new();
        let x = tape.leaf(clip_to_tensor(clip));
        let mut ids = Vec::new();
        let y = self.forward_t(&mut tape, x, &mut ids);
        let mut out = tensor_to_clip(tape.value(y));
        out.frame_rate = clip.frame_rate;
        out.meta = clip.meta.clone();
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = prefixed("enc1", self.enc1.params());
        v.extend(prefixed("down1", self.down1.params()));
        for (i, blk) in self.enc2.iter().enumerate() {
            v.extend(prefixed(&format!("enc2.{i}"), blk.params()));
        }
        v.extend(prefixed("down2", self.down2.params()));
        for (i, blk) in self.enc3.iter().enumerate() {
            v.extend(prefixed(&format!("enc3.{i}"), blk.params()));
        }
        for (i, blk) in self.enc4.iter().enumerate() {
            v.extend(prefixed(&format!("enc4.{i}"), blk.params()));
        }
        v.extend(prefixed("fuse3", self.fuse3.params()));
        for (i, blk) in self.dec3.iter().enumerate() {
            v.extend(prefixed(&format!("dec3.{i}"), blk.params()));
        }
        v.extend(prefixed("fuse2", self.fuse2.params()));
        for (i, blk) in self.dec2.iter().enumerate() {
            v.extend(prefixed(&format!("dec2.{i}"), blk.params()));
        }
        v.extend(prefixed("fuse1", self.fuse1.params()));
        v.extend(prefixed("dec1", self.dec1.params()));
        v.extend(prefixed("out_proj", self.out_proj.params()));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut v = prefixed_mut("enc1", self.enc1.params_mut());
        v.extend(prefixed_mut("down1", self.down1.params_mut()));
        for (i, blk) in self.enc2.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("enc2.{i}"), blk.params_mut()));
        }
        v.extend(prefixed_mut("down2", self.down2.params_mut()));
        for (i, blk) in self.enc3.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("enc3.{i}"), blk.params_mut()));
        }
        for (i, blk) in self.enc4.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("enc4.{i}"), blk.params_mut()));
        }
        v.extend(prefixed_mut("fuse3", self.fuse3.params_mut()));
        for (i, blk) in self.dec3.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("dec3.{i}"), blk.params_mut()));
        }
        v.extend(prefixed_mut("fuse2", self.fuse2.params_mut()));
        for (i, blk) in self.dec2.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("dec2.{i}"), blk.params_mut()));
        }
        v.extend(prefixed_mut("fuse1", self.fuse1.params_mut()));
        v.extend(prefixed_mut("dec1", self.dec1.params_mut()));
        v.extend(prefixed_mut("out_proj", self.out_proj.params_mut()));
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
        let cfg: DebConfig = serde_json::from_str(&cfg_json)
            .map_err(|e| NnError::Checkpoint(format!("bad embedded config: {e}")))?;
        let mut net = Self::new(cfg, 0)?;
        checkpoint::assign(net.named_params_mut(), params)?;
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// closed-form parameter count
// ---------------------------------------------------------------------------

fn ds_conv_params(cin: usize, cout: usize) -> usize {
    // depthwise 3x3x3 + bias, pointwise + bias
    cin * 27 + cin + cout * cin + cout
}

fn ds_align_params(cin: usize, cout: usize) -> usize {
    ds_conv_params(cin, cout) + 2 * cout * 27 + 2 + ds_conv_params(cout, cout)
}

fn pointwise_params(cin: usize, cout: usize) -> usize {
    cout * cin + cout
}

fn stc_params(c: usize, heads: usize) -> usize {
    let ln = 2 * c;
    let qkv_grouped = c * 27 + c;
    let qkv_pointwise = c * c + c;
    let tau = heads;
    let proj = pointwise_params(c / 3, c);
    let ff_in = pointwise_params(c, 4 * c);
    let ff_dw = 4 * c * 27 + 4 * c;
    let ff_out = pointwise_params(2 * c, c);
    ln + qkv_grouped + qkv_pointwise + tau + proj + ln + ff_in + ff_dw + ff_out
}

/// Exact trainable-parameter total, derived from the per-block closed forms
/// rather than by instantiating the network.
pub fn count_params(cfg: &DebConfig) -> usize {
    let [c1, c2, c3] = cfg.widths();
    let mut total = ds_align_params(cfg.in_channels, c1);
    total += ds_conv_params(c1, c2); // down1
    total += ENC_BLOCKS[1] * stc_params(c2, cfg.heads);
    total += ds_conv_params(c2, c3); // down2
    total += ENC_BLOCKS[2] * stc_params(c3, cfg.heads);
    total += ENC_BLOCKS[3] * stc_params(c3, cfg.heads);
    total += pointwise_params(2 * c3, c3); // fuse3
    total += DEC_BLOCKS[0] * stc_params(c3, cfg.heads);
    total += pointwise_params(c3 + c2, c2); // fuse2
    total += DEC_BLOCKS[1] * stc_params(c2, cfg.heads);
    total += pointwise_params(c2 + c1, c1); // fuse1
    total += ds_align_params(c1, c1); // dec1
    total += pointwise_params(c1, cfg.in_channels); // out_proj
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmr_core::synth;

    fn tiny_cfg() -> DebConfig {
        DebConfig { base_channels: 6, heads: 1, in_channels: 1, residual_output: true }
    }

    #[test]
    fn identity_at_init_and_shape_contract() {
        let net = DebNet::<f32>::new(tiny_cfg(), 2).unwrap();
        let clip = synth::textured_clip::<f32>(4, 16, 16, 1, 4);
        let out = net.deb_forward(&clip).unwrap();
        assert_eq!(out, clip, "zero-initialized residual head must be the identity");

        let odd = synth::textured_clip::<f32>(2, 10, 10, 1, 4);
        assert!(matches!(net.deb_forward(&odd), Err(NnError::ShapeError(_))));
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for cfg in [
            tiny_cfg(),
            DebConfig::default(),
            DebConfig { base_channels: 6, heads: 2, in_channels: 3, residual_output: true },
        ] {
            let net = DebNet::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(count_params(&cfg), net.param_count(), "cfg {cfg:?}");
        }
    }

    #[test]
    fn count_scaling_and_shape_independence() {
        let a = DebConfig { base_channels: 6, heads: 1, in_channels: 1, residual_output: true };
        let b = DebConfig { base_channels: 12, heads: 1, in_channels: 1, residual_output: true };
        // pointwise convolution cost is quadratic in width
        let pw_a = pointwise_params(a.widths()[2], a.widths()[2]);
        let pw_b = pointwise_params(b.widths()[2], b.widths()[2]);
        assert_eq!(pw_b - b.widths()[2], 4 * (pw_a - a.widths()[2]));
        // counts do not involve the input geometry at all
        assert_eq!(count_params(&a), count_params(&a));
        assert!(count_params(&b) > count_params(&a));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = DebConfig { base_channels: 8, heads: 2, in_channels: 1, residual_output: true };
        assert!(matches!(DebNet::<f32>::new(cfg, 0), Err(NnError::ConfigError(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = DebNet::<f32>::new(tiny_cfg(), 9).unwrap();
        let path = dir.path().join("deb.ckpt");
        net.save(&path).unwrap();
        let back = DebNet::<f32>::load(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        for ((na, a), (nb, b)) in net.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }
}
