//! Building blocks shared by the de-tilt and de-blur networks.
//!
//! Contract for every block: `forward_t` registers its parameters as tape
//! leaves in exactly the order `params()` / `params_mut()` enumerate them,
//! so optimizers can zip gradients with parameters positionally.

use crate::init;
use crate::ops::dims4;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::NnError;
use pmr_core::Scalar;
use rand_chacha::ChaCha8Rng;

/// Run a block's tape forward on a bare tensor, discarding gradients.
fn eval_block<S: Scalar>(
    x: &Tensor<S>,
    f: impl FnOnce(&mut Tape<S>, VarId, &mut Vec<VarId>) -> VarId,
) -> Tensor<S> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let mut ids = Vec::new();
    let y = f(&mut tape, xid, &mut ids);
    tape.value(y).clone()
}

pub(crate) fn prefixed<'a, S>(
    prefix: &str,
    v: Vec<(String, &'a Tensor<S>)>,
) -> Vec<(String, &'a Tensor<S>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a, S>(
    prefix: &str,
    v: Vec<(String, &'a mut Tensor<S>)>,
) -> Vec<(String, &'a mut Tensor<S>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

macro_rules! own_params {
    ($self:ident, $($field:ident),+) => {{
        vec![$((stringify!($field).to_string(), &$self.$field)),+]
    }};
}

macro_rules! own_params_mut {
    ($self:ident, $($field:ident),+) => {{
        vec![$((stringify!($field).to_string(), &mut $self.$field)),+]
    }};
}

// ---------------------------------------------------------------------------
// depthwise-separable 3-D convolution
// ---------------------------------------------------------------------------

/// Depthwise 3x3x3 followed by a pointwise projection; spatial stride on the
/// depthwise step.
#[derive(Debug, Clone)]
pub struct DsConv3d<S> {
    dw_w: Tensor<S>,
    dw_b: Tensor<S>,
    pw_w: Tensor<S>,
    pw_b: Tensor<S>,
    cin: usize,
    stride: usize,
}

impl<S: Scalar> DsConv3d<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            dw_w: init::conv_weight(rng, cin, 1, 3, 3, 3),
            dw_b: init::zeros(&[cin]),
            pw_w: init::conv_weight(rng, cout, cin, 1, 1, 1),
            pw_b: init::zeros(&[cout]),
            cin,
            stride,
        }
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let dw_w = tape.leaf(self.dw_w.clone());
        let dw_b = tape.leaf(self.dw_b.clone());
        let pw_w = tape.leaf(self.pw_w.clone());
        let pw_b = tape.leaf(self.pw_b.clone());
        ids.extend([dw_w, dw_b, pw_w, pw_b]);
        let mid = tape.conv3d(x, dw_w, dw_b, self.cin, self.stride, self.stride);
        tape.conv3d(mid, pw_w, pw_b, 1, 1, 1)
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        own_params!(self, dw_w, dw_b, pw_w, pw_b)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        own_params_mut!(self, dw_w, dw_b, pw_w, pw_b)
    }
}

// ---------------------------------------------------------------------------
// pointwise projection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PointwiseConv<S> {
    w: Tensor<S>,
    b: Tensor<S>,
}

impl<S: Scalar> PointwiseConv<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self { w: init::conv_weight(rng, cout, cin, 1, 1, 1), b: init::zeros(&[cout]) }
    }

    /// Zero weights and bias: the projection, and anything residual on top of
    /// it, starts as the exact identity.
    pub fn zeroed(cin: usize, cout: usize) -> Self {
        Self { w: init::zeros(&[cout, cin, 1, 1, 1]), b: init::zeros(&[cout]) }
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        ids.extend([w, b]);
        tape.conv3d(x, w, b, 1, 1, 1)
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        own_params!(self, w, b)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        own_params_mut!(self, w, b)
    }
}

// ---------------------------------------------------------------------------
// DS_align
// ---------------------------------------------------------------------------

/// Feature extraction, offset prediction, feature warping, refinement:
/// ds-conv -> 3-D conv emitting 2 offset channels -> backward warp -> ds-conv.
#[derive(Debug, Clone)]
pub struct DsAlign<S> {
    conv_in: DsConv3d<S>,
    offset_w: Tensor<S>,
    offset_b: Tensor<S>,
    conv_out: DsConv3d<S>,
}

impl<S: Scalar> DsAlign<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        let conv_in = DsConv3d::new(rng, cin, cout, 1);
        // small offsets at init keep early feature warps gentle
        let offset_w = init::conv_weight::<S>(rng, 2, cout, 3, 3, 3).map(|v| v * S::of(0.1));
        let conv_out = DsConv3d::new(rng, cout, cout, 1);
        Self { conv_in, offset_w, offset_b: init::zeros(&[2]), conv_out }
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let f = self.conv_in.forward_t(tape, x, ids);
        let ow = tape.leaf(self.offset_w.clone());
        let ob = tape.leaf(self.offset_b.clone());
        ids.extend([ow, ob]);
        let off = tape.conv3d(f, ow, ob, 1, 1, 1);
        let warped = tape.warp_offsets(f, off);
        self.conv_out.forward_t(tape, warped, ids)
    }

    /// Inference entry point with the shape contract enforced.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.conv_in.cin {
            return Err(NnError::ShapeMismatch(format!(
                "ds_align expects (T,H,W,{}) input, got {:?}",
                self.conv_in.cin, s
            )));
        }
        Ok(eval_block(x, |tape, xid, ids| self.forward_t(tape, xid, ids)))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = prefixed("conv_in", self.conv_in.params());
        v.push(("offset_w".into(), &self.offset_w));
        v.push(("offset_b".into(), &self.offset_b));
        v.extend(prefixed("conv_out", self.conv_out.params()));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut v = prefixed_mut("conv_in", self.conv_in.params_mut());
        v.push(("offset_w".into(), &mut self.offset_w));
        v.push(("offset_b".into(), &mut self.offset_b));
        v.extend(prefixed_mut("conv_out", self.conv_out.params_mut()));
        v
    }
}

// ---------------------------------------------------------------------------
// Wave_conv3D
// ---------------------------------------------------------------------------

/// Per-frame one-level Haar decomposition (4 subbands on channels), then a
/// depthwise-separable conv, re-stacked along t. Halves H and W.
#[derive(Debug, Clone)]
pub struct WaveConv3d<S> {
    conv: DsConv3d<S>,
}

impl<S: Scalar> WaveConv3d<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self { conv: DsConv3d::new(rng, 4 * cin, cout, 1) }
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let bands = tape.haar2d(x);
        self.conv.forward_t(tape, bands, ids)
    }

    /// Inference entry point; odd spatial dimensions are rejected.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(NnError::OddDimensions { h: s.get(1).copied().unwrap_or(0), w: s.get(2).copied().unwrap_or(0) });
        }
        Ok(eval_block(x, |tape, xid, ids| self.forward_t(tape, xid, ids)))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        prefixed("conv", self.conv.params())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        prefixed_mut("conv", self.conv.params_mut())
    }
}

// ---------------------------------------------------------------------------
// Part_conv3D
// ---------------------------------------------------------------------------

/// Depthwise 3-D conv on the first `part` channels, pass-through of the rest,
/// then a depthwise-separable conv over the concatenation.
#[derive(Debug, Clone)]
pub struct PartConv3d<S> {
    part: usize,
    part_w: Tensor<S>,
    part_b: Tensor<S>,
    conv: DsConv3d<S>,
}

impl<S: Scalar> PartConv3d<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, part_ratio: f64) -> Self {
        let part = ((part_ratio * cin as f64).floor() as usize).clamp(1, cin);
        Self {
            part,
            part_w: init::conv_weight(rng, part, 1, 3, 3, 3),
            part_b: init::zeros(&[part]),
            conv: DsConv3d::new(rng, cin, cout, 1),
        }
    }

    pub fn part_channels(&self) -> usize {
        self.part
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let (_, _, _, c) = dims4(tape.value(x));
        let pw = tape.leaf(self.part_w.clone());
        let pb = tape.leaf(self.part_b.clone());
        ids.extend([pw, pb]);
        let head = tape.slice_c(x, 0, self.part);
        let convolved = tape.conv3d(head, pw, pb, self.part, 1, 1);
        let merged = if self.part < c {
            let rest = tape.slice_c(x, self.part, c);
            tape.concat_c(convolved, rest)
        } else {
            convolved
        };
        self.conv.forward_t(tape, merged, ids)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.conv.cin {
            return Err(NnError::ShapeMismatch(format!(
                "part_conv3d expects (T,H,W,{}) input, got {:?}",
                self.conv.cin, s
            )));
        }
        Ok(eval_block(x, |tape, xid, ids| self.forward_t(tape, xid, ids)))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = own_params!(self, part_w, part_b);
        v.extend(prefixed("conv", self.conv.params()));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut v = own_params_mut!(self, part_w, part_b);
        v.extend(prefixed_mut("conv", self.conv.params_mut()));
        v
    }
}

// ---------------------------------------------------------------------------
// STC transformer block
// ---------------------------------------------------------------------------

/// Spatio-temporal-channel attention block: pre-norm, grouped 3-D conv plus
/// pointwise mixing into Q/K/V (C/3 channels each), per-head channel
/// attention over all T*H*W positions, zero-initialized output projection,
/// then a gated feed-forward sublayer. Identity at initialization.
#[derive(Debug, Clone)]
pub struct StcBlock<S> {
    c: usize,
    heads: usize,
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    qkv_gw: Tensor<S>,
    qkv_gb: Tensor<S>,
    qkv_pw: Tensor<S>,
    qkv_pb: Tensor<S>,
    tau: Tensor<S>,
    proj: PointwiseConv<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    ff_in: PointwiseConv<S>,
    ff_dw_w: Tensor<S>,
    ff_dw_b: Tensor<S>,
    ff_out: PointwiseConv<S>,
}

const LN_EPS: f64 = 1e-6;

impl<S: Scalar> StcBlock<S> {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> Self {
        assert!(c % (3 * heads) == 0, "channels must divide 3*heads");
        Self {
            c,
            heads,
            ln1_g: Tensor::full(&[c], S::one()),
            ln1_b: init::zeros(&[c]),
            // temporal/spatial fusion is depthwise; channel fusion happens in
            // the pointwise mixing right after
            qkv_gw: init::conv_weight(rng, c, 1, 3, 3, 3),
            qkv_gb: init::zeros(&[c]),
            qkv_pw: init::conv_weight(rng, c, c, 1, 1, 1),
            qkv_pb: init::zeros(&[c]),
            tau: Tensor::full(&[heads], S::one()),
            proj: PointwiseConv::zeroed(c / 3, c),
            ln2_g: Tensor::full(&[c], S::one()),
            ln2_b: init::zeros(&[c]),
            ff_in: PointwiseConv::new(rng, c, 4 * c),
            ff_dw_w: init::conv_weight(rng, 4 * c, 1, 3, 3, 3),
            ff_dw_b: init::zeros(&[4 * c]),
            ff_out: PointwiseConv::zeroed(2 * c, c),
        }
    }

    /// Pre-norm, QKV extraction and the row-stochastic channel attention.
    /// Returns the attention matrices `(heads, c', c')` and the per-head V.
    fn attention_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> (VarId, VarId) {
        let c = self.c;
        let ln1_g = tape.leaf(self.ln1_g.clone());
        let ln1_b = tape.leaf(self.ln1_b.clone());
        ids.extend([ln1_g, ln1_b]);
        let n1 = tape.layer_norm_c(x, ln1_g, ln1_b, LN_EPS);

        let gw = tape.leaf(self.qkv_gw.clone());
        let gb = tape.leaf(self.qkv_gb.clone());
        ids.extend([gw, gb]);
        let fused = tape.conv3d(n1, gw, gb, c, 1, 1);
        let pw = tape.leaf(self.qkv_pw.clone());
        let pb = tape.leaf(self.qkv_pb.clone());
        ids.extend([pw, pb]);
        let mixed = tape.conv3d(fused, pw, pb, 1, 1, 1);

        let third = c / 3;
        let q = tape.slice_c(mixed, 0, third);
        let k = tape.slice_c(mixed, third, 2 * third);
        let v = tape.slice_c(mixed, 2 * third, c);
        let qh = tape.to_heads(q, self.heads);
        let kh = tape.to_heads(k, self.heads);
        let vh = tape.to_heads(v, self.heads);
        let qn = tape.l2_normalize_rows(qh);
        let kn = tape.l2_normalize_rows(kh);
        let logits = tape.bmm(qn, kn, true);
        let tau = tape.leaf(self.tau.clone());
        ids.push(tau);
        let scaled = tape.div_head_scalar(logits, tau);
        (tape.softmax_rows(scaled), vh)
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: VarId, ids: &mut Vec<VarId>) -> VarId {
        let (t, h, w, c) = dims4(tape.value(x));
        assert_eq!(c, self.c, "stc channel mismatch");
        let (att, vh) = self.attention_t(tape, x, ids);
        let mixed_v = tape.bmm(att, vh, false);
        let grid = tape.from_heads(mixed_v, t, h, w);
        let projected = self.proj.forward_t(tape, grid, ids);
        let y = tape.add(x, projected);

        let ln2_g = tape.leaf(self.ln2_g.clone());
        let ln2_b = tape.leaf(self.ln2_b.clone());
        ids.extend([ln2_g, ln2_b]);
        let n2 = tape.layer_norm_c(y, ln2_g, ln2_b, LN_EPS);
        let expanded = self.ff_in.forward_t(tape, n2, ids);
        let dw_w = tape.leaf(self.ff_dw_w.clone());
        let dw_b = tape.leaf(self.ff_dw_b.clone());
        ids.extend([dw_w, dw_b]);
        let local = tape.conv3d(expanded, dw_w, dw_b, 4 * c, 1, 1);
        let gate_in = tape.slice_c(local, 0, 2 * c);
        let gate_by = tape.slice_c(local, 2 * c, 4 * c);
        let activated = tape.gelu(gate_in);
        let gated = tape.mul(activated, gate_by);
        let condensed = self.ff_out.forward_t(tape, gated, ids);
        tape.add(y, condensed)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.c {
            return Err(NnError::ConfigError(format!(
                "stc block built for {} channels, input has {:?}",
                self.c, s
            )));
        }
        Ok(eval_block(x, |tape, xid, ids| self.forward_t(tape, xid, ids)))
    }

    /// The row-stochastic attention matrices `(heads, c', c')` for an input,
    /// exposed for verification.
    pub fn attention_matrix(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.c {
            return Err(NnError::ConfigError(format!(
                "stc block built for {} channels, input has {:?}",
                self.c, s
            )));
        }
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let mut ids = Vec::new();
        let (att, _) = self.attention_t(&mut tape, xid, &mut ids);
        Ok(tape.value(att).clone())
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = own_params!(self, ln1_g, ln1_b, qkv_gw, qkv_gb, qkv_pw, qkv_pb, tau);
        v.extend(prefixed("proj", self.proj.params()));
        v.extend(own_params!(self, ln2_g, ln2_b));
        v.extend(prefixed("ff_in", self.ff_in.params()));
        v.extend(own_params!(self, ff_dw_w, ff_dw_b));
        v.extend(prefixed("ff_out", self.ff_out.params()));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut v = own_params_mut!(self, ln1_g, ln1_b, qkv_gw, qkv_gb, qkv_pw, qkv_pb, tau);
        v.extend(prefixed_mut("proj", self.proj.params_mut()));
        v.extend(own_params_mut!(self, ln2_g, ln2_b));
        v.extend(prefixed_mut("ff_in", self.ff_in.params_mut()));
        v.extend(own_params_mut!(self, ff_dw_w, ff_dw_b));
        v.extend(prefixed_mut("ff_out", self.ff_out.params_mut()));
        v
    }
}

/// Total element count across a block's parameters.
pub fn block_param_count<S: Scalar>(params: &[(String, &Tensor<S>)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}
