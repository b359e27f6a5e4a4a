//! Structured forward kernels and their tape-recorded counterparts. The
//! standalone `*_fwd` functions are reused by inference-only code so the pure
//! and differentiated paths compute bit-identical values.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use pmr_core::Scalar;

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// Grouped 3-D convolution over a `(T, H, W, C)` stack, kernel `(Cout,
/// Cin/groups, kt, kh, kw)`, zero padding `k/2` per axis, temporal stride 1,
/// spatial stride `(sh, sw)`.
pub fn conv3d_fwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    groups: usize,
    sh: usize,
    sw: usize,
) -> Tensor<S> {
    let (t, h, wd, cin) = dims4(x);
    let ws = w.shape();
    let (cout, cing, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(cin, cing * groups, "conv3d channel/group mismatch");
    assert_eq!(cout % groups, 0, "conv3d output channels not divisible by groups");
    assert_eq!(b.numel(), cout);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = (wd + 2 * pw - kw) / sw + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[t, ho, wo, cout]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();

    // pointwise fast path: a plain per-position channel matmul
    if kt == 1 && kh == 1 && kw == 1 && groups == 1 && sh == 1 && sw == 1 {
        for p in 0..t * h * wd {
            let row = &xd[p * cin..(p + 1) * cin];
            for co in 0..cout {
                let wrow = &wdat[co * cin..(co + 1) * cin];
                let mut acc = b.data()[co].f64();
                for ci in 0..cin {
                    acc += row[ci].f64() * wrow[ci].f64();
                }
                od[p * cout + co] = S::of(acc);
            }
        }
        return out;
    }

    let khw = kt * kh * kw;
    for to in 0..t {
        let dt_lo = pt.saturating_sub(to);
        let dt_hi = kt.min(t + pt - to);
        for yo in 0..ho {
            let ys = yo * sh;
            let dy_lo = ph.saturating_sub(ys);
            let dy_hi = kh.min(h + ph - ys);
            for xo in 0..wo {
                let xs = xo * sw;
                let dx_lo = pw.saturating_sub(xs);
                let dx_hi = kw.min(wd + pw - xs);
                let obase = ((to * ho + yo) * wo + xo) * cout;
                for co in 0..cout {
                    let g = co / cout_g;
                    let ci0 = g * cing;
                    let mut acc = b.data()[co].f64();
                    for dt in dt_lo..dt_hi {
                        let ti = to + dt - pt;
                        for dy in dy_lo..dy_hi {
                            let yi = ys + dy - ph;
                            for dx in dx_lo..dx_hi {
                                let xi = xs + dx - pw;
                                let ibase = ((ti * h + yi) * wd + xi) * cin + ci0;
                                let wbase = ((co * cing * kt + dt) * kh + dy) * kw + dx;
                                for ci in 0..cing {
                                    acc += xd[ibase + ci].f64() * wdat[wbase + ci * khw].f64();
                                }
                            }
                        }
                    }
                    od[obase + co] = S::of(acc);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_bwd<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    groups: usize,
    sh: usize,
    sw: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (t, h, wd, cin) = dims4(x);
    let ws = w.shape();
    let (cout, cing, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let gs = g.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let cout_g = cout / groups;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();

    if kt == 1 && kh == 1 && kw == 1 && groups == 1 && sh == 1 && sw == 1 {
        for p in 0..t * h * wd {
            let xrow = &xd[p * cin..(p + 1) * cin];
            let grow = &gd[p * cout..(p + 1) * cout];
            for co in 0..cout {
                let go = grow[co].f64();
                if go == 0.0 {
                    continue;
                }
                gb.data_mut()[co] += grow[co];
                let wrow = &wdat[co * cin..(co + 1) * cin];
                let gwrow = &mut gw.data_mut()[co * cin..(co + 1) * cin];
                let gxrow = &mut gx.data_mut()[p * cin..(p + 1) * cin];
                for ci in 0..cin {
                    gxrow[ci] += S::of(go * wrow[ci].f64());
                    gwrow[ci] += S::of(go * xrow[ci].f64());
                }
            }
        }
        return (gx, gw, gb);
    }

    let khw = kt * kh * kw;
    for to in 0..t {
        let dt_lo = pt.saturating_sub(to);
        let dt_hi = kt.min(t + pt - to);
        for yo in 0..ho {
            let ys = yo * sh;
            let dy_lo = ph.saturating_sub(ys);
            let dy_hi = kh.min(h + ph - ys);
            for xo in 0..wo {
                let xs = xo * sw;
                let dx_lo = pw.saturating_sub(xs);
                let dx_hi = kw.min(wd + pw - xs);
                let obase = ((to * ho + yo) * wo + xo) * cout;
                for co in 0..cout {
                    let go = gd[obase + co];
                    if go == S::zero() {
                        continue;
                    }
                    let gof = go.f64();
                    gb.data_mut()[co] += go;
                    let grp = co / cout_g;
                    let ci0 = grp * cing;
                    for dt in dt_lo..dt_hi {
                        let ti = to + dt - pt;
                        for dy in dy_lo..dy_hi {
                            let yi = ys + dy - ph;
                            for dx in dx_lo..dx_hi {
                                let xi = xs + dx - pw;
                                let ibase = ((ti * h + yi) * wd + xi) * cin + ci0;
                                let wbase = ((co * cing * kt + dt) * kh + dy) * kw + dx;
                                for ci in 0..cing {
                                    let wi = wbase + ci * khw;
                                    gx.data_mut()[ibase + ci] += S::of(gof * wdat[wi].f64());
                                    gw.data_mut()[wi] += S::of(gof * xd[ibase + ci].f64());
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl<S: Scalar> Tape<S> {
    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        groups: usize,
        sh: usize,
        sw: usize,
    ) -> VarId {
        let out = conv3d_fwd(self.value(x), self.value(w), self.value(b), groups, sh, sw);
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        self.push(out, Box::new(move |g, grads| {
            let (gx, gw, gb) = conv3d_bwd(g, &xv, &wv, groups, sh, sw);
            grads.accumulate(x, gx);
            grads.accumulate(w, gw);
            grads.accumulate(b, gb);
        }))
    }
}

// ---------------------------------------------------------------------------
// bilinear up-sampling
// ---------------------------------------------------------------------------

struct LinearTap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(dst: usize, src: usize) -> Vec<LinearTap> {
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            LinearTap { i0, i1: (i0 + 1).min(src - 1), frac: p - i0 as f64 }
        })
        .collect()
}

/// Half-pixel bilinear x2 spatial upsampling of a `(T, H, W, C)` stack.
pub fn upsample2x_fwd<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (t, h, w, c) = dims4(x);
    let (ho, wo) = (h * 2, w * 2);
    let ty = taps(ho, h);
    let tx = taps(wo, w);
    let mut out = Tensor::zeros(&[t, ho, wo, c]);
    let xd = x.data();
    let od = out.data_mut();
    for ti in 0..t {
        for yo in 0..ho {
            let ly = &ty[yo];
            for xo in 0..wo {
                let lx = &tx[xo];
                let base = ((ti * ho + yo) * wo + xo) * c;
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| xd[((ti * h + yy) * w + xx) * c + ch].f64();
                    let top = at(ly.i0, lx.i0) * (1.0 - lx.frac) + at(ly.i0, lx.i1) * lx.frac;
                    let bot = at(ly.i1, lx.i0) * (1.0 - lx.frac) + at(ly.i1, lx.i1) * lx.frac;
                    od[base + ch] = S::of(top * (1.0 - ly.frac) + bot * ly.frac);
                }
            }
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let out = upsample2x_fwd(self.value(x));
        let in_shape = self.value(x).shape().to_vec();
        self.push(out, Box::new(move |g, grads| {
            let (t, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
            let (ho, wo) = (h * 2, w * 2);
            let ty = taps(ho, h);
            let tx = taps(wo, w);
            let mut gx = Tensor::zeros(&in_shape);
            let gd = g.data();
            for ti in 0..t {
                for yo in 0..ho {
                    let ly = &ty[yo];
                    for xo in 0..wo {
                        let lx = &tx[xo];
                        let base = ((ti * ho + yo) * wo + xo) * c;
                        for ch in 0..c {
                            let gv = gd[base + ch].f64();
                            let mut put = |yy: usize, xx: usize, wgt: f64| {
                                gx.data_mut()[((ti * h + yy) * w + xx) * c + ch] +=
                                    S::of(gv * wgt);
                            };
                            put(ly.i0, lx.i0, (1.0 - ly.frac) * (1.0 - lx.frac));
                            put(ly.i0, lx.i1, (1.0 - ly.frac) * lx.frac);
                            put(ly.i1, lx.i0, ly.frac * (1.0 - lx.frac));
                            put(ly.i1, lx.i1, ly.frac * lx.frac);
                        }
                    }
                }
            }
            grads.accumulate(x, gx);
        }))
    }
}

// ---------------------------------------------------------------------------
// backward warp by per-position offsets
// ---------------------------------------------------------------------------

/// Warp features by per-position offsets (shared across channels):
/// `out[t,y,x,c] = in[t, y+dy, x+dx, c]`, bilinear with clamped coordinates.
/// Offsets shape `(T, H, W, 2)`, component order `(dx, dy)`.
pub fn warp_offsets_fwd<S: Scalar>(x: &Tensor<S>, off: &Tensor<S>) -> Tensor<S> {
    let (t, h, w, c) = dims4(x);
    let os = off.shape();
    assert_eq!(&os[..3], &x.shape()[..3], "offset grid mismatch");
    assert_eq!(os[3], 2, "offsets carry (dx, dy)");
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = off.data();
    let outd = out.data_mut();
    for ti in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let obase = ((ti * h + y) * w + xx) * 2;
                let sx = (xx as f64 + od[obase].f64()).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + od[obase + 1].f64()).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let base = ((ti * h + y) * w + xx) * c;
                for ch in 0..c {
                    let at = |yy: usize, xc: usize| xd[((ti * h + yy) * w + xc) * c + ch].f64();
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    outd[base + ch] = S::of(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn warp_offsets(&mut self, x: VarId, off: VarId) -> VarId {
        let out = warp_offsets_fwd(self.value(x), self.value(off));
        let xv = self.value(x).clone();
        let ov = self.value(off).clone();
        self.push(out, Box::new(move |g, grads| {
            let (t, h, w, c) = dims4(&xv);
            let mut gx = Tensor::zeros(xv.shape());
            let mut goff = Tensor::zeros(ov.shape());
            let xd = xv.data();
            let od = ov.data();
            let gd = g.data();
            for ti in 0..t {
                for y in 0..h {
                    for xx in 0..w {
                        let obase = ((ti * h + y) * w + xx) * 2;
                        let rx = xx as f64 + od[obase].f64();
                        let ry = y as f64 + od[obase + 1].f64();
                        let sx = rx.clamp(0.0, (w - 1) as f64);
                        let sy = ry.clamp(0.0, (h - 1) as f64);
                        let inside_x = rx > 0.0 && rx < (w - 1) as f64;
                        let inside_y = ry > 0.0 && ry < (h - 1) as f64;
                        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                        let base = ((ti * h + y) * w + xx) * c;
                        let (mut acc_dx, mut acc_dy) = (0.0, 0.0);
                        for ch in 0..c {
                            let gv = gd[base + ch].f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let at = |yy: usize, xc: usize| xd[((ti * h + yy) * w + xc) * c + ch].f64();
                            let mut put = |yy: usize, xc: usize, wgt: f64| {
                                gx.data_mut()[((ti * h + yy) * w + xc) * c + ch] +=
                                    S::of(gv * wgt);
                            };
                            put(y0, x0, (1.0 - fy) * (1.0 - fx));
                            put(y0, x1, (1.0 - fy) * fx);
                            put(y1, x0, fy * (1.0 - fx));
                            put(y1, x1, fy * fx);
                            if inside_x {
                                acc_dx += gv
                                    * ((at(y0, x1) - at(y0, x0)) * (1.0 - fy)
                                        + (at(y1, x1) - at(y1, x0)) * fy);
                            }
                            if inside_y {
                                acc_dy += gv
                                    * ((at(y1, x0) - at(y0, x0)) * (1.0 - fx)
                                        + (at(y1, x1) - at(y0, x1)) * fx);
                            }
                        }
                        goff.data_mut()[obase] = S::of(acc_dx);
                        goff.data_mut()[obase + 1] = S::of(acc_dy);
                    }
                }
            }
            grads.accumulate(x, gx);
            grads.accumulate(off, goff);
        }))
    }
}

// ---------------------------------------------------------------------------
// orthonormal Haar level
// ---------------------------------------------------------------------------

/// One orthonormal 2-D Haar level per frame: `(T, H, W, C)` to
/// `(T, H/2, W/2, 4C)` with subband blocks ordered `[LL | LH | HL | HH]`.
pub fn haar2d_fwd<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (t, h, w, c) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "haar needs even dimensions");
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[t, h2, w2, 4 * c]);
    let xd = x.data();
    let od = out.data_mut();
    let half = S::of(0.5);
    for ti in 0..t {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = ((ti * h2 + y) * w2 + xx) * 4 * c;
                for ch in 0..c {
                    let at = |yy: usize, xc: usize| xd[((ti * h + yy) * w + xc) * c + ch];
                    let a = at(2 * y, 2 * xx);
                    let b = at(2 * y, 2 * xx + 1);
                    let cc = at(2 * y + 1, 2 * xx);
                    let d = at(2 * y + 1, 2 * xx + 1);
                    od[base + ch] = (a + b + cc + d) * half;
                    od[base + c + ch] = (a - b + cc - d) * half;
                    od[base + 2 * c + ch] = (a + b - cc - d) * half;
                    od[base + 3 * c + ch] = (a - b - cc + d) * half;
                }
            }
        }
    }
    out
}

/// Exact inverse of [`haar2d_fwd`].
pub fn haar2d_inverse<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let (t, h2, w2, c4) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let (h, w) = (h2 * 2, w2 * 2);
    let mut out = Tensor::zeros(&[t, h, w, c]);
    let xd = x.data();
    let od = out.data_mut();
    let half = S::of(0.5);
    for ti in 0..t {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = ((ti * h2 + y) * w2 + xx) * c4;
                for ch in 0..c {
                    let ll = xd[base + ch];
                    let lh = xd[base + c + ch];
                    let hl = xd[base + 2 * c + ch];
                    let hh = xd[base + 3 * c + ch];
                    let mut put = |yy: usize, xc: usize, v: S| {
                        od[((ti * h + yy) * w + xc) * c + ch] = v;
                    };
                    put(2 * y, 2 * xx, (ll + lh + hl + hh) * half);
                    put(2 * y, 2 * xx + 1, (ll - lh + hl - hh) * half);
                    put(2 * y + 1, 2 * xx, (ll + lh - hl - hh) * half);
                    put(2 * y + 1, 2 * xx + 1, (ll - lh - hl + hh) * half);
                }
            }
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn haar2d(&mut self, x: VarId) -> VarId {
        let out = haar2d_fwd(self.value(x));
        self.push(out, Box::new(move |g, grads| {
            // orthonormal transform: gradient is the inverse transform
            grads.accumulate(x, haar2d_inverse(g));
        }))
    }
}

// ---------------------------------------------------------------------------
// temporal mean removal and channel layer norm
// ---------------------------------------------------------------------------

/// Subtract the temporal mean: `y_t = x_t - mean_t(x)`. Accumulated as
/// deviations from frame 0 so temporally constant input maps to exact zeros.
pub fn sub_temporal_mean_fwd<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (t, h, w, c) = dims4(x);
    let plane = h * w * c;
    let inv = S::of(1.0 / t as f64);
    let mut mean_dev = vec![S::zero(); plane];
    for ti in 1..t {
        for i in 0..plane {
            mean_dev[i] += x.data()[ti * plane + i] - x.data()[i];
        }
    }
    for m in &mut mean_dev {
        *m *= inv;
    }
    let mut out = x.clone();
    for ti in 0..t {
        for i in 0..plane {
            out.data_mut()[ti * plane + i] = (x.data()[ti * plane + i] - x.data()[i]) - mean_dev[i];
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn sub_temporal_mean(&mut self, x: VarId) -> VarId {
        let out = sub_temporal_mean_fwd(self.value(x));
        self.push(out, Box::new(move |g, grads| {
            // same centering applied to the incoming gradient
            grads.accumulate(x, sub_temporal_mean_fwd(g));
        }))
    }

    /// Per-position layer norm over the channel axis with affine parameters.
    pub fn layer_norm_c(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (t, h, w, c) = dims4(&xv);
        assert_eq!(gv.numel(), c);
        assert_eq!(bv.numel(), c);
        let positions = t * h * w;
        let mut out = Tensor::zeros(xv.shape());
        let mut mus = vec![0.0f64; positions];
        let mut sigmas = vec![0.0f64; positions];
        for p in 0..positions {
            let row = &xv.data()[p * c..(p + 1) * c];
            let mu = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mu) * (v.f64() - mu)).sum::<f64>() / c as f64;
            let sd = (var + eps).sqrt();
            mus[p] = mu;
            sigmas[p] = sd;
            for ch in 0..c {
                out.data_mut()[p * c + ch] = S::of(
                    (xv.data()[p * c + ch].f64() - mu) / sd * gv.data()[ch].f64()
                        + bv.data()[ch].f64(),
                );
            }
        }
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(xv.shape());
            let mut gg = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            for p in 0..positions {
                let (mu, sd) = (mus[p], sigmas[p]);
                let row = &xv.data()[p * c..(p + 1) * c];
                let grow = &g.data()[p * c..(p + 1) * c];
                let xhat: Vec<f64> = row.iter().map(|v| (v.f64() - mu) / sd).collect();
                // d/dxhat, then pull back through the normalization
                let dxhat: Vec<f64> = grow
                    .iter()
                    .enumerate()
                    .map(|(ch, gvv)| gvv.f64() * gv.data()[ch].f64())
                    .collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for ch in 0..c {
                    gg.data_mut()[ch] += S::of(grow[ch].f64() * xhat[ch]);
                    gb.data_mut()[ch] += grow[ch];
                    gx.data_mut()[p * c + ch] =
                        S::of((dxhat[ch] - mean_dxhat - xhat[ch] * mean_dxhat_xhat) / sd);
                }
            }
            grads.accumulate(x, gx);
            grads.accumulate(gamma, gg);
            grads.accumulate(beta, gb);
        }))
    }
}

// ---------------------------------------------------------------------------
// motion-segmentation enhancement as a fixed linear operator
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    /// The static/dynamic temporal blend with mask and weights held constant
    /// (stop-gradient); linear in the frames, so gradients flow to them.
    /// Mirrors the inference-path blend: trailing window clamped at the clip
    /// start with tail weights renormalized.
    pub fn enhance_blend(
        &mut self,
        x: VarId,
        mask: &pmr_core::dei::DynamicMask,
        weights: &pmr_core::motion_enhance::TemporalWeights,
    ) -> VarId {
        let (t, h, w, c) = dims4(self.value(x));
        assert_eq!((mask.h(), mask.w()), (h, w), "mask/frame mismatch");
        let window = weights.raw.len();
        assert!(window >= 1 && window <= t, "blend window must fit the clip");
        // per output frame: (source frame, coefficient) pairs for static px
        let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(t);
        for k in 0..t {
            let avail = (k + 1).min(window);
            let tail = &weights.raw[window - avail..];
            let tail_sum: f64 = tail.iter().sum();
            taps.push(
                tail.iter()
                    .enumerate()
                    .map(|(i, &wv)| (k + 1 - avail + i, wv / tail_sum))
                    .collect(),
            );
        }
        let bits: Vec<bool> = mask.bits().to_vec();
        let xv = self.value(x).clone();
        let plane = h * w;
        let mut out = Tensor::zeros(xv.shape());
        for k in 0..t {
            for p in 0..plane {
                let base = (k * plane + p) * c;
                if bits[p] {
                    for ch in 0..c {
                        out.data_mut()[base + ch] = xv.data()[base + ch];
                    }
                } else {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for &(src, coef) in &taps[k] {
                            acc += coef * xv.data()[(src * plane + p) * c + ch].f64();
                        }
                        out.data_mut()[base + ch] = S::of(acc);
                    }
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&shape);
            for k in 0..t {
                for p in 0..plane {
                    let base = (k * plane + p) * c;
                    if bits[p] {
                        for ch in 0..c {
                            gx.data_mut()[base + ch] += g.data()[base + ch];
                        }
                    } else {
                        for ch in 0..c {
                            let gv = g.data()[base + ch].f64();
                            for &(src, coef) in &taps[k] {
                                gx.data_mut()[(src * plane + p) * c + ch] += S::of(coef * gv);
                            }
                        }
                    }
                }
            }
            grads.accumulate(x, gx);
        }))
    }
}

// ---------------------------------------------------------------------------
// attention pieces
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    /// `(T, H, W, C)` to `(heads, C/heads, T*H*W)`.
    pub fn to_heads(&mut self, x: VarId, heads: usize) -> VarId {
        let (t, h, w, c) = dims4(self.value(x));
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let ch = c / heads;
        let n = t * h * w;
        let mut out = Tensor::zeros(&[heads, ch, n]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for p in 0..n {
                for hd in 0..heads {
                    for cc in 0..ch {
                        od[(hd * ch + cc) * n + p] = xd[p * c + hd * ch + cc];
                    }
                }
            }
        }
        let shape = vec![t, h, w, c];
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&shape);
            for p in 0..n {
                for hd in 0..heads {
                    for cc in 0..ch {
                        gx.data_mut()[p * c + hd * ch + cc] = g.data()[(hd * ch + cc) * n + p];
                    }
                }
            }
            grads.accumulate(x, gx);
        }))
    }

    /// Inverse of [`Tape::to_heads`] back onto a `(T, H, W, C)` grid.
    pub fn from_heads(&mut self, x: VarId, t: usize, h: usize, w: usize) -> VarId {
        let s = self.value(x).shape().to_vec();
        let (heads, ch, n) = (s[0], s[1], s[2]);
        assert_eq!(n, t * h * w);
        let c = heads * ch;
        let mut out = Tensor::zeros(&[t, h, w, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for p in 0..n {
                for hd in 0..heads {
                    for cc in 0..ch {
                        od[p * c + hd * ch + cc] = xd[(hd * ch + cc) * n + p];
                    }
                }
            }
        }
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&s);
            for p in 0..n {
                for hd in 0..heads {
                    for cc in 0..ch {
                        gx.data_mut()[(hd * ch + cc) * n + p] = g.data()[p * c + hd * ch + cc];
                    }
                }
            }
            grads.accumulate(x, gx);
        }))
    }

    /// L2-normalize each row (last axis) of a `(B, R, N)` tensor.
    pub fn l2_normalize_rows(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let s = xv.shape().to_vec();
        let n = s[2];
        let rows = s[0] * s[1];
        let mut out = Tensor::zeros(&s);
        let mut norms = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            norms[r] = norm;
            for i in 0..n {
                out.data_mut()[r * n + i] = S::of(row[i].f64() / norm);
            }
        }
        let ov = out.clone();
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&s);
            for r in 0..rows {
                let y = &ov.data()[r * n..(r + 1) * n];
                let grow = &g.data()[r * n..(r + 1) * n];
                let dot = y.iter().zip(grow).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
                for i in 0..n {
                    gx.data_mut()[r * n + i] =
                        S::of((grow[i].f64() - y[i].f64() * dot) / norms[r]);
                }
            }
            grads.accumulate(x, gx);
        }))
    }

    /// Batched matmul `(B, m, k) x (B, k, n)`; with `transpose_b` the second
    /// operand is `(B, n, k)`.
    pub fn bmm(&mut self, a: VarId, b: VarId, transpose_b: bool) -> VarId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let sa = av.shape().to_vec();
        let sb = bv.shape().to_vec();
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        assert_eq!(if transpose_b { sb[2] } else { sb[1] }, k, "bmm inner dim mismatch");
        let mut out = Tensor::zeros(&[bt, m, n]);
        for bi in 0..bt {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let x = av.data()[(bi * m + i) * k + kk].f64();
                        let y = if transpose_b {
                            bv.data()[(bi * n + j) * k + kk].f64()
                        } else {
                            bv.data()[(bi * k + kk) * n + j].f64()
                        };
                        acc += x * y;
                    }
                    out.data_mut()[(bi * m + i) * n + j] = S::of(acc);
                }
            }
        }
        self.push(out, Box::new(move |g, grads| {
            let mut ga = Tensor::zeros(&sa);
            let mut gb = Tensor::zeros(&sb);
            for bi in 0..bt {
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[(bi * m + i) * n + j].f64();
                        if gv == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            let bidx = if transpose_b {
                                (bi * n + j) * k + kk
                            } else {
                                (bi * k + kk) * n + j
                            };
                            ga.data_mut()[(bi * m + i) * k + kk] +=
                                S::of(gv * bv.data()[bidx].f64());
                            gb.data_mut()[bidx] +=
                                S::of(gv * av.data()[(bi * m + i) * k + kk].f64());
                        }
                    }
                }
            }
            grads.accumulate(a, ga);
            grads.accumulate(b, gb);
        }))
    }

    /// Row softmax on the last axis of a `(B, R, C)` tensor.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let s = xv.shape().to_vec();
        let c = *s.last().unwrap();
        let rows = xv.numel() / c;
        let mut out = Tensor::zeros(&s);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let peak = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - peak).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for i in 0..c {
                out.data_mut()[r * c + i] = S::of(exps[i] / sum);
            }
        }
        let ov = out.clone();
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&s);
            for r in 0..rows {
                let y = &ov.data()[r * c..(r + 1) * c];
                let grow = &g.data()[r * c..(r + 1) * c];
                let dot = y.iter().zip(grow).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
                for i in 0..c {
                    gx.data_mut()[r * c + i] = S::of(y[i].f64() * (grow[i].f64() - dot));
                }
            }
            grads.accumulate(x, gx);
        }))
    }

    /// Divide each head's block by its learnable temperature:
    /// `y[h] = x[h] / tau[h]` on a `(heads, R, C)` tensor.
    pub fn div_head_scalar(&mut self, x: VarId, tau: VarId) -> VarId {
        let xv = self.value(x).clone();
        let tv = self.value(tau).clone();
        let s = xv.shape().to_vec();
        let heads = s[0];
        assert_eq!(tv.numel(), heads);
        let block = xv.numel() / heads;
        let mut out = Tensor::zeros(&s);
        for hd in 0..heads {
            let t = tv.data()[hd].f64();
            for i in 0..block {
                out.data_mut()[hd * block + i] = S::of(xv.data()[hd * block + i].f64() / t);
            }
        }
        self.push(out, Box::new(move |g, grads| {
            let mut gx = Tensor::zeros(&s);
            let mut gt = Tensor::zeros(&[heads]);
            for hd in 0..heads {
                let t = tv.data()[hd].f64();
                let mut acc = 0.0;
                for i in 0..block {
                    let gv = g.data()[hd * block + i].f64();
                    gx.data_mut()[hd * block + i] = S::of(gv / t);
                    acc += gv * xv.data()[hd * block + i].f64();
                }
                gt.data_mut()[hd] = S::of(-acc / (t * t));
            }
            grads.accumulate(x, gx);
            grads.accumulate(tau, gt);
        }))
    }
}

pub(crate) fn dims4<S: Scalar>(x: &Tensor<S>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], amp: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * amp)
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// FD-check the input gradient of `forward` under a fixed random
    /// weighting of the output.
    fn check_input_grad(
        x0: &Tensor<f64>,
        forward: impl Fn(&mut Tape<f64>, VarId) -> VarId,
        tol: f64,
    ) {
        let probe = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>, Vec<usize>) {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let y = forward(&mut tape, xid);
            let out_shape = tape.value(y).shape().to_vec();
            let coeffs = rand_tensor(&out_shape, 1.0, 999);
            let cid = tape.leaf(coeffs);
            let prod = tape.mul(y, cid);
            let loss = tape.mean_all(prod);
            let value = tape.value(loss).item();
            let mut grads = tape.backward(loss);
            (value, grads.take(xid), out_shape)
        };
        let (_, grad, _) = probe(x0);
        let analytic = grad.expect("input gradient present");
        let mut loss_fn = |x: &Tensor<f64>| probe(x).0;
        let worst = max_rel_error(&mut loss_fn, x0, &analytic, 1e-5, 1e-7);
        assert!(worst <= tol, "max rel err {worst} > {tol}");
    }

    #[test]
    fn conv3d_gradients() {
        let x = rand_tensor(&[2, 4, 4, 4], 1.0, 1);
        let w0 = rand_tensor(&[6, 2, 3, 3, 3], 0.5, 2);
        let b0 = rand_tensor(&[6], 0.2, 3);
        // input gradient, grouped conv
        check_input_grad(&x, |tape, xid| {
            let w = tape.leaf(w0.clone());
            let b = tape.leaf(b0.clone());
            tape.conv3d(xid, w, b, 2, 1, 1)
        }, 1e-6);
        // weight gradient, via the weight as the probed input
        let x0 = rand_tensor(&[2, 4, 4, 4], 1.0, 4);
        check_input_grad(&w0, |tape, wid| {
            let xl = tape.leaf(x0.clone());
            let b = tape.leaf(b0.clone());
            tape.conv3d(xl, wid, b, 2, 1, 1)
        }, 1e-6);
        // strided depthwise
        let xs = rand_tensor(&[2, 6, 6, 3], 1.0, 5);
        let wd = rand_tensor(&[3, 1, 3, 3, 3], 0.5, 6);
        let bd = rand_tensor(&[3], 0.1, 7);
        check_input_grad(&xs, |tape, xid| {
            let w = tape.leaf(wd.clone());
            let b = tape.leaf(bd.clone());
            tape.conv3d(xid, w, b, 3, 2, 2)
        }, 1e-6);
    }

    #[test]
    fn upsample_preserves_constants_and_gradients() {
        let c = Tensor::full(&[1, 4, 6, 2], 0.37f64);
        let up = upsample2x_fwd(&c);
        assert_eq!(up.shape(), &[1, 8, 12, 2]);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));

        let x = rand_tensor(&[2, 4, 4, 2], 1.0, 8);
        check_input_grad(&x, |tape, xid| tape.upsample2x(xid), 1e-6);
    }

    #[test]
    fn warp_zero_offsets_is_identity_and_grads_check() {
        let x = rand_tensor(&[2, 6, 6, 2], 1.0, 9);
        let zero = Tensor::zeros(&[2, 6, 6, 2]);
        assert_eq!(warp_offsets_fwd(&x, &zero), x);

        let off0 = rand_tensor(&[2, 6, 6, 2], 0.4, 10);
        check_input_grad(&x, |tape, xid| {
            let off = tape.leaf(off0.clone());
            tape.warp_offsets(xid, off)
        }, 1e-5);
        let x0 = rand_tensor(&[2, 6, 6, 2], 1.0, 11);
        check_input_grad(&off0, |tape, oid| {
            let xl = tape.leaf(x0.clone());
            tape.warp_offsets(xl, oid)
        }, 1e-5);
    }

    #[test]
    fn haar_reconstruction_energy_and_gradient() {
        let x = rand_tensor(&[2, 8, 8, 3], 1.0, 12);
        let bands = haar2d_fwd(&x);
        assert_eq!(bands.shape(), &[2, 4, 4, 12]);
        let back = haar2d_inverse(&bands);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6, "perfect reconstruction");
        }
        let energy_in: f64 = x.data().iter().map(|v| v * v).sum();
        let energy_out: f64 = bands.data().iter().map(|v| v * v).sum();
        assert!((energy_in - energy_out).abs() < 1e-5, "orthonormal energy");

        let c = Tensor::full(&[1, 4, 4, 1], 0.3f64);
        let cb = haar2d_fwd(&c);
        for y in 0..2 {
            for x2 in 0..2 {
                let base = (y * 2 + x2) * 4;
                assert!((cb.data()[base] - 0.6).abs() < 1e-12, "LL is 2c");
                for sub in 1..4 {
                    assert_eq!(cb.data()[base + sub], 0.0, "details vanish on constants");
                }
            }
        }

        check_input_grad(&x, |tape, xid| tape.haar2d(xid), 1e-6);
    }

    #[test]
    fn layer_norm_softmax_l2_bmm_gradients() {
        let x = rand_tensor(&[2, 3, 3, 6], 1.0, 13);
        let g0 = rand_tensor(&[6], 0.5, 14).map(|v| v + 1.0);
        let b0 = rand_tensor(&[6], 0.5, 15);
        check_input_grad(&x, |tape, xid| {
            let g = tape.leaf(g0.clone());
            let b = tape.leaf(b0.clone());
            tape.layer_norm_c(xid, g, b, 1e-6)
        }, 1e-5);

        let logits = rand_tensor(&[2, 4, 4], 2.0, 16);
        check_input_grad(&logits, |tape, xid| tape.softmax_rows(xid), 1e-5);

        let rows = rand_tensor(&[2, 3, 10], 1.0, 17);
        check_input_grad(&rows, |tape, xid| tape.l2_normalize_rows(xid), 1e-5);

        let a = rand_tensor(&[2, 3, 5], 1.0, 18);
        let b = rand_tensor(&[2, 5, 4], 1.0, 19);
        check_input_grad(&a, |tape, xid| {
            let bb = tape.leaf(b.clone());
            tape.bmm(xid, bb, false)
        }, 1e-6);
        let bt = rand_tensor(&[2, 4, 5], 1.0, 20);
        check_input_grad(&bt, |tape, xid| {
            let aa = tape.leaf(a.clone());
            tape.bmm(aa, xid, true)
        }, 1e-6);
    }

    #[test]
    fn head_round_trip_and_temporal_mean() {
        let x = rand_tensor(&[2, 3, 4, 6], 1.0, 21);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let h = tape.to_heads(xid, 3);
        assert_eq!(tape.value(h).shape(), &[3, 2, 24]);
        let back = tape.from_heads(h, 2, 3, 4);
        assert_eq!(tape.value(back), &x);

        let centered = sub_temporal_mean_fwd(&x);
        let s = centered.shape().to_vec();
        let plane = s[1] * s[2] * s[3];
        for i in 0..plane {
            let total: f64 = (0..s[0]).map(|t| centered.data()[t * plane + i]).sum();
            assert!(total.abs() < 1e-12, "temporal mean removed");
        }
        check_input_grad(&x, |tape, xid| tape.sub_temporal_mean(xid), 1e-6);

        let tau0 = Tensor::from_vec(&[2], vec![1.3f64, 0.7]);
        let logits = rand_tensor(&[2, 3, 3], 1.0, 22);
        check_input_grad(&logits, |tape, xid| {
            let tau = tape.leaf(tau0.clone());
            tape.div_head_scalar(xid, tau)
        }, 1e-6);
        check_input_grad(&tau0, |tape, tid| {
            let l = tape.leaf(logits.clone());
            tape.div_head_scalar(l, tid)
        }, 1e-6);
    }

    #[test]
    fn enhance_blend_matches_core_and_checks_gradient() {
        use pmr_core::dei::DynamicMask;
        use pmr_core::motion_enhance::{enhance, gaussian_weights};
        use pmr_core::synth;

        let clip = synth::textured_clip::<f64>(5, 8, 8, 1, 61);
        let mask = DynamicMask::new(8, 8, (0..64).map(|i| i % 4 == 0).collect());
        let weights = gaussian_weights(3, 1.2).unwrap();
        let expect = enhance(&clip, &mask, &weights).unwrap();

        let x = crate::tensor::clip_to_tensor(&clip);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = tape.enhance_blend(xid, &mask, &weights);
        let got = crate::tensor::tensor_to_clip(tape.value(y));
        for (a, b) in expect.frames().iter().zip(got.frames()) {
            for (&u, &v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12, "tape blend must match the inference blend");
            }
        }

        check_input_grad(&x, |tape, xid| tape.enhance_blend(xid, &mask, &weights), 1e-6);
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let a = rand_tensor(&[3, 2, 2, 2], 1.0, 23);
        let b = rand_tensor(&[3, 2, 2, 2], 1.0, 24);
        check_input_grad(&a, |tape, xid| {
            let bb = tape.leaf(b.clone());
            let s = tape.mul(xid, bb);
            tape.gelu(s)
        }, 1e-5);
        check_input_grad(&a, |tape, xid| {
            let bb = tape.leaf(b.clone());
            let d = tape.sub(xid, bb);
            tape.charbonnier_kernel(d, 1e-3)
        }, 1e-4);
        check_input_grad(&a, |tape, xid| {
            let bb = tape.leaf(b.clone());
            let cat = tape.concat_c(xid, bb);
            tape.slice_c(cat, 1, 3)
        }, 1e-6);
        check_input_grad(&a, |tape, xid| tape.mean_many(&[xid, xid]), 1e-6);
    }
}
