//! Parameter totals and closed-form multiply-accumulate estimates.

use pmr_nn::deblur::{count_params as deb_count_params, DebConfig, ENC_BLOCKS};
use pmr_nn::detilt::DetConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComplexityReport {
    pub det_params: usize,
    pub deb_params: usize,
    /// The enhancement stage carries no parameters.
    pub mse_params: usize,
    pub total_params: usize,
    /// Multiply-accumulate estimates at the given input shape.
    pub shape: (usize, usize, usize, usize),
    pub det_macs: u64,
    pub deb_macs: u64,
    pub total_macs: u64,
}

fn ds_conv_macs(n: u64, cin: u64, cout: u64) -> u64 {
    n * cin * 27 + n * cin * cout
}

fn ds_align_macs(n: u64, cin: u64, cout: u64) -> u64 {
    // two ds-convs, the offset conv and a 4-tap bilinear gather per sample
    ds_conv_macs(n, cin, cout) + n * cout * 2 * 27 + ds_conv_macs(n, cout, cout) + n * cout * 4
}

fn stc_macs(n: u64, c: u64) -> u64 {
    let norm = 3 * n * c;
    let qkv = n * c * 27 + n * c * c;
    // channel attention: both batched matmuls touch every position once per
    // reduced channel
    let third = c / 3;
    let attention = 2 * n * third * third;
    let proj = n * third * c;
    let ff = n * c * 4 * c + n * 4 * c * 27 + n * 2 * c * c;
    2 * norm + qkv + attention + proj + ff
}

/// Closed-form parameter and MAC totals for one clip of the given shape.
/// Every convolutional term is linear in T and in H*W by construction.
pub fn complexity_report(
    det_cfg: &DetConfig,
    deb_cfg: &DebConfig,
    shape: (usize, usize, usize, usize),
) -> ComplexityReport {
    let det = pmr_nn::detilt::DetNet::<f32>::new(det_cfg.clone(), 0).expect("valid config");
    let det_params = det.param_count();
    let deb_params = deb_count_params(deb_cfg);

    let (t, h, w, _c) = shape;
    let n = (t * h * w) as u64;
    let b = det_cfg.base_channels as u64;
    let cin = det_cfg.in_channels as u64;
    let ratio = det_cfg.part_ratio;
    let part = |c: u64| -> u64 { ((ratio * c as f64).floor() as u64).clamp(1, c) };
    let part_macs = |n: u64, cin: u64, cout: u64| -> u64 {
        n * part(cin) * 27 + ds_conv_macs(n, cin, cout)
    };
    let mut det_macs = ds_align_macs(n, cin, b);
    det_macs += ds_conv_macs(n / 4, 4 * b, 2 * b); // wave 1 at half resolution
    det_macs += ds_conv_macs(n / 16, 8 * b, 4 * b);
    det_macs += ds_conv_macs(n / 64, 16 * b, 8 * b);
    det_macs += part_macs(n / 16, 12 * b, 4 * b) + (n / 16) * 4 * b * 2;
    det_macs += part_macs(n / 4, 6 * b, 2 * b) + (n / 4) * 2 * b * 2;
    det_macs += part_macs(n, 3 * b, b) + ds_align_macs(n, b, b) + n * b * 2;
    det_macs += n * 2 * 6; // level fusion and the correction warp

    let [c1, c2, c3] = deb_cfg.widths();
    let (c1, c2, c3) = (c1 as u64, c2 as u64, c3 as u64);
    let dcin = deb_cfg.in_channels as u64;
    let mut deb_macs = ds_align_macs(n, dcin, c1);
    deb_macs += ds_conv_macs(n / 4, c1, c2); // down 1
    deb_macs += ENC_BLOCKS[1] as u64 * stc_macs(n / 4, c2);
    deb_macs += ds_conv_macs(n / 16, c2, c3); // down 2
    deb_macs += (ENC_BLOCKS[2] + ENC_BLOCKS[3]) as u64 * stc_macs(n / 16, c3);
    deb_macs += (n / 16) * 2 * c3 * c3; // fuse 3
    deb_macs += 2 * stc_macs(n / 16, c3); // decoder level 3
    deb_macs += (n / 4) * (c3 + c2) * c2; // fuse 2
    deb_macs += stc_macs(n / 4, c2); // decoder level 2
    deb_macs += n * (c2 + c1) * c1; // fuse 1
    deb_macs += ds_align_macs(n, c1, c1) + n * c1 * dcin;

    ComplexityReport {
        det_params,
        deb_params,
        mse_params: 0,
        total_params: det_params + deb_params,
        shape,
        det_macs,
        deb_macs,
        total_macs: det_macs + deb_macs,
    }
}
