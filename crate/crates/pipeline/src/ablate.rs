//! Stage-removal and stage-order ablation harnesses. Every configuration is
//! evaluated on the same clips with an 8-pixel border dropped before metrics
//! to exclude warp border-replication effects.

use crate::restore::{restore_stages, restore_with_order, RestoreOptions, StageOrder};
use crate::PipelineError;
use pmr_core::flow::FlowRegistry;
use pmr_core::media::{clip_quality, FrameClip};
use pmr_core::turbsim::DegradationBundle;
use pmr_core::Scalar;
use pmr_nn::deblur::DebNet;
use pmr_nn::detilt::DetNet;
use serde::{Deserialize, Serialize};

pub const EVAL_BORDER: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRow {
    pub experiment: String,
    pub stages: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageAblation {
    pub rows: Vec<StageRow>,
    pub det_params: usize,
    pub deb_params: usize,
    pub clips: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OrderRow {
    pub order: String,
    pub psnr: f64,
    pub ssim: f64,
}

fn eval_crop<S: Scalar>(clip: &FrameClip<S>) -> Result<FrameClip<S>, PipelineError> {
    let (h, w) = (clip.h(), clip.w());
    if h <= 2 * EVAL_BORDER + 8 || w <= 2 * EVAL_BORDER + 8 {
        return Ok(clip.clone());
    }
    let mut ch = h - 2 * EVAL_BORDER;
    let mut cw = w - 2 * EVAL_BORDER;
    ch -= ch % 2;
    cw -= cw % 2;
    Ok(clip.crop(EVAL_BORDER, EVAL_BORDER, ch, cw)?)
}

fn mean_quality<S: Scalar>(
    pairs: &[(FrameClip<S>, &DegradationBundle<S>)],
) -> Result<(f64, f64), PipelineError> {
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for (restored, bundle) in pairs {
        let q = clip_quality(&eval_crop(restored)?, &eval_crop(&bundle.clean)?)?;
        psnr_acc += q.psnr_db;
        ssim_acc += q.ssim;
    }
    Ok((psnr_acc / pairs.len() as f64, ssim_acc / pairs.len() as f64))
}

/// The four stage subsets: a = full chain, b = without enhancement,
/// c = without de-tilt, d = de-blur only.
pub fn ablate_stages<S: Scalar>(
    eval_set: &[DegradationBundle<S>],
    det: &DetNet<S>,
    deb: &DebNet<S>,
    registry: &FlowRegistry<S>,
    opts: &RestoreOptions,
) -> Result<StageAblation, PipelineError> {
    if eval_set.is_empty() {
        return Err(PipelineError::NoData);
    }
    let configs: [(&str, bool, bool, bool); 4] = [
        ("a", true, true, true),
        ("b", true, false, true),
        ("c", false, true, true),
        ("d", false, false, true),
    ];
    let mut rows = Vec::with_capacity(4);
    for (label, dt, dm, db) in configs {
        let mut pairs = Vec::with_capacity(eval_set.len());
        for bundle in eval_set {
            let restored = restore_stages(&bundle.degraded, det, deb, registry, opts, dt, dm, db)?;
            pairs.push((restored, bundle));
        }
        let (psnr, ssim) = mean_quality(&pairs)?;
        let stages = [("DET", dt), ("MSE_OF", dm), ("DEB", db)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+");
        rows.push(StageRow { experiment: label.to_string(), stages, psnr, ssim });
    }
    Ok(StageAblation {
        rows,
        det_params: det.param_count(),
        deb_params: deb.param_count(),
        clips: eval_set.len(),
    })
}

/// The three studied stage orders evaluated with identical settings.
pub fn ablate_orders<S: Scalar>(
    eval_set: &[DegradationBundle<S>],
    det: &DetNet<S>,
    deb: &DebNet<S>,
    registry: &FlowRegistry<S>,
    opts: &RestoreOptions,
) -> Result<Vec<OrderRow>, PipelineError> {
    if eval_set.is_empty() {
        return Err(PipelineError::NoData);
    }
    let mut rows = Vec::with_capacity(3);
    for order in StageOrder::all() {
        let mut pairs = Vec::with_capacity(eval_set.len());
        for bundle in eval_set {
            let restored = restore_with_order(&bundle.degraded, det, deb, registry, opts, order)?;
            pairs.push((restored, bundle));
        }
        let (psnr, ssim) = mean_quality(&pairs)?;
        rows.push(OrderRow { order: order.label().to_string(), psnr, ssim });
    }
    Ok(rows)
}

/// Plain-text rendering of the stage table.
pub fn render_stage_table(ablation: &StageAblation) -> String {
    let mut out = String::from("exp  stages            psnr     ssim\n");
    for row in &ablation.rows {
        out.push_str(&format!(
            "{:<4} {:<17} {:>7.3}  {:>6.4}\n",
            row.experiment, row.stages, row.psnr, row.ssim
        ));
    }
    out.push_str(&format!(
        "params: det {} + deb {} over {} clips\n",
        ablation.det_params, ablation.deb_params, ablation.clips
    ));
    out
}

pub fn render_order_table(rows: &[OrderRow]) -> String {
    let mut out = String::from("order      psnr     ssim\n");
    for row in rows {
        out.push_str(&format!("{:<9} {:>7.3}  {:>6.4}\n", row.order, row.psnr, row.ssim));
    }
    out
}
