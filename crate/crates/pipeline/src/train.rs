//! Stage-wise joint training: the de-tilt network is trained alone against
//! the blur-only intermediate first, then the full chain is optimized
//! end-to-end against the clean clips. The motion-enhancement stage runs
//! inside the training graph as a fixed linear operator (its masks and
//! weights are stop-gradient).

use crate::restore::{plan_mse, restore, RestoreOptions};
use crate::PipelineError;
use pmr_core::flow::FlowRegistry;
use pmr_core::media::{psnr, FrameClip};
use pmr_core::turbsim::DegradationBundle;
use pmr_core::Scalar;
use pmr_nn::deblur::{DebConfig, DebNet};
use pmr_nn::detilt::{DetConfig, DetNet};
use pmr_nn::optim::{Adam, CosineSchedule};
use pmr_nn::tape::{Tape, VarId};
use pmr_nn::tensor::{clip_to_tensor, tensor_to_clip, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters for both networks.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub det: DetConfig,
    pub deb: DebConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// The staged optimization plan.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Epochs of de-tilt-only training (phase 1).
    pub stage1_epochs: usize,
    /// Epochs of joint full-chain training (phase 2); zero skips the phase.
    pub joint_epochs: usize,
    pub batch: usize,
    /// Square crop side; must be a positive multiple of 8.
    pub crop: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_policy: LrPolicy,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Clips held out from the tail of the dataset for validation.
    pub holdout_clips: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 50,
            joint_epochs: 200,
            batch: 2,
            crop: 48,
            lr_init: 2e-4,
            lr_final: 1e-6,
            lr_policy: LrPolicy::Cosine,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            holdout_clips: 2,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, n_clips: usize, h: usize, w: usize) -> Result<(), PipelineError> {
        if self.stage1_epochs == 0 {
            return Err(PipelineError::BadSchedule("stage1_epochs must be at least 1".into()));
        }
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(PipelineError::BadSchedule("need lr_init > lr_final > 0".into()));
        }
        if self.batch == 0 {
            return Err(PipelineError::BadSchedule("batch must be positive".into()));
        }
        if self.crop == 0 || self.crop % 8 != 0 || self.crop > h.min(w) {
            return Err(PipelineError::BadSchedule(format!(
                "crop {} must be a positive multiple of 8 within {}x{}",
                self.crop, h, w
            )));
        }
        if self.holdout_clips >= n_clips {
            return Err(PipelineError::BadSchedule(format!(
                "holdout {} leaves no training clips out of {}",
                self.holdout_clips, n_clips
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub det: DetNet<S>,
    pub deb: DebNet<S>,
    pub log: Vec<EpochRecord>,
}

fn charbonnier_t<S: Scalar>(tape: &mut Tape<S>, pred: VarId, target: &Tensor<S>) -> VarId {
    let tgt = tape.leaf(target.clone());
    let d = tape.sub(pred, tgt);
    let k = tape.charbonnier_kernel(d, crate::restore::CHARBONNIER_EPS);
    tape.mean_all(k)
}

struct GradAccumulator<S> {
    sums: Vec<Option<Tensor<S>>>,
    count: usize,
}

impl<S: Scalar> GradAccumulator<S> {
    fn new(n: usize) -> Self {
        Self { sums: (0..n).map(|_| None).collect(), count: 0 }
    }

    fn add(&mut self, grads: Vec<Option<Tensor<S>>>) {
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        self.count += 1;
    }

    fn take_mean(&mut self) -> Vec<Option<Tensor<S>>> {
        let inv = S::of(1.0 / self.count.max(1) as f64);
        let out = self
            .sums
            .iter_mut()
            .map(|slot| slot.take().map(|t| t.map(|v| v * inv)))
            .collect();
        self.count = 0;
        out
    }
}

fn crop_pair<S: Scalar>(
    a: &FrameClip<S>,
    b: &FrameClip<S>,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> (FrameClip<S>, FrameClip<S>) {
    let (h, w) = (a.h(), a.w());
    if crop >= h && crop >= w {
        return (a.clone(), b.clone());
    }
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    (a.crop(y0, x0, crop, crop).expect("in range"), b.crop(y0, x0, crop, crop).expect("in range"))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Phase 1 trains the de-tilt network alone against the blur-only
/// intermediates; phase 2 chains de-tilt, the fixed enhancement operator and
/// the de-blur network, optimizing all parameters jointly against the clean
/// clips. Deterministic under the schedule seed.
pub fn train_stagewise<S: Scalar>(
    dataset: &[DegradationBundle<S>],
    models: &ModelSpec,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome<S>, PipelineError> {
    let first = dataset.first().ok_or(PipelineError::NoData)?;
    let (_, h, w, _) = first.clean.shape();
    schedule.validate(dataset.len(), h, w)?;

    let n_train = dataset.len() - schedule.holdout_clips;
    let train_set = &dataset[..n_train];
    let val_set = &dataset[n_train..];

    let mut det = DetNet::<S>::new(models.det.clone(), schedule.seed.wrapping_add(1))?;
    let mut deb = DebNet::<S>::new(models.deb.clone(), schedule.seed.wrapping_add(2))?;
    let mut crop_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    crop_rng.set_stream(3);
    let mut order_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    order_rng.set_stream(4);

    let registry = FlowRegistry::<S>::standard();
    let opts = RestoreOptions::default();
    let mut log = Vec::new();

    // phase 1: de-tilt alone, target = blur-only intermediate
    let det_shapes: Vec<Vec<usize>> =
        det.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut opt = Adam::<S>::new(&det_shapes);
    let sched = CosineSchedule {
        lr_init: schedule.lr_init,
        lr_final: schedule.lr_final,
        epochs: schedule.stage1_epochs,
    };
    for epoch in 0..schedule.stage1_epochs {
        let lr = sched.lr_at(epoch);
        let mut acc = GradAccumulator::new(det_shapes.len());
        let mut epoch_loss = 0.0;
        let order = shuffled_indices(n_train, &mut order_rng);
        for (step, &ci) in order.iter().enumerate() {
            let bundle = &train_set[ci];
            let (x, tgt) = crop_pair(&bundle.degraded, &bundle.blur_only, schedule.crop, &mut crop_rng);
            let mut tape = Tape::new();
            let xid = tape.leaf(clip_to_tensor(&x));
            let mut ids = Vec::new();
            let (_, corrected) = det.forward_t(&mut tape, xid, &mut ids);
            let loss = charbonnier_t(&mut tape, corrected, &clip_to_tensor(&tgt));
            epoch_loss += tape.value(loss).item().f64();
            let mut grads = tape.backward(loss);
            acc.add(ids.iter().map(|&id| grads.take(id)).collect());
            if acc.count == schedule.batch || step + 1 == n_train {
                let mean = acc.take_mean();
                opt.step(lr, det.named_params_mut(), &mean);
            }
        }
        let mut val_psnr = 0.0;
        for bundle in val_set {
            let (_, corrected) = det.det_forward(&bundle.degraded)?;
            val_psnr += psnr(&corrected, &bundle.blur_only)?;
        }
        val_psnr /= val_set.len().max(1) as f64;
        log.push(EpochRecord { phase: 1, epoch, lr, loss: epoch_loss / n_train as f64, val_psnr });
    }

    // phase 2: full chain, all parameters jointly, target = clean
    if schedule.joint_epochs > 0 {
        let joint_shapes: Vec<Vec<usize>> = det
            .named_params()
            .iter()
            .chain(deb.named_params().iter())
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut opt = Adam::<S>::new(&joint_shapes);
        let sched = CosineSchedule {
            lr_init: schedule.lr_init,
            lr_final: schedule.lr_final,
            epochs: schedule.joint_epochs,
        };
        for epoch in 0..schedule.joint_epochs {
            let lr = sched.lr_at(epoch);
            let mut acc = GradAccumulator::new(joint_shapes.len());
            let mut epoch_loss = 0.0;
            let order = shuffled_indices(n_train, &mut order_rng);
            for (step, &ci) in order.iter().enumerate() {
                let bundle = &train_set[ci];
                let (x, tgt) = crop_pair(&bundle.degraded, &bundle.clean, schedule.crop, &mut crop_rng);
                let mut tape = Tape::new();
                let xid = tape.leaf(clip_to_tensor(&x));
                let mut ids = Vec::new();
                let (_, corrected) = det.forward_t(&mut tape, xid, &mut ids);
                // masks and weights derive from the detached corrected clip
                let corrected_clip = tensor_to_clip(tape.value(corrected));
                let plan = plan_mse(&corrected_clip, &registry, &opts)?;
                let enhanced = tape.enhance_blend(corrected, &plan.mask, &plan.weights);
                let out = deb.forward_t(&mut tape, enhanced, &mut ids);
                let loss = charbonnier_t(&mut tape, out, &clip_to_tensor(&tgt));
                epoch_loss += tape.value(loss).item().f64();
                let mut grads = tape.backward(loss);
                acc.add(ids.iter().map(|&id| grads.take(id)).collect());
                if acc.count == schedule.batch || step + 1 == n_train {
                    let mean = acc.take_mean();
                    let params: Vec<(String, &mut Tensor<S>)> = det
                        .named_params_mut()
                        .into_iter()
                        .chain(deb.named_params_mut())
                        .collect();
                    opt.step(lr, params, &mean);
                }
            }
            let mut val_psnr = 0.0;
            for bundle in val_set {
                let restored = restore(&bundle.degraded, &det, &deb, &registry, &opts)?;
                val_psnr += psnr(&restored, &bundle.clean)?;
            }
            val_psnr /= val_set.len().max(1) as f64;
            log.push(EpochRecord {
                phase: 2,
                epoch,
                lr,
                loss: epoch_loss / n_train as f64,
                val_psnr,
            });
        }
    }

    Ok(TrainOutcome { det, deb, log })
}
