use pmr_core::flow::FlowRegistry;
use pmr_core::media::psnr;
use pmr_pipeline::data::toy_dataset;
use pmr_pipeline::{
    ablate_orders, ablate_stages, restore, train_stagewise, ModelSpec, RestoreOptions,
    TrainSchedule,
};
use pmr_nn::deblur::DebConfig;
use pmr_nn::detilt::DetConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let joint: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-2);

    let sigma: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.8);
    let corr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(24.0);
    let start = Instant::now();
    let dataset: Vec<_> = (0..8u64)
        .map(|i| {
            let seed = 42u64.wrapping_add(1000 * i);
            let mut p = pmr_pipeline::data::toy_params(seed);
            p.sigma_tilt = sigma;
            p.corr_len = corr;
            pmr_pipeline::data::toy_bundle_with::<f32>(4, 48, 48, seed, &p).unwrap()
        })
        .collect();
    let _ = toy_dataset::<f32>;
    let models = ModelSpec {
        det: DetConfig { base_channels: 4, in_frames: 4, in_channels: 1, part_ratio: 0.25 },
        deb: DebConfig { base_channels: 6, heads: 1, in_channels: 1, residual_output: true },
    };
    let schedule = TrainSchedule {
        stage1_epochs: stage1,
        joint_epochs: joint,
        batch: 1,
        crop: 48,
        lr_init: lr,
        lr_final: 1e-5,
        seed: 7,
        holdout_clips: 2,
        ..Default::default()
    };
    let outcome = train_stagewise(&dataset, &models, &schedule).unwrap();
    let train_time = start.elapsed();

    for phase in [1u8, 2] {
        let records: Vec<_> = outcome.log.iter().filter(|r| r.phase == phase).collect();
        if records.is_empty() {
            continue;
        }
        let first = records.first().unwrap().loss;
        let last = records.last().unwrap().loss;
        println!(
            "phase {phase}: initial {first:.5} final {last:.5} ratio {:.3} | lr end {:.2e}",
            last / first,
            records.last().unwrap().lr
        );
    }

    let reg = FlowRegistry::standard();
    let opts = RestoreOptions::default();
    let mut d_before = 0.0;
    let mut d_after = 0.0;
    for bundle in &dataset[6..] {
        let restored = restore(&bundle.degraded, &outcome.det, &outcome.deb, &reg, &opts).unwrap();
        d_before += psnr(&bundle.degraded, &bundle.clean).unwrap();
        d_after += psnr(&restored, &bundle.clean).unwrap();
    }
    println!("holdout psnr: degraded {:.3} restored {:.3} delta {:+.3}", d_before / 2.0, d_after / 2.0, (d_after - d_before) / 2.0);

    // fresh eval clips for the ablations
    let eval: Vec<_> = (0..5u64)
        .map(|i| {
            let seed = 9000u64.wrapping_add(1000 * i);
            let mut p = pmr_pipeline::data::toy_params(seed);
            p.sigma_tilt = sigma;
            p.corr_len = corr;
            pmr_pipeline::data::toy_bundle_with::<f32>(4, 48, 48, seed, &p).unwrap()
        })
        .collect();
    let stages = ablate_stages(&eval, &outcome.det, &outcome.deb, &reg, &opts).unwrap();
    for row in &stages.rows {
        println!("stage {}: {} psnr {:.3} ssim {:.4}", row.experiment, row.stages, row.psnr, row.ssim);
    }
    let orders = ablate_orders(&eval, &outcome.det, &outcome.deb, &reg, &opts).unwrap();
    for row in &orders {
        println!("order {}: psnr {:.3} ssim {:.4}", row.order, row.psnr, row.ssim);
    }
    println!("total {:?} (train {:?})", start.elapsed(), train_time);
}
