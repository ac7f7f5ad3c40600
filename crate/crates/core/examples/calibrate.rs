// scratch calibration driver for the end-to-end synthetic benchmark
use countloc::confmap::SigmaSchedule;
use countloc::dataset::{split_samples, synthesize, Sample, Split, SynthSpec};
use countloc::metrics::DensityMode;
use countloc::network::{Model, NetworkConfig};
use countloc::trainer::{evaluate_with_counts, train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let width_scale: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let sigma_min: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let stages: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    let model_seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(77);

    let spec = SynthSpec::default(); // 200 samples, 64x64, 5..15 disks
    let mut samples = synthesize(&spec).unwrap();
    split_samples(&mut samples, (0.7, 0.1, 0.2), 11).unwrap();
    let counts: Vec<usize> = samples.iter().map(|s| s.count()).collect();
    println!(
        "samples: {} (counts {}..{})",
        samples.len(),
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    );

    let cfg = NetworkConfig {
        input_size: 64,
        stages,
        backbone_widths: [8 * width_scale, 16 * width_scale, 16 * width_scale],
        ppm_scales: vec![1, 2, 3, 6],
        ppm_channels: 8 * width_scale,
        stage_widths: [8 * width_scale, 16 * width_scale],
        stride: 8,
    };
    println!("params: {}", cfg.param_count());
    let mut model = Model::new(cfg, model_seed).unwrap();
    let tc = TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 4,
        schedule: SigmaSchedule::make(stages, 3.0, sigma_min).unwrap(),
        seed: 5,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train(&mut model, &samples, &tc, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    for r in log.epochs.iter().step_by(5.max(epochs / 12)) {
        println!(
            "epoch {:3}: loss {:8.4} val_mae {:5.2} val_f {:.3} ({:.2}s)",
            r.epoch, r.train_loss, r.val_mae, r.val_f, r.wall_seconds
        );
    }
    println!(
        "best epoch {} val_mae {:.3}; train wall {:.1}s",
        log.best_epoch, log.best_val_mae, train_secs
    );

    let test: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    let report = evaluate_with_counts(&model, &test, &tc.peaks, tc.match_radius, DensityMode::Terciles).unwrap();
    println!(
        "test ({} imgs): MAE {:.3} RMSE {:.3} P {:.3} R {:.3} F {:.3}",
        report.overall.n_images,
        report.overall.mae,
        report.overall.rmse,
        report.overall.precision,
        report.overall.recall,
        report.overall.f_measure
    );
}
