//! Training loop and evaluation protocol.
//!
//! Each batch renders the per-stage ground-truth maps at the schedule's
//! sigmas, runs the full forward pass, sums the per-stage losses (batch
//! mean), backpropagates, and applies one SGD-momentum step. Every epoch
//! ends with full validation metrics; the checkpoint with the best
//! validation MAE is retained and restored into the model when training
//! finishes. A non-finite loss aborts training, leaving the last good
//! checkpoint on disk.

use crate::confmap::{maps_to_tensor, multi_stage_loss, render_gt_map, ConfidenceMap, SigmaSchedule};
use crate::dataset::{rasters_to_tensor, samples_with_split, Sample, Split};
use crate::error::{Error, Result};
use crate::localization::{find_peaks, Detection, PeakParams};
use crate::metrics::{match_point_slices, CountingReport, DensityMode, ImageResult};
use crate::network::{Model, Param};
use crate::tensor::{SgdMomentum, Tape};
use std::path::Path;
use std::time::Instant;

/// Training hyperparameters. Defaults are the reference protocol: SGD with
/// momentum 0.9, learning rate 0.01, 100 epochs, four stages with sigmas
/// from 3 down to 1, tau 0.35, delta 1, match radius 3 map pixels.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: SigmaSchedule,
    pub peaks: PeakParams,
    /// Matching radius for validation metrics, in map pixels.
    pub match_radius: f64,
    pub seed: u64,
    /// Extra rolling checkpoint every N epochs; 0 disables it.
    pub checkpoint_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 4,
            schedule: SigmaSchedule::make(4, 3.0, 1.0).expect("default schedule is valid"),
            peaks: PeakParams::default(),
            match_radius: 3.0,
            seed: 0,
            checkpoint_cadence: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is permitted: a null update, useful for harness checks
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.match_radius < 0.0 || self.match_radius.is_nan() {
            return Err(Error::invalid("match radius must be non-negative"));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_r2: Option<f64>,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f: f64,
    pub wall_seconds: f64,
}

/// Append-only record of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl TrainLog {
    /// Metric rows only; wall-clock times live in [`TrainLog::to_timing_csv`]
    /// so run outputs stay byte-identical across repeats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mae,val_rmse,val_r2,val_precision,val_recall,val_f\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
                r.epoch,
                r.train_loss,
                r.val_mae,
                r.val_rmse,
                r.val_r2.map(|v| format!("{v:.6}")).unwrap_or_default(),
                r.val_precision,
                r.val_recall,
                r.val_f
            ));
        }
        out
    }

    pub fn to_timing_csv(&self) -> String {
        let mut out = String::from("epoch,wall_seconds\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.3}\n", r.epoch, r.wall_seconds));
        }
        out
    }
}

/// Sum of per-stage losses, batch-averaged, for one batch of samples under
/// the current parameters. No gradients, no updates.
pub fn batch_loss(model: &Model, batch: &[&Sample], schedule: &SigmaSchedule) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let (preds, targets) = forward_batch(model, &bound, &mut tape, batch, schedule, false)?;
    let loss = multi_stage_loss(&mut tape, &preds, &targets)?;
    tape.scalar(loss)
}

fn forward_batch(
    model: &Model,
    bound: &crate::network::BoundModel,
    tape: &mut Tape,
    batch: &[&Sample],
    schedule: &SigmaSchedule,
    _trainable: bool,
) -> Result<(Vec<crate::tensor::Var>, Vec<crate::tensor::Var>)> {
    let stride = model.config().stride;
    let map_h = model.config().input_size / stride;
    let map_w = map_h;
    let rasters: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let input = rasters_to_tensor(&rasters)?;
    let input_var = tape.leaf(&input);
    let preds = bound.model_forward(tape, input_var)?;

    let mut targets = Vec::with_capacity(schedule.stages());
    for &sigma in schedule.sigmas() {
        let mut gt_maps = Vec::with_capacity(batch.len());
        for s in batch {
            let pts = s.point_set()?.to_map_space(stride)?;
            gt_maps.push(render_gt_map(&pts, sigma, map_h, map_w, stride)?);
        }
        let refs: Vec<&ConfidenceMap> = gt_maps.iter().collect();
        let target_tensor = maps_to_tensor(&refs)?;
        targets.push(tape.leaf(&target_tensor));
    }
    Ok((preds, targets))
}

/// Train in place. Returns the log; the model ends at the parameters of the
/// best-validation-MAE epoch. With a run directory, `best.pkc`/`best.cfg`
/// track the best epoch as training progresses.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.schedule.stages() != model.config().stages {
        return Err(Error::invalid(format!(
            "schedule has {} sigmas but the model has {} stages",
            cfg.schedule.stages(),
            model.config().stages
        )));
    }
    let train_set = samples_with_split(samples, Split::Train);
    let val_set = samples_with_split(samples, Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(format!(
            "training needs non-empty train and val splits (got {} / {})",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut optimizer = SgdMomentum::new(cfg.learning_rate, cfg.momentum)?;
    let mut log = TrainLog {
        best_val_mae: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best_params: Option<Vec<Param>> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = shuffled_indices(train_set.len(), cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            // a forward that overflows the finite range is divergence too
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::TrainDiverged { epoch, batch: batch_no },
                other => other,
            };
            let (preds, targets) =
                forward_batch(model, &bound, &mut tape, &batch, &cfg.schedule, true).map_err(diverged)?;
            let loss = multi_stage_loss(&mut tape, &preds, &targets).map_err(diverged)?;
            let loss_value = tape.scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::TrainDiverged {
                    epoch,
                    batch: batch_no,
                });
            }
            tape.backward(loss)?;
            model.absorb_grads(&bound, &tape)?;
            optimizer.step(model.params_mut())?;
            loss_sum += loss_value;
            batches += 1;
        }

        let report = evaluate_with_counts(model, &val_set, &cfg.peaks, cfg.match_radius, DensityMode::Terciles)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::TrainDiverged { epoch, batch: batches },
                other => other,
            })?;
        let g = &report.overall;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mae: g.mae,
            val_rmse: g.rmse,
            val_r2: g.r2,
            val_precision: g.precision,
            val_recall: g.recall,
            val_f: g.f_measure,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let improved = record.val_mae < log.best_val_mae;
        if improved {
            log.best_val_mae = record.val_mae;
            log.best_epoch = epoch;
            best_params = Some(model.params().to_vec());
            if let Some(dir) = run_dir {
                model.save(dir.join("best.pkc"))?;
            }
        }
        if cfg.checkpoint_cadence > 0 && epoch % cfg.checkpoint_cadence == 0 {
            if let Some(dir) = run_dir {
                model.save(dir.join("last.pkc"))?;
            }
        }
        log.epochs.push(record);
        if let Some(dir) = run_dir {
            crate::dataset::write_atomic(&dir.join("trainlog.csv"), log.to_csv().as_bytes())?;
            crate::dataset::write_atomic(&dir.join("timing.csv"), log.to_timing_csv().as_bytes())?;
        }
    }

    if let Some(best) = best_params {
        for (param, saved) in model.params_mut().zip(best) {
            *param.1 = saved.tensor;
        }
    }
    Ok(log)
}

fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Detections and the final confidence map for one sample.
pub fn predict_sample(model: &Model, sample: &Sample, peaks: &PeakParams) -> Result<(Vec<Detection>, ConfidenceMap)> {
    let maps = model.forward_maps(&sample.image.to_tensor())?;
    let last = maps.last().ok_or_else(|| Error::invalid("model produced no maps"))?;
    let map = ConfidenceMap::from_tensor(last, 0, model.config().stride)?;
    let detections = find_peaks(&map, peaks);
    Ok((detections, map))
}

fn image_result(sample: &Sample, detections: &[Detection], match_radius_map: f64, stride: usize) -> Result<ImageResult> {
    // match in image space; the radius is given in map pixels
    let gt = sample.point_set()?;
    let pred: Vec<(f64, f64)> = detections.iter().map(|d| (d.image_x, d.image_y)).collect();
    let matching = match_point_slices(gt.points(), &pred, match_radius_map * stride as f64)?;
    ImageResult::new(sample.id.clone(), gt.len(), pred.len(), matching.matches)
}

/// Per-image forward, peak extraction, and matching, aggregated into the
/// full counting report with its density breakdown.
pub fn evaluate_with_counts(
    model: &Model,
    samples: &[&Sample],
    peaks: &PeakParams,
    match_radius_map: f64,
    density: DensityMode,
) -> Result<CountingReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: empty sample list"));
    }
    let stride = model.config().stride;
    let mut results = Vec::with_capacity(samples.len());
    for sample in samples {
        let (detections, _) = predict_sample(model, sample, peaks)?;
        results.push(image_result(sample, &detections, match_radius_map, stride)?);
    }
    CountingReport::build(&results, density)
}

/// Evaluate from precomputed detections (image space), matching against the
/// samples' annotations.
pub fn evaluate_detections(
    samples: &[&Sample],
    detections_by_image: &[(String, Vec<Detection>)],
    match_radius_map: f64,
    stride: usize,
    density: DensityMode,
) -> Result<CountingReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: empty sample list"));
    }
    let mut results = Vec::with_capacity(samples.len());
    for sample in samples {
        let empty: Vec<Detection> = Vec::new();
        let dets = detections_by_image
            .iter()
            .find(|(id, _)| *id == sample.id)
            .map(|(_, d)| d)
            .unwrap_or(&empty);
        results.push(image_result(sample, dets, match_radius_map, stride)?);
    }
    CountingReport::build(&results, density)
}
