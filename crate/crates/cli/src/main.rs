//! Command-line front end for the counting/localization pipeline:
//! synthesize or tile datasets, train, predict, evaluate, render.

mod settings;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use countloc::dataset::{
    load_dataset, read_pgm, read_ppm, samples_with_split, save_dataset, split_samples, synthesize,
    write_atomic, write_pgm, write_ppm, Placement, Raster, Sample, Split, SynthSpec,
};
use countloc::localization::{read_detections_csv, write_detections_csv, Detection};
use countloc::metrics::{report_to_csv, report_to_table};
use countloc::network::Model;
use countloc::trainer::{evaluate_detections, evaluate_with_counts, predict_sample, train};
use settings::{Settings, SETTINGS_HELP};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "countloc",
    about = "Confidence-map object counting and localization",
    after_help = SETTINGS_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SettingsArgs {
    /// Settings file (KEY=VALUE per line, # comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting (repeatable); see the list below
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl SettingsArgs {
    fn build(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_config_file(path)?;
        }
        s.apply_overrides(&self.sets)?;
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic disk dataset with annotations
    Synth {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Square image size in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fixed object count (sets both bounds)
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 5)]
        count_min: usize,
        #[arg(long, default_value_t = 15)]
        count_max: usize,
        #[arg(long, default_value_t = 2.5)]
        radius_min: f64,
        #[arg(long, default_value_t = 4.5)]
        radius_max: f64,
        /// jittered-grid or uniform
        #[arg(long, default_value = "jittered-grid")]
        placement: String,
        #[arg(long, default_value_t = 10.0)]
        min_separation: f64,
        /// train,val,test fractions
        #[arg(long, default_value = "0.7,0.1,0.2")]
        fractions: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Cut an orthomosaic raster into annotated patches
    Tile {
        /// Input P6 raster
        #[arg(long)]
        raster: PathBuf,
        /// Annotation JSON for the raster (single record)
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        patch: usize,
        /// train,val,test fractions
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Train a model on a dataset directory
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory (config echo, logs, checkpoints)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Run a checkpoint over images and export detections as CSV
    Predict {
        /// Checkpoint path (expects a sibling .cfg)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or a single P6 image
        #[arg(long)]
        images: PathBuf,
        /// Restrict a dataset to one split (train|val|test|all)
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write each image's final confidence map as P5 into this dir
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Score a checkpoint or a detections CSV against a dataset
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// train|val|test|all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        /// Precomputed detections CSV (image-space coordinates)
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Report CSV path; the table always prints to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Visualize detections over an image, or a confidence map
    Render {
        /// Base P6 image (required for detection overlays)
        #[arg(long)]
        image: Option<PathBuf>,
        /// Detections CSV to draw as 3x3 crosses
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Image id to select from the CSV (defaults to the first)
        #[arg(long)]
        image_id: Option<String>,
        /// P5 confidence map to render as grayscale
        #[arg(long)]
        map: Option<PathBuf>,
        /// Draw a circle of this radius (pixels) around each detection
        #[arg(long)]
        circle_radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n,
            size,
            count,
            count_min,
            count_max,
            radius_min,
            radius_max,
            placement,
            min_separation,
            fractions,
            seed,
            settings,
        } => {
            settings.build()?; // validates --set keys even though synth ignores them
            let (count_min, count_max) = match count {
                Some(c) => (c, c),
                None => (count_min, count_max),
            };
            let spec = SynthSpec {
                samples: n,
                image_size: size,
                count_min,
                count_max,
                radius_min,
                radius_max,
                placement: placement.parse::<Placement>()?,
                min_separation,
                seed,
                ..SynthSpec::default()
            };
            let mut samples = synthesize(&spec)?;
            split_samples(&mut samples, parse_fractions(&fractions)?, seed)?;
            save_dataset(&out, &samples)?;
            write_meta(&out, &format!("synth n={n} size={size} seed={seed}"))?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Tile {
            raster,
            annotations,
            out,
            patch,
            fractions,
            seed,
            settings,
        } => {
            settings.build()?;
            let image = read_ppm(&raster)?;
            let records = countloc::confmap::load_annotations(&annotations)?;
            let record = match records.len() {
                1 => &records[0],
                n => bail!("expected one annotation record for the raster, found {n}"),
            };
            if record.width as usize != image.w || record.height as usize != image.h {
                bail!(
                    "annotation frame {}x{} does not match raster {}x{}",
                    record.width,
                    record.height,
                    image.w,
                    image.h
                );
            }
            let points = record.point_set()?;
            let mut samples = countloc::dataset::tile(&image, &points, patch)?;
            split_samples(&mut samples, parse_fractions(&fractions)?, seed)?;
            countloc::dataset::assign_density_terciles(&mut samples);
            save_dataset(&out, &samples)?;
            write_meta(&out, &format!("tile patch={patch} seed={seed}"))?;
            println!("wrote {} tiles to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { dataset, out, settings } => {
            let s = settings.build()?;
            let samples = load_dataset(&dataset)?;
            let net = s.network_config()?;
            let tc = s.train_config()?;
            let mut model = Model::new(net, s.model_seed)?;
            std::fs::create_dir_all(&out)?;
            write_atomic(&out.join("config.txt"), s.to_text().as_bytes())?;
            let log = train(&mut model, &samples, &tc, Some(&out))?;
            write_meta(&out, "train")?;
            println!(
                "trained {} epochs; best val MAE {:.4} at epoch {}; run dir {}",
                log.epochs.len(),
                log.best_val_mae,
                log.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Predict {
            checkpoint,
            images,
            split,
            out,
            dump_maps,
            settings,
        } => {
            let s = settings.build()?;
            let model = Model::load(&checkpoint)?;
            let peaks = s.peak_params()?;
            let samples = gather_images(&images, &split)?;
            let mut groups = Vec::with_capacity(samples.len());
            for sample in &samples {
                let (dets, map) = predict_sample(&model, sample, &peaks)?;
                if let Some(dir) = &dump_maps {
                    std::fs::create_dir_all(dir)?;
                    let gray: Vec<u8> = map.data().iter().map(|v| (v * 255.0).round() as u8).collect();
                    write_pgm(dir.join(format!("{}_ct.pgm", sample.id)), map.width(), map.height(), &gray)?;
                }
                groups.push((sample.id.clone(), dets));
            }
            write_detections_csv(&out, &groups)?;
            let total: usize = groups.iter().map(|(_, d)| d.len()).sum();
            println!("{} detections over {} images -> {}", total, groups.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            dataset,
            split,
            checkpoint,
            detections,
            out,
            settings,
        } => {
            let s = settings.build()?;
            let samples = load_dataset(&dataset)?;
            let subset = filter_split(&samples, &split)?;
            let peaks = s.peak_params()?;
            let report = match (&checkpoint, &detections) {
                (Some(ckpt), None) => {
                    let model = Model::load(ckpt)?;
                    evaluate_with_counts(&model, &subset, &peaks, s.match_radius, s.density_mode())?
                }
                (None, Some(csv)) => {
                    let groups = read_detections_csv(csv)?;
                    let dets: Vec<(String, Vec<Detection>)> = groups;
                    evaluate_detections(&subset, &dets, s.match_radius, s.stride, s.density_mode())?
                }
                _ => bail!("evaluate needs exactly one of --checkpoint or --detections"),
            };
            let header = vec![
                ("tau".to_string(), format!("{}", s.tau)),
                ("delta".to_string(), format!("{}", s.delta)),
                ("match_radius_map_px".to_string(), format!("{}", s.match_radius)),
                ("split".to_string(), split.clone()),
            ];
            let csv = report_to_csv(&report, &header);
            if let Some(path) = &out {
                write_atomic(path, csv.as_bytes())?;
            }
            print!(
                "# tau={} delta={} match_radius_map_px={} split={split}\n{}",
                s.tau,
                s.delta,
                s.match_radius,
                report_to_table(&report)
            );
            Ok(())
        }
        Command::Render {
            image,
            detections,
            image_id,
            map,
            circle_radius,
            out,
            settings,
        } => {
            settings.build()?;
            match (&image, &map, &detections) {
                (None, Some(map_path), None) => {
                    // raw layer view: the map itself as grayscale
                    let (w, h, gray) = read_pgm(map_path)?;
                    let mut raster = Raster::new(w, h);
                    for y in 0..h {
                        for x in 0..w {
                            let v = gray[y * w + x];
                            raster.set_pixel(x, y, (v, v, v));
                        }
                    }
                    write_ppm(&out, &raster)?;
                }
                (Some(img_path), map_opt, dets_opt) => {
                    let mut raster = read_ppm(img_path)?;
                    if let Some(map_path) = map_opt {
                        blend_map(&mut raster, map_path)?;
                    }
                    if let Some(dets_path) = dets_opt {
                        let groups = read_detections_csv(dets_path)?;
                        let group = match &image_id {
                            Some(id) => groups
                                .iter()
                                .find(|(gid, _)| gid == id)
                                .ok_or_else(|| anyhow!("no detections for image id `{id}`"))?,
                            None => groups
                                .first()
                                .ok_or_else(|| anyhow!("detections file is empty"))?,
                        };
                        for det in &group.1 {
                            draw_cross(&mut raster, det.image_x, det.image_y);
                            if let Some(r) = circle_radius {
                                draw_circle(&mut raster, det.image_x, det.image_y, r);
                            }
                        }
                    }
                    write_ppm(&out, &raster)?;
                }
                _ => bail!("render needs --map alone, or --image with --detections and/or --map"),
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad fraction `{s}`")))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("--fractions expects three comma-separated values");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn filter_split<'a>(samples: &'a [Sample], split: &str) -> Result<Vec<&'a Sample>> {
    let subset = match split {
        "all" => samples.iter().collect(),
        other => samples_with_split(samples, other.parse::<Split>()?),
    };
    if subset.is_empty() {
        bail!("no samples in split `{split}`");
    }
    Ok(subset)
}

/// A dataset directory (optionally filtered by split) or one P6 image.
fn gather_images(path: &Path, split: &str) -> Result<Vec<Sample>> {
    if path.is_dir() {
        let samples = load_dataset(path)?;
        Ok(filter_split(&samples, split)?.into_iter().cloned().collect())
    } else {
        let raster = read_ppm(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".to_string());
        Ok(vec![Sample::new(id, raster, vec![])
            .map_err(|e| anyhow!("loading {}: {e}", path.display()))?])
    }
}

fn write_meta(dir: &Path, what: &str) -> Result<()> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // the only file that may differ between identical runs
    write_atomic(&dir.join("meta.txt"), format!("command={what}\nunix_time={stamp}\n").as_bytes())?;
    Ok(())
}

fn blend_map(raster: &mut Raster, map_path: &Path) -> Result<()> {
    let (mw, mh, gray) = read_pgm(map_path)?;
    if !raster.w.is_multiple_of(mw) || !raster.h.is_multiple_of(mh) {
        bail!("map {mw}x{mh} does not tile the image {}x{}", raster.w, raster.h);
    }
    let (sx, sy) = (raster.w / mw, raster.h / mh);
    for y in 0..raster.h {
        for x in 0..raster.w {
            let v = gray[(y / sy) * mw + x / sx] as u16;
            let (r, g, b) = raster.pixel(x, y);
            // push the map into the red channel, dim the rest
            let nr = (r as u16 + 2 * v).min(255) as u8;
            raster.set_pixel(x, y, (nr, (g as f32 * 0.7) as u8, (b as f32 * 0.7) as u8));
        }
    }
    Ok(())
}

fn draw_cross(raster: &mut Raster, cx: f64, cy: f64) {
    let x = cx.round() as isize;
    let y = cy.round() as isize;
    for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (px, py) = (x + dx, y + dy);
        if px >= 0 && py >= 0 && (px as usize) < raster.w && (py as usize) < raster.h {
            raster.set_pixel(px as usize, py as usize, (255, 0, 0));
        }
    }
}

fn draw_circle(raster: &mut Raster, cx: f64, cy: f64, radius: f64) {
    let x0 = ((cx - radius - 1.0).floor().max(0.0)) as usize;
    let y0 = ((cy - radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + radius + 1.0).ceil() as usize).min(raster.w.saturating_sub(1));
    let y1 = ((cy + radius + 1.0).ceil() as usize).min(raster.h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if (d - radius).abs() <= 0.5 {
                raster.set_pixel(x, y, (255, 220, 0));
            }
        }
    }
}
