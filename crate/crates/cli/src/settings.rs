//! Flat key=value settings shared by the pipeline commands.
//!
//! Precedence: command-line `--set` pairs override `--config` file entries,
//! which override the built-in defaults. Unknown keys are rejected.

use anyhow::{anyhow, bail, Context, Result};
use countloc::confmap::SigmaSchedule;
use countloc::localization::PeakParams;
use countloc::metrics::DensityMode;
use countloc::network::NetworkConfig;
use countloc::trainer::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Settings {
    pub input_size: usize,
    pub stages: usize,
    pub backbone_widths: [usize; 3],
    pub ppm_scales: Vec<usize>,
    pub ppm_channels: usize,
    pub stage_widths: [usize; 2],
    pub stride: usize,
    pub model_seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub seed: u64,
    pub checkpoint_cadence: usize,
    pub tau: f64,
    pub delta: f64,
    pub match_radius: f64,
    /// `None` means balanced terciles derived from the data.
    pub density_boundaries: Option<(usize, usize)>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            input_size: 512,
            stages: 4,
            backbone_widths: [64, 128, 256],
            ppm_scales: vec![1, 2, 3, 6],
            ppm_channels: 512,
            stage_widths: [128, 512],
            stride: 8,
            model_seed: 0,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 4,
            sigma_max: 3.0,
            sigma_min: 1.0,
            seed: 0,
            checkpoint_cadence: 0,
            tau: 0.35,
            delta: 1.0,
            match_radius: 3.0,
            density_boundaries: None,
        }
    }
}

/// One line per key, shown in `--help`. Keep in sync with `Default`; a unit
/// test cross-checks every value.
pub const SETTINGS_HELP: &str = "\
Settings (via --set KEY=VALUE or a --config file, one KEY=VALUE per line):
  input_size=512            network input resolution (multiple of stride)
  stages=4                  refinement stages T
  backbone_widths=64,128,256  feature extractor channel widths
  ppm_scales=1,2,3,6        pyramid pooling grid sizes
  ppm_channels=512          filters in each pyramid level conv
  stage_widths=128,512      stage conv width and stage-1 1x1 width
  stride=8                  image-to-map downscale (fixed by the architecture)
  model_seed=0              weight initialization seed
  learning_rate=0.01        SGD learning rate
  momentum=0.9              SGD momentum
  epochs=100                training epochs
  batch_size=4              images per training batch
  sigma_max=3               first-stage Gaussian spread (map px)
  sigma_min=1               last-stage Gaussian spread (map px)
  seed=0                    shuffling/ordering seed
  checkpoint_cadence=0      extra rolling checkpoint every N epochs (0 = off)
  tau=0.35                  peak confidence threshold
  delta=1                   minimum peak separation (map px)
  match_radius=3            match radius for evaluation (map px)
  density_boundaries=auto   low/medium/high count boundaries, or `B1,B2`";

impl Settings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "input_size" => self.input_size = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "backbone_widths" => {
                let v = parse_list(key, value)?;
                self.backbone_widths = v
                    .try_into()
                    .map_err(|_| anyhow!("backbone_widths needs exactly 3 values"))?;
            }
            "ppm_scales" => self.ppm_scales = parse_list(key, value)?,
            "ppm_channels" => self.ppm_channels = parse(key, value)?,
            "stage_widths" => {
                let v = parse_list(key, value)?;
                self.stage_widths = v
                    .try_into()
                    .map_err(|_| anyhow!("stage_widths needs exactly 2 values"))?;
            }
            "stride" => self.stride = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "sigma_max" => self.sigma_max = parse(key, value)?,
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_cadence" => self.checkpoint_cadence = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "match_radius" => self.match_radius = parse(key, value)?,
            "density_boundaries" => {
                if value == "auto" {
                    self.density_boundaries = None;
                } else {
                    let v: Vec<usize> = parse_list(key, value)?;
                    if v.len() != 2 {
                        bail!("density_boundaries needs `auto` or two values");
                    }
                    self.density_boundaries = Some((v[0], v[1]));
                }
            }
            other => bail!("unknown setting `{other}` (see --help for the full list)"),
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected KEY=VALUE", path.display(), lineno + 1))?;
            self.apply(key, value)
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{pair}`"))?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// All effective settings, as a config-file-compatible document.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input_size={}\nstages={}\nbackbone_widths={}\nppm_scales={}\nppm_channels={}\nstage_widths={}\nstride={}\nmodel_seed={}\nlearning_rate={}\nmomentum={}\nepochs={}\nbatch_size={}\nsigma_max={}\nsigma_min={}\nseed={}\ncheckpoint_cadence={}\ntau={}\ndelta={}\nmatch_radius={}\ndensity_boundaries={}\n",
            self.input_size,
            self.stages,
            list(&self.backbone_widths),
            list(&self.ppm_scales),
            self.ppm_channels,
            list(&self.stage_widths),
            self.stride,
            self.model_seed,
            self.learning_rate,
            self.momentum,
            self.epochs,
            self.batch_size,
            self.sigma_max,
            self.sigma_min,
            self.seed,
            self.checkpoint_cadence,
            self.tau,
            self.delta,
            self.match_radius,
            match self.density_boundaries {
                None => "auto".to_string(),
                Some((a, b)) => format!("{a},{b}"),
            }
        )
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            input_size: self.input_size,
            stages: self.stages,
            backbone_widths: self.backbone_widths,
            ppm_scales: self.ppm_scales.clone(),
            ppm_channels: self.ppm_channels,
            stage_widths: self.stage_widths,
            stride: self.stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: SigmaSchedule::make(self.stages, self.sigma_max, self.sigma_min)?,
            peaks: self.peak_params()?,
            match_radius: self.match_radius,
            seed: self.seed,
            checkpoint_cadence: self.checkpoint_cadence,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn peak_params(&self) -> Result<PeakParams> {
        Ok(PeakParams::new(self.tau, self.delta)?)
    }

    pub fn density_mode(&self) -> DensityMode {
        match self.density_boundaries {
            None => DensityMode::Terciles,
            Some((a, b)) => DensityMode::Boundaries(a, b),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("bad value `{value}` for setting `{key}`"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}
