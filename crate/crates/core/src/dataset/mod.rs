//! Dataset handling: annotated samples, orthomosaic tiling, split
//! assignment, synthetic imagery, and the on-disk layout.
//!
//! A dataset directory holds `manifest.csv` (id, image path, split, density,
//! count), `annotations.json` (the validated point schema), and an `images/`
//! directory of P6 pixmaps.

mod ppm;
mod synth;
mod tile;

pub use ppm::{rasters_to_tensor, read_pgm, read_ppm, write_pgm, write_ppm, Raster};
pub use synth::{synthesize, Placement, SynthSpec};
pub use tile::tile;

use crate::confmap::{load_annotations, save_annotations, AnnotationRecord, Frame, PointSet};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Dataset(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Density {
    Low,
    Medium,
    High,
    Unassigned,
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::Low => "low",
            Density::Medium => "medium",
            Density::High => "high",
            Density::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Density {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Density::Low),
            "medium" => Ok(Density::Medium),
            "high" => Ok(Density::High),
            "unassigned" => Ok(Density::Unassigned),
            other => Err(Error::Dataset(format!("unknown density tag `{other}`"))),
        }
    }
}

/// One annotated image with its split and density tags.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Raster,
    /// Object centers in image-space pixels, inside the raster bounds.
    pub points: Vec<(f64, f64)>,
    pub split: Split,
    pub density: Density,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Raster, points: Vec<(f64, f64)>) -> Result<Self> {
        let sample = Sample {
            id: id.into(),
            image,
            points,
            split: Split::Unassigned,
            density: Density::Unassigned,
        };
        sample.point_set()?; // validates bounds
        Ok(sample)
    }

    pub fn point_set(&self) -> Result<PointSet> {
        PointSet::new(
            self.points.clone(),
            Frame::Image,
            self.image.w as f64,
            self.image.h as f64,
        )
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Deterministically shuffle and partition samples into train/val/test.
///
/// Fractions must sum to 1 (within 1e-9); group sizes are apportioned by
/// largest remainder so they are exact up to rounding. The shuffle is a
/// seeded Fisher-Yates over all indices, so adding or removing a sample
/// reshuffles the whole assignment; assignments are only stable for a fixed
/// sample list and seed.
pub fn split_samples(samples: &mut [Sample], fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let n = samples.len();
    let targets = apportion(n, &[ft, fv, fe]);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    for (rank, &idx) in indices.iter().enumerate() {
        samples[idx].split = if rank < targets[0] {
            Split::Train
        } else if rank < targets[0] + targets[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items over fractional shares.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Tag densities by count terciles of the given samples.
pub fn assign_density_terciles(samples: &mut [Sample]) {
    if samples.is_empty() {
        return;
    }
    let mut counts: Vec<usize> = samples.iter().map(|s| s.count()).collect();
    counts.sort_unstable();
    let n = counts.len();
    let b1 = counts[(n / 3).saturating_sub(1).min(n - 1)];
    let b2 = counts[(2 * n / 3).saturating_sub(1).min(n - 1)];
    for s in samples.iter_mut() {
        s.density = if s.count() <= b1 {
            Density::Low
        } else if s.count() <= b2 {
            Density::Medium
        } else {
            Density::High
        };
    }
}

pub fn samples_with_split(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Persist a dataset directory: images as P6, annotations, manifest.
pub fn save_dataset<P: AsRef<Path>>(dir: P, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::from("id,image_path,split,density,count\n");
    let mut annotations = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        write_ppm(dir.join(&rel), &s.image)?;
        manifest.push_str(&format!("{},{},{},{},{}\n", s.id, rel, s.split, s.density, s.count()));
        annotations.push(AnnotationRecord {
            image_path: rel,
            width: s.image.w as u32,
            height: s.image.h as u32,
            points: s.points.iter().map(|&(x, y)| [x, y]).collect(),
        });
    }
    save_annotations(dir.join("annotations.json"), &annotations)?;
    write_atomic(&dir.join("manifest.csv"), manifest.as_bytes())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset<P: AsRef<Path>>(dir: P) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let annotations = load_annotations(dir.join("annotations.json"))?;
    let by_path: HashMap<&str, &AnnotationRecord> =
        annotations.iter().map(|a| (a.image_path.as_str(), a)).collect();
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "id,image_path,split,density,count" {
                return Err(Error::Dataset(format!("unexpected manifest header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Dataset(format!("bad manifest row {}: {line}", lineno + 1)));
        }
        let rec = by_path
            .get(fields[1])
            .ok_or_else(|| Error::Dataset(format!("no annotations for image `{}`", fields[1])))?;
        let image = read_ppm(dir.join(fields[1]))?;
        if image.w != rec.width as usize || image.h != rec.height as usize {
            return Err(Error::Dataset(format!(
                "image `{}` is {}x{} but annotated as {}x{}",
                fields[1], image.w, image.h, rec.width, rec.height
            )));
        }
        let mut sample = Sample::new(fields[0], image, rec.points.iter().map(|p| (p[0], p[1])).collect())?;
        sample.split = fields[2].parse()?;
        sample.density = fields[3].parse()?;
        let count: usize = fields[4]
            .parse()
            .map_err(|_| Error::Dataset(format!("bad count in manifest row {}", lineno + 1)))?;
        if count != sample.count() {
            return Err(Error::Dataset(format!(
                "manifest count {count} disagrees with {} annotated points for `{}`",
                sample.count(),
                sample.id
            )));
        }
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_matches_reference_set_sizes() {
        // 3370 patches at the reference fractions land exactly on 2870/250/250
        let mut samples: Vec<Sample> = (0..3370)
            .map(|i| Sample::new(format!("s{i}"), Raster::new(4, 4), vec![]).unwrap())
            .collect();
        split_samples(&mut samples, (0.8516, 0.0742, 0.0742), 9).unwrap();
        let count = |sp: Split| samples.iter().filter(|s| s.split == sp).count();
        assert_eq!(count(Split::Train), 2870);
        assert_eq!(count(Split::Val), 250);
        assert_eq!(count(Split::Test), 250);
    }

    #[test]
    fn split_all_train_and_determinism() {
        let make = || -> Vec<Sample> {
            (0..17)
                .map(|i| Sample::new(format!("s{i}"), Raster::new(4, 4), vec![]).unwrap())
                .collect()
        };
        let mut a = make();
        split_samples(&mut a, (1.0, 0.0, 0.0), 3).unwrap();
        assert!(a.iter().all(|s| s.split == Split::Train));

        let mut b = make();
        let mut c = make();
        split_samples(&mut b, (0.5, 0.25, 0.25), 11).unwrap();
        split_samples(&mut c, (0.5, 0.25, 0.25), 11).unwrap();
        for (x, y) in b.iter().zip(&c) {
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let mut samples = vec![Sample::new("s", Raster::new(4, 4), vec![]).unwrap()];
        assert!(split_samples(&mut samples, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut raster = Raster::new(3, 2);
        raster.set_pixel(0, 0, (255, 0, 7));
        raster.set_pixel(2, 1, (1, 2, 3));
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &raster).unwrap();
        let loaded = read_ppm(&path).unwrap();
        assert_eq!(loaded, raster);

        let gray = vec![0u8, 128, 255, 64];
        let gpath = dir.path().join("map.pgm");
        write_pgm(&gpath, 2, 2, &gray).unwrap();
        assert_eq!(read_pgm(&gpath).unwrap(), (2, 2, gray));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = vec![
            Sample::new("a", Raster::new(8, 8), vec![(1.0, 2.0), (6.5, 7.0)]).unwrap(),
            Sample::new("b", Raster::new(8, 8), vec![(3.0, 3.0)]).unwrap(),
        ];
        samples[0].split = Split::Train;
        samples[1].split = Split::Test;
        samples[1].density = Density::High;
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].points, samples[0].points);
        assert_eq!(loaded[1].split, Split::Test);
        assert_eq!(loaded[1].density, Density::High);
        assert_eq!(loaded[0].image, samples[0].image);
    }

    #[test]
    fn raster_tensor_scaling() {
        let mut raster = Raster::new(2, 1);
        raster.set_pixel(0, 0, (255, 0, 51));
        let t = raster.to_tensor();
        assert_eq!(t.shape().c, 3);
        assert_eq!(t.data()[0], 1.0);
        assert!((t.data()[4] - 0.2).abs() < 1e-12);
    }
}
