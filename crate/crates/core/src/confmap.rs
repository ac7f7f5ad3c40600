//! Ground-truth confidence maps and the multi-stage training loss.
//!
//! Ground truth places a 2D Gaussian at every annotated object center; the
//! per-stage spread comes from a [`SigmaSchedule`] running from sigma_max
//! down to sigma_min. Overlapping kernels combine by pointwise max, which
//! keeps every value in `[0, 1]` and matches the sigmoid output range of
//! the network heads. Kernels are cut off at radius `4 * sigma`; anything
//! beyond contributes less than `e^-8 ~ 3.4e-4`.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tape, Tensor4, Var};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-stage Gaussian spreads, linearly spaced from sigma_max (stage 1)
/// down to sigma_min (stage T). A single-stage schedule uses sigma_min.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn make(stages: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        if stages == 0 {
            return Err(Error::invalid("sigma schedule needs at least one stage"));
        }
        if sigma_min <= 0.0 || !sigma_min.is_finite() || !sigma_max.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_min must be positive and finite, got {sigma_min}"
            )));
        }
        if sigma_max < sigma_min {
            return Err(Error::invalid(format!(
                "sigma_max {sigma_max} < sigma_min {sigma_min}"
            )));
        }
        if stages == 1 {
            return Ok(SigmaSchedule {
                sigmas: vec![sigma_min],
            });
        }
        let t = (stages - 1) as f64;
        let sigmas = (0..stages)
            .map(|i| (sigma_max * (t - i as f64) + sigma_min * i as f64) / t)
            .collect();
        Ok(SigmaSchedule { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn stages(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }
}

/// Coordinate frame of a point set: raw image pixels, or the stride-reduced
/// map grid the network operates on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Frame {
    Image,
    Map,
}

/// Object-center annotations (or detections) in continuous 2D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<(f64, f64)>,
    frame: Frame,
    width: f64,
    height: f64,
}

impl PointSet {
    /// Points must lie within `[0, width) x [0, height)`.
    pub fn new(points: Vec<(f64, f64)>, frame: Frame, width: f64, height: f64) -> Result<Self> {
        for &(x, y) in &points {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x >= width || y >= height {
                return Err(Error::invalid(format!(
                    "point ({x}, {y}) outside frame {width}x{height}"
                )));
            }
        }
        Ok(PointSet {
            points,
            frame,
            width,
            height,
        })
    }

    pub fn empty(frame: Frame, width: f64, height: f64) -> Self {
        PointSet {
            points: Vec::new(),
            frame,
            width,
            height,
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    /// Divide image-space coordinates (and frame dims) by the stride,
    /// keeping them continuous. No rounding happens here.
    pub fn to_map_space(&self, stride: usize) -> Result<PointSet> {
        if self.frame != Frame::Image {
            return Err(Error::invalid("to_map_space expects image-frame points"));
        }
        let s = stride as f64;
        Ok(PointSet {
            points: self.points.iter().map(|&(x, y)| (x / s, y / s)).collect(),
            frame: Frame::Map,
            width: self.width / s,
            height: self.height / s,
        })
    }
}

/// Single-channel grid of per-pixel object-presence likelihood in `[0, 1]`,
/// along with the image-to-map stride it was produced at.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    h: usize,
    w: usize,
    stride: usize,
    grid: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(h: usize, w: usize, stride: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "ConfidenceMap::new",
                left: format!("{h}x{w}"),
                right: format!("grid length {}", grid.len()),
            });
        }
        if !grid.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("confidence values must lie in [0, 1]"));
        }
        Ok(ConfidenceMap { h, w, stride, grid })
    }

    pub fn zeros(h: usize, w: usize, stride: usize) -> Self {
        ConfidenceMap {
            h,
            w,
            stride,
            grid: vec![0.0; h * w],
        }
    }

    /// Extract one image's single-channel map from a network output tensor.
    pub fn from_tensor(t: &Tensor4, image: usize, stride: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || image >= s.n {
            return Err(Error::ShapeMismatch {
                op: "ConfidenceMap::from_tensor",
                left: s.to_string(),
                right: format!("image index {image}, single channel expected"),
            });
        }
        let plane = s.h * s.w;
        let grid = t.data()[image * plane..(image + 1) * plane].to_vec();
        ConfidenceMap::new(s.h, s.w, stride, grid)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.grid[y * self.w + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.grid
    }

    /// View as a `1x1xh xw` tensor (training target or render source).
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new(Shape4::new(1, 1, self.h, self.w), self.grid.clone())
            .expect("confidence values are finite")
    }
}

/// Render the ground-truth map for one stage: the value at pixel `q` is the
/// max over centers `c` of `exp(-|q - c|^2 / (2 sigma^2))`, evaluated only
/// within `4 sigma` of each center. Points must be in map space; an empty
/// set renders all zeros.
pub fn render_gt_map(points: &PointSet, sigma: f64, out_h: usize, out_w: usize, stride: usize) -> Result<ConfidenceMap> {
    if points.frame() != Frame::Map {
        return Err(Error::invalid("render_gt_map expects map-frame points"));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = ConfidenceMap::zeros(out_h, out_w, stride);
    let radius = 4.0 * sigma;
    let r2_cut = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &(cx, cy) in points.points() {
        let x0 = ((cx - radius).ceil().max(0.0)) as usize;
        let x1 = ((cx + radius).floor()).min((out_w - 1) as f64);
        let y0 = ((cy - radius).ceil().max(0.0)) as usize;
        let y1 = ((cy + radius).floor()).min((out_h - 1) as f64);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for y in y0..=y1 {
            let dy = y as f64 - cy;
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let d2 = dx * dx + dy * dy;
                if d2 <= r2_cut {
                    let v = (-d2 * inv).exp();
                    let cell = &mut map.grid[y * out_w + x];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Stack per-image maps of equal size into an `n x 1 x h x w` target tensor.
pub fn maps_to_tensor(maps: &[&ConfidenceMap]) -> Result<Tensor4> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("maps_to_tensor: no maps"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.height() != h || m.width() != w {
            return Err(Error::ShapeMismatch {
                op: "maps_to_tensor",
                left: format!("{h}x{w}"),
                right: format!("{}x{}", m.height(), m.width()),
            });
        }
        data.extend_from_slice(m.data());
    }
    Tensor4::new(Shape4::new(maps.len(), 1, h, w), data)
}

/// Total training loss: per-stage sum of squared differences, summed over
/// stages, averaged over the batch.
pub fn multi_stage_loss(tape: &mut Tape, preds: &[Var], targets: &[Var]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "multi_stage_loss: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut stage_losses = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        stage_losses.push(tape.sum_squared_error(p, t)?);
    }
    let total = tape.add_scalars(&stage_losses)?;
    let batch = tape.shape(preds[0]).n;
    tape.scale(total, 1.0 / batch as f64)
}

/// One annotated image in the dataset annotation document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// Object centers as `[x, y]` in image-space pixels.
    pub points: Vec<[f64; 2]>,
}

impl AnnotationRecord {
    pub fn point_set(&self) -> Result<PointSet> {
        PointSet::new(
            self.points.iter().map(|p| (p[0], p[1])).collect(),
            Frame::Image,
            self.width as f64,
            self.height as f64,
        )
    }
}

/// Load and validate an annotation document: a JSON list of records whose
/// points all lie inside their image bounds.
pub fn load_annotations<P: AsRef<Path>>(path: P) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let records: Vec<AnnotationRecord> = serde_json::from_str(&text)?;
    for rec in &records {
        rec.point_set()
            .map_err(|e| Error::invalid(format!("{}: {e}", rec.image_path)))?;
    }
    Ok(records)
}

pub fn save_annotations<P: AsRef<Path>>(path: P, records: &[AnnotationRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    crate::dataset::write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_linear_spacing_examples() {
        let s = SigmaSchedule::make(4, 3.0, 1.0).unwrap();
        assert_eq!(s.sigmas(), &[3.0, 7.0 / 3.0, 5.0 / 3.0, 1.0]);
        let s = SigmaSchedule::make(2, 3.0, 1.0).unwrap();
        assert_eq!(s.sigmas(), &[3.0, 1.0]);
        let s = SigmaSchedule::make(1, 3.0, 1.0).unwrap();
        assert_eq!(s.sigmas(), &[1.0]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(SigmaSchedule::make(0, 3.0, 1.0).is_err());
        assert!(SigmaSchedule::make(4, 3.0, 0.0).is_err());
        assert!(SigmaSchedule::make(4, 1.0, 3.0).is_err());
    }

    #[test]
    fn map_space_conversion() {
        let pts = PointSet::new(vec![(256.0, 256.0)], Frame::Image, 512.0, 512.0).unwrap();
        let mapped = pts.to_map_space(8).unwrap();
        assert_eq!(mapped.points(), &[(32.0, 32.0)]);
        assert_eq!(mapped.frame(), Frame::Map);
        assert_eq!((mapped.width(), mapped.height()), (64.0, 64.0));

        let pts = PointSet::new(vec![(10.25, 3.5)], Frame::Image, 64.0, 64.0).unwrap();
        let same = pts.to_map_space(1).unwrap();
        assert_eq!(same.points(), pts.points());

        let edge = PointSet::new(vec![(511.5, 0.0)], Frame::Image, 512.0, 512.0).unwrap();
        let mapped = edge.to_map_space(8).unwrap();
        assert_eq!(mapped.points(), &[(63.9375, 0.0)]);
        assert!(mapped.points()[0].0 < mapped.width());
    }

    #[test]
    fn point_bounds_are_validated() {
        assert!(PointSet::new(vec![(64.0, 0.0)], Frame::Image, 64.0, 64.0).is_err());
        assert!(PointSet::new(vec![(-0.1, 0.0)], Frame::Image, 64.0, 64.0).is_err());
    }

    #[test]
    fn gaussian_peak_and_falloff() {
        let pts = PointSet::new(vec![(10.0, 12.0)], Frame::Map, 32.0, 32.0).unwrap();
        let sigma = 2.0;
        let map = render_gt_map(&pts, sigma, 32, 32, 8).unwrap();
        assert_eq!(map.at(10, 12), 1.0);
        // one sigma away along x
        assert!((map.at(12, 12) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn overlapping_kernels_take_the_max() {
        let pts = PointSet::new(vec![(5.0, 5.0), (7.0, 5.0)], Frame::Map, 16.0, 16.0).unwrap();
        let map = render_gt_map(&pts, 1.0, 16, 16, 8).unwrap();
        let expect = (-0.5f64).exp();
        assert!((map.at(6, 5) - expect).abs() < 1e-12, "midpoint is the max, not the sum");
        assert_eq!(map.at(5, 5), 1.0);
        assert_eq!(map.at(7, 5), 1.0);
    }

    #[test]
    fn empty_points_render_zero_map() {
        let pts = PointSet::empty(Frame::Map, 8.0, 8.0);
        let map = render_gt_map(&pts, 1.0, 8, 8, 8).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert!(render_gt_map(&PointSet::empty(Frame::Image, 8.0, 8.0), 1.0, 8, 8, 8).is_err());
    }

    #[test]
    fn truncation_stays_within_e_minus_eight() {
        // untruncated reference evaluated straight from the formula
        let centers = [(3.2, 4.1), (11.7, 9.3), (6.5, 13.9)];
        let sigma = 1.5;
        let pts = PointSet::new(centers.to_vec(), Frame::Map, 16.0, 16.0).unwrap();
        let map = render_gt_map(&pts, sigma, 16, 16, 8).unwrap();
        let mut max_dev = 0.0f64;
        for y in 0..16 {
            for x in 0..16 {
                let mut full = 0.0f64;
                for &(cx, cy) in &centers {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    full = full.max((-d2 / (2.0 * sigma * sigma)).exp());
                }
                max_dev = max_dev.max((full - map.at(x, y)).abs());
            }
        }
        assert!(max_dev <= (-8.0f64).exp(), "max deviation {max_dev}");
    }

    #[test]
    fn multi_stage_loss_reduces_to_per_stage_sums() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let rand_map = |tape: &mut Tape, rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            tape.leaf(&Tensor4::new(Shape4::new(1, 1, 3, 4), data).unwrap())
        };
        let preds: Vec<Var> = (0..3).map(|_| rand_map(&mut tape, &mut rng)).collect();
        let gts: Vec<Var> = (0..3).map(|_| rand_map(&mut tape, &mut rng)).collect();
        let total = multi_stage_loss(&mut tape, &preds, &gts).unwrap();
        let mut expect = 0.0;
        for t in 0..3 {
            let stage = tape.sum_squared_error(preds[t], gts[t]).unwrap();
            expect += tape.scalar(stage).unwrap();
        }
        assert!((tape.scalar(total).unwrap() - expect).abs() < 1e-12);

        // equal maps: zero; single stage: exactly the per-stage loss
        let zero = multi_stage_loss(&mut tape, &preds[..1], &preds[..1]).unwrap();
        assert_eq!(tape.scalar(zero).unwrap(), 0.0);
        let single = multi_stage_loss(&mut tape, &preds[..1], &gts[..1]).unwrap();
        let direct = tape.sum_squared_error(preds[0], gts[0]).unwrap();
        assert_eq!(tape.scalar(single).unwrap(), tape.scalar(direct).unwrap());

        assert!(multi_stage_loss(&mut tape, &preds[..2], &gts[..1]).is_err());
    }

    #[test]
    fn multi_stage_loss_averages_over_batch() {
        let mut tape = Tape::new();
        let pred = tape.leaf(&Tensor4::filled(Shape4::new(2, 1, 2, 2), 1.0).unwrap());
        let gt = tape.leaf(&Tensor4::zeros(Shape4::new(2, 1, 2, 2)));
        let loss = multi_stage_loss(&mut tape, &[pred], &[gt]).unwrap();
        // 8 unit residuals over a batch of 2
        assert_eq!(tape.scalar(loss).unwrap(), 4.0);
    }

    #[test]
    fn annotation_schema_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");
        let records = vec![AnnotationRecord {
            image_path: "images/a.ppm".into(),
            width: 64,
            height: 64,
            points: vec![[1.5, 2.0], [63.0, 0.0]],
        }];
        save_annotations(&path, &records).unwrap();
        let loaded = load_annotations(&path).unwrap();
        assert_eq!(loaded[0].points, records[0].points);

        std::fs::write(&path, r#"[{"image_path":"a","width":8,"height":8,"points":[[9.0,0.0]]}]"#).unwrap();
        assert!(load_annotations(&path).is_err(), "out-of-bounds point");

        std::fs::write(
            &path,
            r#"[{"image_path":"a","width":8,"height":8,"points":[],"extra":1}]"#,
        )
        .unwrap();
        assert!(load_annotations(&path).is_err(), "unknown field");
    }
}
