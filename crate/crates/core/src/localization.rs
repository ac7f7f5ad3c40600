//! Object localization: thresholded local maxima of the final confidence map.
//!
//! A cell is a candidate peak when it strictly exceeds all in-bounds
//! 4-neighbors and the threshold tau. Candidates are then kept greedily in
//! confidence order (row-major tiebreak) subject to a minimum separation
//! delta, so the strongest evidence wins. Strict comparison means flat
//! plateaus produce no peak.

use crate::confmap::ConfidenceMap;
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Peak extraction parameters: confidence threshold `tau` in `(0, 1)` and
/// minimum Euclidean separation `delta` in map pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakParams {
    pub tau: f64,
    pub delta: f64,
}

impl PeakParams {
    pub fn new(tau: f64, delta: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must be in (0, 1), got {tau}")));
        }
        if delta < 0.0 || delta.is_nan() {
            return Err(Error::invalid(format!("delta must be non-negative, got {delta}")));
        }
        Ok(PeakParams { tau, delta })
    }
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams { tau: 0.35, delta: 1.0 }
    }
}

/// One detected object: integer-grid map position, its confidence, and the
/// image-space position under the half-pixel-center stride mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub image_x: f64,
    pub image_y: f64,
}

/// Map-space coordinate to image space: `(m + 0.5) * stride - 0.5`, the
/// center of the stride x stride pixel block behind map cell `m`.
#[inline]
pub fn map_to_image(m: f64, stride: usize) -> f64 {
    (m + 0.5) * stride as f64 - 0.5
}

/// Find peaks of a confidence map. Candidates must strictly exceed every
/// in-bounds 4-neighbor and tau; survivors keep pairwise distances > delta.
pub fn find_peaks(map: &ConfidenceMap, params: &PeakParams) -> Vec<Detection> {
    let (h, w) = (map.height(), map.width());
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.at(x, y);
            if v <= params.tau {
                continue;
            }
            let higher_or_equal_neighbor = (x > 0 && map.at(x - 1, y) >= v)
                || (x + 1 < w && map.at(x + 1, y) >= v)
                || (y > 0 && map.at(x, y - 1) >= v)
                || (y + 1 < h && map.at(x, y + 1) >= v);
            if !higher_or_equal_neighbor {
                candidates.push((v, y, x));
            }
        }
    }
    // strongest first; ties resolved by row-major position
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<Detection> = Vec::new();
    let d2_min = params.delta * params.delta;
    for (v, y, x) in candidates {
        let (xf, yf) = (x as f64, y as f64);
        let far_enough = kept.iter().all(|k| {
            let (dx, dy) = (k.x - xf, k.y - yf);
            dx * dx + dy * dy > d2_min
        });
        if far_enough {
            kept.push(Detection {
                x: xf,
                y: yf,
                confidence: v,
                image_x: map_to_image(xf, map.stride()),
                image_y: map_to_image(yf, map.stride()),
            });
        }
    }
    kept
}

/// Recompute image-space positions for a given stride.
pub fn to_image_space(detections: &[Detection], stride: usize) -> Vec<Detection> {
    detections
        .iter()
        .map(|d| Detection {
            image_x: map_to_image(d.x, stride),
            image_y: map_to_image(d.y, stride),
            ..*d
        })
        .collect()
}

/// Write detections grouped by image id: `image_id,x_image,y_image,confidence`
/// with six decimal places.
pub fn write_detections_csv<P: AsRef<Path>>(path: P, groups: &[(String, Vec<Detection>)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "image_id,x_image,y_image,confidence")?;
    for (id, dets) in groups {
        for d in dets {
            writeln!(out, "{id},{:.6},{:.6},{:.6}", d.image_x, d.image_y, d.confidence)?;
        }
    }
    crate::dataset::write_atomic(path.as_ref(), &out)
}

/// Read a detections CSV back, grouped by image id in file order.
/// Map-space positions are not stored in the file and read back as the
/// image-space values; use the image-space fields downstream.
pub fn read_detections_csv<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Vec<Detection>)>> {
    let reader = BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut groups: Vec<(String, Vec<Detection>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "image_id,x_image,y_image,confidence" {
                return Err(Error::invalid(format!("unexpected detections header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::invalid(format!("bad detections row {}: {line}", lineno + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number `{s}` in detections row {}", lineno + 1)))
        };
        let det = Detection {
            x: parse(fields[1])?,
            y: parse(fields[2])?,
            confidence: parse(fields[3])?,
            image_x: parse(fields[1])?,
            image_y: parse(fields[2])?,
        };
        match groups.last_mut() {
            Some((id, dets)) if id == fields[0] => dets.push(det),
            _ => groups.push((fields[0].to_string(), vec![det])),
        }
    }
    Ok(groups)
}
