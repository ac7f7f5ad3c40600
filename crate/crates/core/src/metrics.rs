//! Counting and localization metrics: MAE, RMSE, R^2, precision, recall,
//! F-measure, and the low/medium/high density breakdown.
//!
//! Precision/recall/F pool match, false-positive, and false-negative counts
//! over all images (micro-averaging), which keeps per-image ratios with no
//! predictions well defined.

use crate::confmap::PointSet;
use crate::error::{Error, Result};

/// Per-image outcome of matching predictions to ground truth.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub image_id: String,
    pub gt_count: usize,
    pub pred_count: usize,
    pub matches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ImageResult {
    pub fn new(image_id: impl Into<String>, gt_count: usize, pred_count: usize, matches: usize) -> Result<Self> {
        if matches > gt_count.min(pred_count) {
            return Err(Error::invalid(format!(
                "matches {matches} exceed min(gt {gt_count}, pred {pred_count})"
            )));
        }
        Ok(ImageResult {
            image_id: image_id.into(),
            gt_count,
            pred_count,
            matches,
            false_positives: pred_count - matches,
            false_negatives: gt_count - matches,
        })
    }
}

/// Count regression metrics over `(gt_count, pred_count)` pairs.
///
/// Returns `(mae, rmse, r2)`; `r2` is `None` when the ground-truth counts
/// have zero variance (the standard definition divides by it).
pub fn count_metrics(pairs: &[(usize, usize)]) -> Result<(f64, f64, Option<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("count_metrics: empty input"));
    }
    let n = pairs.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let gt_mean = pairs.iter().map(|&(g, _)| g as f64).sum::<f64>() / n;
    let mut ss_tot = 0.0;
    for &(g, p) in pairs {
        let diff = g as f64 - p as f64;
        abs_sum += diff.abs();
        sq_sum += diff * diff;
        let dev = g as f64 - gt_mean;
        ss_tot += dev * dev;
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let r2 = if ss_tot > 0.0 { Some(1.0 - sq_sum / ss_tot) } else { None };
    Ok((mae, rmse, r2))
}

/// Result of one-to-one point matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Accepted `(gt_index, pred_index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub matches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Greedy one-to-one matching: candidate pairs within `radius` sorted by
/// ascending distance (ties by index), each accepted when both endpoints
/// are still unused.
///
/// When the radius is small against the point spacing (the operating
/// regime here) this attains maximum-cardinality matchings; on dense
/// instances where many candidate pairs conflict, greedy acceptance can
/// fall short of the optimum by a match or two.
pub fn match_points(gt: &PointSet, pred: &PointSet, radius: f64) -> Result<Matching> {
    if gt.frame() != pred.frame() {
        return Err(Error::invalid(
            "match_points: point sets are in different coordinate frames",
        ));
    }
    match_point_slices(gt.points(), pred.points(), radius)
}

/// Matching on raw coordinate slices (both already in the same frame).
pub fn match_point_slices(gt: &[(f64, f64)], pred: &[(f64, f64)], radius: f64) -> Result<Matching> {
    if radius < 0.0 || radius.is_nan() {
        return Err(Error::invalid(format!("match radius must be non-negative, got {radius}")));
    }
    let r2 = radius * radius;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, &(gx, gy)) in gt.iter().enumerate() {
        for (pi, &(px, py)) in pred.iter().enumerate() {
            let (dx, dy) = (gx - px, gy - py);
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                candidates.push((d2, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (_, gi, pi) in candidates {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            pairs.push((gi, pi));
        }
    }
    let matches = pairs.len();
    Ok(Matching {
        matches,
        false_positives: pred.len() - matches,
        false_negatives: gt.len() - matches,
        pairs,
    })
}

/// Micro-averaged precision, recall, and F-measure over image results.
/// Empty denominators yield 0 by convention; so does `P + R = 0`.
pub fn prf(results: &[ImageResult]) -> (f64, f64, f64) {
    let matches: usize = results.iter().map(|r| r.matches).sum();
    let fp: usize = results.iter().map(|r| r.false_positives).sum();
    let fns: usize = results.iter().map(|r| r.false_negatives).sum();
    let precision = if matches + fp > 0 {
        matches as f64 / (matches + fp) as f64
    } else {
        0.0
    };
    let recall = if matches + fns > 0 {
        matches as f64 / (matches + fns) as f64
    } else {
        0.0
    };
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f)
}

/// How to split images into low/medium/high density groups by ground-truth
/// count: fixed boundaries (`low <= b1 < medium <= b2 < high`) or balanced
/// terciles derived from the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DensityMode {
    Boundaries(usize, usize),
    Terciles,
}

/// Low, medium, and high groups plus the `(b1, b2)` boundaries used.
pub type DensityGroups = (Vec<ImageResult>, Vec<ImageResult>, Vec<ImageResult>, (usize, usize));

/// Partition results into density groups; returns the groups and the
/// boundaries actually used.
pub fn density_split(results: &[ImageResult], mode: DensityMode) -> Result<DensityGroups> {
    let (b1, b2) = match mode {
        DensityMode::Boundaries(b1, b2) => {
            if b1 > b2 {
                return Err(Error::invalid(format!("density boundaries must ascend: {b1} > {b2}")));
            }
            (b1, b2)
        }
        DensityMode::Terciles => {
            if results.is_empty() {
                return Err(Error::invalid("density_split: no results for tercile mode"));
            }
            let mut counts: Vec<usize> = results.iter().map(|r| r.gt_count).collect();
            counts.sort_unstable();
            let n = counts.len();
            // boundary counts at the 1/3 and 2/3 cut positions keep ties together
            let b1 = counts[(n / 3).saturating_sub(1).min(n - 1)];
            let b2 = counts[(2 * n / 3).saturating_sub(1).min(n - 1)];
            (b1, b2)
        }
    };
    let mut low = Vec::new();
    let mut medium = Vec::new();
    let mut high = Vec::new();
    for r in results {
        if r.gt_count <= b1 {
            low.push(r.clone());
        } else if r.gt_count <= b2 {
            medium.push(r.clone());
        } else {
            high.push(r.clone());
        }
    }
    Ok((low, medium, high, (b1, b2)))
}

/// The six reported measures for one group of images. Empty groups report
/// NaN counting metrics and zero match ratios.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl GroupReport {
    pub fn from_results(results: &[ImageResult]) -> Result<Self> {
        if results.is_empty() {
            return Ok(GroupReport {
                n_images: 0,
                mae: f64::NAN,
                rmse: f64::NAN,
                r2: None,
                precision: 0.0,
                recall: 0.0,
                f_measure: 0.0,
            });
        }
        let pairs: Vec<(usize, usize)> = results.iter().map(|r| (r.gt_count, r.pred_count)).collect();
        let (mae, rmse, r2) = count_metrics(&pairs)?;
        let (precision, recall, f_measure) = prf(results);
        Ok(GroupReport {
            n_images: results.len(),
            mae,
            rmse,
            r2,
            precision,
            recall,
            f_measure,
        })
    }
}

/// Full evaluation report: overall metrics plus the density breakdown.
#[derive(Clone, Debug)]
pub struct CountingReport {
    pub overall: GroupReport,
    pub low: GroupReport,
    pub medium: GroupReport,
    pub high: GroupReport,
    /// Count boundaries separating low/medium and medium/high.
    pub boundaries: (usize, usize),
}

impl CountingReport {
    pub fn build(results: &[ImageResult], mode: DensityMode) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("cannot build a report from no images"));
        }
        let (low, medium, high, boundaries) = density_split(results, mode)?;
        Ok(CountingReport {
            overall: GroupReport::from_results(results)?,
            low: GroupReport::from_results(&low)?,
            medium: GroupReport::from_results(&medium)?,
            high: GroupReport::from_results(&high)?,
            boundaries,
        })
    }

    pub fn groups(&self) -> [(&'static str, &GroupReport); 4] {
        [
            ("overall", &self.overall),
            ("low", &self.low),
            ("medium", &self.medium),
            ("high", &self.high),
        ]
    }
}

fn fmt_r2(r2: Option<f64>) -> String {
    match r2 {
        Some(v) => format!("{v:.4}"),
        None => "undefined".to_string(),
    }
}

fn fmt_or_dash(v: f64, digits: usize) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.digits$}")
    }
}

/// Report as CSV, with `# key=value` header lines echoing the evaluation
/// settings. Column order: MAE, RMSE, R^2, Precision, Recall, F-Measure.
pub fn report_to_csv(report: &CountingReport, header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(&format!(
        "# density_boundaries=low<={},medium<={}\n",
        report.boundaries.0, report.boundaries.1
    ));
    out.push_str("group,n_images,mae,rmse,r2,precision,recall,f_measure\n");
    for (name, g) in report.groups() {
        out.push_str(&format!(
            "{name},{},{},{},{},{:.4},{:.4},{:.4}\n",
            g.n_images,
            fmt_or_dash(g.mae, 4),
            fmt_or_dash(g.rmse, 4),
            match g.r2 {
                Some(v) => format!("{v:.4}"),
                None => String::new(),
            },
            g.precision,
            g.recall,
            g.f_measure
        ));
    }
    out
}

/// Report as an aligned plain-text table in the reported column order.
pub fn report_to_table(report: &CountingReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>8} {:>10}\n",
        "Group", "Images", "MAE", "RMSE", "R2", "Precision", "Recall", "F-Measure"
    ));
    for (name, g) in report.groups() {
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>8} {:>10}\n",
            name,
            g.n_images,
            fmt_or_dash(g.mae, 3),
            fmt_or_dash(g.rmse, 3),
            fmt_r2(g.r2),
            format!("{:.3}", g.precision),
            format!("{:.3}", g.recall),
            format!("{:.3}", g.f_measure),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confmap::Frame;

    fn result(gt: usize, pred: usize, matches: usize) -> ImageResult {
        ImageResult::new("img", gt, pred, matches).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let (mae, rmse, r2) = count_metrics(&[(3, 3), (7, 7), (11, 11)]).unwrap();
        assert_eq!((mae, rmse), (0.0, 0.0));
        assert_eq!(r2, Some(1.0));
    }

    #[test]
    fn hand_computed_fixture() {
        let (mae, rmse, r2) = count_metrics(&[(11, 10), (14, 12)]).unwrap();
        assert!((mae - 1.5).abs() < 1e-12);
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((r2.unwrap() - (1.0 - 5.0 / 4.5)).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_behaves_uniformly() {
        let pairs: Vec<(usize, usize)> = (1..=6).map(|g| (g, g + 3)).collect();
        let (mae, rmse, _) = count_metrics(&pairs).unwrap();
        assert!((mae - 3.0).abs() < 1e-12);
        assert!((rmse - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_ground_truth_has_undefined_r2() {
        let (_, _, r2) = count_metrics(&[(5, 4), (5, 6)]).unwrap();
        assert_eq!(r2, None);
        assert!(count_metrics(&[]).is_err());
    }

    #[test]
    fn matching_fixtures() {
        let gt = PointSet::new(vec![(0.0, 0.0), (3.0, 0.0)], Frame::Map, 10.0, 10.0).unwrap();
        let pred = PointSet::new(vec![(1.0, 0.0)], Frame::Map, 10.0, 10.0).unwrap();
        let m = match_points(&gt, &pred, 2.0).unwrap();
        assert_eq!(m.matches, 1);
        assert_eq!(m.pairs, vec![(0, 0)], "matched to the nearer ground truth");
        assert_eq!((m.false_negatives, m.false_positives), (1, 0));

        let exact = match_points(&gt, &gt, 0.5).unwrap();
        assert_eq!(exact.matches, 2);

        let none = match_points(&gt, &PointSet::empty(Frame::Map, 10.0, 10.0), 2.0).unwrap();
        assert_eq!((none.matches, none.false_negatives), (0, 2));
    }

    #[test]
    fn matching_rejects_mixed_frames() {
        let a = PointSet::empty(Frame::Map, 4.0, 4.0);
        let b = PointSet::empty(Frame::Image, 4.0, 4.0);
        assert!(match_points(&a, &b, 1.0).is_err());
    }

    #[test]
    fn prf_fixtures() {
        let perfect = vec![result(4, 4, 4), result(2, 2, 2)];
        assert_eq!(prf(&perfect), (1.0, 1.0, 1.0));

        // matches 8, FP 2, FN 2 pooled over images
        let mixed = vec![result(5, 5, 4), result(5, 5, 4)];
        let (p, r, f) = prf(&mixed);
        assert!((p - 0.8).abs() < 1e-12 && (r - 0.8).abs() < 1e-12 && (f - 0.8).abs() < 1e-12);

        // zero recall forces zero F even with perfect precision
        let empty_preds = vec![result(3, 0, 0)];
        let (p, r, f) = prf(&empty_preds);
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn density_split_fixed_boundaries() {
        let results = vec![result(40, 40, 40), result(60, 60, 60), result(100, 100, 100)];
        let (low, med, high, bounds) = density_split(&results, DensityMode::Boundaries(52, 78)).unwrap();
        assert_eq!(bounds, (52, 78));
        assert_eq!(low[0].gt_count, 40);
        assert_eq!(med[0].gt_count, 60);
        assert_eq!(high[0].gt_count, 100);
    }

    #[test]
    fn density_split_terciles_balance() {
        let results: Vec<ImageResult> = (1..=9).map(|c| result(c, c, c)).collect();
        let (low, med, high, _) = density_split(&results, DensityMode::Terciles).unwrap();
        assert_eq!((low.len(), med.len(), high.len()), (3, 3, 3));
        assert!(low.iter().all(|r| r.gt_count <= 3));
        assert!(high.iter().all(|r| r.gt_count >= 7));
    }

    #[test]
    fn empty_groups_are_reported_as_such() {
        let results = vec![result(5, 5, 5), result(6, 6, 6)];
        let report = CountingReport::build(&results, DensityMode::Boundaries(10, 20)).unwrap();
        assert_eq!(report.low.n_images, 2);
        assert_eq!(report.medium.n_images, 0);
        assert!(report.medium.mae.is_nan());
        let table = report_to_table(&report);
        assert!(table.contains("F-Measure"));
    }

    /// Maximum-cardinality bipartite matching by augmenting paths, as an
    /// independent oracle for the greedy matcher.
    pub(super) fn optimal_match_count(gt: &[(f64, f64)], pred: &[(f64, f64)], radius: f64) -> usize {
        let r2 = radius * radius;
        let adj: Vec<Vec<usize>> = gt
            .iter()
            .map(|&(gx, gy)| {
                pred.iter()
                    .enumerate()
                    .filter(|(_, &(px, py))| (gx - px).powi(2) + (gy - py).powi(2) <= r2)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        fn augment(g: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
            for &p in &adj[g] {
                if !seen[p] {
                    seen[p] = true;
                    if owner[p].is_none() || augment(owner[p].unwrap(), adj, owner, seen) {
                        owner[p] = Some(g);
                        return true;
                    }
                }
            }
            false
        }
        let mut owner = vec![None; pred.len()];
        let mut total = 0;
        for g in 0..gt.len() {
            let mut seen = vec![false; pred.len()];
            if augment(g, &adj, &mut owner, &mut seen) {
                total += 1;
            }
        }
        total
    }

    #[test]
    fn greedy_matching_attains_optimal_cardinality_on_small_instances() {
        // radius kept small against the point spread, as in real matching;
        // with radii comparable to the spread greedy can lose a match to
        // chained conflicts (see the match_points docs)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        for trial in 0..200 {
            let ng = rng.gen_range(0..=6);
            let np = rng.gen_range(0..=6);
            let pt = |rng: &mut rand_chacha::ChaCha8Rng| (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let gt: Vec<(f64, f64)> = (0..ng).map(|_| pt(&mut rng)).collect();
            let pred: Vec<(f64, f64)> = (0..np).map(|_| pt(&mut rng)).collect();
            let radius = rng.gen_range(0.5..2.0);
            let greedy = match_point_slices(&gt, &pred, radius).unwrap();
            let optimal = optimal_match_count(&gt, &pred, radius);
            assert_eq!(greedy.matches, optimal, "trial {trial}");
        }
    }
}
