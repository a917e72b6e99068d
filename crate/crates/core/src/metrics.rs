//! Map accuracy against ground truth: corner RMSE and rasterized IoU.

use std::fmt::Write as _;

use serde::Serialize;

use crate::association::{corner_center, match_corners, MarkingId};
use crate::geometry::MapPoint;
use crate::mapbuild::MapState;
use crate::par::{map_slice, Execution};

pub const DEFAULT_EVAL_GATE: f64 = 2.0;
pub const DEFAULT_CELL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("neither polygon occupies a raster cell")]
    ZeroArea,
    #[error("cell size must be positive")]
    InvalidCell,
}

/// A marking as a bare id and corner list.
pub type MarkingCorners = (MarkingId, [MapPoint; 4]);

/// Corners of every marking in a map, in id order.
pub fn map_markings(map: &MapState) -> Vec<MarkingCorners> {
    map.markings().map(|m| (m.id, m.corners)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationConfig {
    pub gate: f64,
    pub cell: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            gate: DEFAULT_EVAL_GATE,
            cell: DEFAULT_CELL,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkingMatch {
    pub truth: MarkingId,
    pub estimate: MarkingId,
    pub center_distance: f64,
    /// Error of each estimated corner against its matched truth corner.
    pub corner_errors: [f64; 4],
    /// `None` when neither polygon covers a raster cell.
    pub iou: Option<f64>,
}

/// Running error as markings are added in estimate order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub markings: usize,
    pub estimate: MarkingId,
    pub marking_rmse: f64,
    pub cumulative_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub matches: Vec<MarkingMatch>,
    pub rmse: Option<f64>,
    pub mean_iou: Option<f64>,
    pub unmatched_truth: Vec<MarkingId>,
    pub unmatched_estimate: Vec<MarkingId>,
    pub trace: Vec<TracePoint>,
}

fn center_distance(a: &[MapPoint; 4], b: &[MapPoint; 4]) -> f64 {
    let (p, q) = (corner_center(a), corner_center(b));
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Greedy nearest-first one-to-one pairing of estimates with truth markings
/// whose centers lie within `gate`. Returns `(truth index, estimate index,
/// distance)` triples.
pub fn match_markings(estimated: &[MarkingCorners], truth: &[MarkingCorners], gate: f64) -> Vec<(usize, usize, f64)> {
    let mut candidates = Vec::new();
    for (ti, (_, t)) in truth.iter().enumerate() {
        for (ei, (_, e)) in estimated.iter().enumerate() {
            let d = center_distance(t, e);
            if d <= gate {
                candidates.push((d, ti, ei));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truth.len()];
    let mut est_used = vec![false; estimated.len()];
    let mut pairs = Vec::new();
    for (d, ti, ei) in candidates {
        if !truth_used[ti] && !est_used[ei] {
            truth_used[ti] = true;
            est_used[ei] = true;
            pairs.push((ti, ei, d));
        }
    }
    pairs
}

fn corner_errors(estimate: &[MapPoint; 4], truth: &[MapPoint; 4]) -> [f64; 4] {
    let perm = match_corners(estimate, truth).permutation;
    std::array::from_fn(|i| estimate[i].distance(&truth[perm[i]]))
}

fn rmse_of(errors: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in errors {
        sum += e * e;
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Corner RMSE over all matched markings.
pub fn evaluate_rmse(estimated: &[MarkingCorners], truth: &[MarkingCorners], gate: f64) -> EvaluationReport {
    evaluate_with(estimated, truth, gate, None, Execution::Sequential)
}

/// Full report: RMSE, per-marking IoU and the error trace.
pub fn evaluate(
    estimated: &[MarkingCorners],
    truth: &[MarkingCorners],
    config: &EvaluationConfig,
) -> Result<EvaluationReport, MetricsError> {
    if !(config.cell > 0.0) {
        return Err(MetricsError::InvalidCell);
    }
    Ok(evaluate_with(
        estimated,
        truth,
        config.gate,
        Some(config.cell),
        config.execution,
    ))
}

fn evaluate_with(
    estimated: &[MarkingCorners],
    truth: &[MarkingCorners],
    gate: f64,
    cell: Option<f64>,
    exec: Execution,
) -> EvaluationReport {
    let mut pairs = match_markings(estimated, truth, gate);
    pairs.sort_by_key(|&(_, ei, _)| estimated[ei].0);
    let mut matches: Vec<MarkingMatch> = map_slice(exec, &pairs, |&(ti, ei, d)| {
        let (est, tru) = (&estimated[ei].1, &truth[ti].1);
        MarkingMatch {
            truth: truth[ti].0,
            estimate: estimated[ei].0,
            center_distance: d,
            corner_errors: corner_errors(est, tru),
            iou: cell.and_then(|c| evaluate_iou(est, tru, c).ok()),
        }
    });
    if cell.is_none() {
        matches.iter_mut().for_each(|m| m.iou = None);
    }

    let rmse = rmse_of(matches.iter().flat_map(|m| m.corner_errors));
    let ious: Vec<f64> = matches.iter().filter_map(|m| m.iou).collect();
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);

    let mut trace = Vec::with_capacity(matches.len());
    let mut sum = 0.0;
    for (k, m) in matches.iter().enumerate() {
        sum += m.corner_errors.iter().map(|e| e * e).sum::<f64>();
        trace.push(TracePoint {
            markings: k + 1,
            estimate: m.estimate,
            marking_rmse: rmse_of(m.corner_errors.into_iter()).unwrap_or(0.0),
            cumulative_rmse: (sum / (4 * (k + 1)) as f64).sqrt(),
        });
    }

    let mut unmatched_truth: Vec<MarkingId> = truth
        .iter()
        .enumerate()
        .filter(|(i, _)| !pairs.iter().any(|p| p.0 == *i))
        .map(|(_, m)| m.0)
        .collect();
    unmatched_truth.sort();
    let mut unmatched_estimate: Vec<MarkingId> = estimated
        .iter()
        .enumerate()
        .filter(|(i, _)| !pairs.iter().any(|p| p.1 == *i))
        .map(|(_, m)| m.0)
        .collect();
    unmatched_estimate.sort();

    EvaluationReport {
        matches,
        rmse,
        mean_iou,
        unmatched_truth,
        unmatched_estimate,
        trace,
    }
}

/// x coordinates where the horizontal line at `y` crosses the polygon's
/// edges (even-odd rule, half-open in y).
fn crossings(polygon: &[MapPoint], y: f64) -> Vec<f64> {
    let n = polygon.len();
    let mut xs = Vec::with_capacity(4);
    for i in 0..n {
        let (a, b) = (&polygon[i], &polygon[(i + 1) % n]);
        if (a.y > y) != (b.y > y) {
            xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs
}

/// Center of lattice cell `i` along one axis.
#[inline]
pub fn cell_center(i: i64, cell: f64) -> f64 {
    (i as f64 + 0.5) * cell
}

fn inside(xs: &[f64], x: f64) -> bool {
    xs.iter().filter(|&&c| x < c).count() % 2 == 1
}

/// Cell index range covering `[lo, hi]` on the lattice anchored at zero.
fn cell_range(lo: f64, hi: f64, cell: f64) -> (i64, i64) {
    ((lo / cell).floor() as i64, (hi / cell).ceil() as i64 - 1)
}

/// Rasterized intersection over union of two marking polygons. A cell is
/// occupied by a polygon iff its center lies inside it.
pub fn evaluate_iou(estimate: &[MapPoint; 4], truth: &[MapPoint; 4], cell: f64) -> Result<f64, MetricsError> {
    if !(cell > 0.0) {
        return Err(MetricsError::InvalidCell);
    }
    let all = estimate.iter().chain(truth.iter());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (i0, i1) = cell_range(x0, x1, cell);
    let (j0, j1) = cell_range(y0, y1, cell);

    let (mut both, mut either) = (0u64, 0u64);
    for j in j0..=j1 {
        let y = cell_center(j, cell);
        let (ca, cb) = (crossings(estimate, y), crossings(truth, y));
        if ca.is_empty() && cb.is_empty() {
            continue;
        }
        for i in i0..=i1 {
            let x = cell_center(i, cell);
            let (a, b) = (inside(&ca, x), inside(&cb, x));
            both += u64::from(a && b);
            either += u64::from(a || b);
        }
    }
    if either == 0 {
        return Err(MetricsError::ZeroArea);
    }
    Ok(both as f64 / either as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl EvaluationReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "matched markings: {}", self.matches.len());
        let _ = writeln!(s, "corner rmse (m): {}", fmt_opt(self.rmse));
        let _ = writeln!(s, "mean iou: {}", fmt_opt(self.mean_iou));
        let ids = |v: &[MarkingId]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(
            s,
            "unmatched truth: {} [{}]",
            self.unmatched_truth.len(),
            ids(&self.unmatched_truth)
        );
        let _ = writeln!(
            s,
            "unmatched estimates: {} [{}]",
            self.unmatched_estimate.len(),
            ids(&self.unmatched_estimate)
        );
        s
    }

    /// One row per matched marking.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimate_id,truth_id,center_distance,e0,e1,e2,e3,iou\n");
        for m in &self.matches {
            let e = m.corner_errors;
            let iou = m.iou.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                m.estimate, m.truth, m.center_distance, e[0], e[1], e[2], e[3], iou
            );
        }
        s
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("markings,estimate_id,marking_rmse,cumulative_rmse\n");
        for t in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9}",
                t.markings, t.estimate, t.marking_rmse, t.cumulative_rmse
            );
        }
        s
    }

    /// Every matched corner error, in match order.
    pub fn corner_errors(&self) -> Vec<f64> {
        self.matches.iter().flat_map(|m| m.corner_errors).collect()
    }
}
