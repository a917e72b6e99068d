//! Frame-to-map data association.
//!
//! Markings are identical in appearance, so a detection is linked to a map
//! marking purely by position: the detection's corner centroid is looked up
//! in a quad-tree of marking centers and gated by distance. Corners are then
//! paired by the cyclic shift with the least total corner distance.

pub mod quadtree;

use serde::{Deserialize, Serialize};

use crate::geometry::{MapPoint, PixelPoint};
pub use quadtree::{QuadItem, QuadTree, Rect};

/// Stable identifier of a map marking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MarkingId(pub u32);

impl std::fmt::Display for MarkingId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Default association gate in meters.
pub const DEFAULT_GATE: f64 = 1.0;
/// Nearest-candidate distances closer than this are flagged as ambiguous.
pub const DEFAULT_TIE_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssociationError {
    #[error("ambiguous association: markings {first} and {second} at {d_first:.3} m and {d_second:.3} m")]
    AmbiguousAssociation {
        first: MarkingId,
        second: MarkingId,
        d_first: f64,
        d_second: f64,
    },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

/// Maps detection corner `i` to map corner `perm[i]`.
pub type CornerPermutation = [usize; 4];

pub const IDENTITY_PERMUTATION: CornerPermutation = [0, 1, 2, 3];

/// A detected quadrilateral marking, transformed into the map frame, with
/// its corners in counter-clockwise order starting at the lowest corner.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedMarking {
    pub corners: [MapPoint; 4],
    pub pixel_corners: [PixelPoint; 4],
    pub source_frame: u64,
    pub camera_id: String,
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn xy(p: &MapPoint) -> [f64; 2] {
    [p.x, p.y]
}

/// Signed area of a polygon in the map xy-plane (positive when CCW).
pub fn signed_area(corners: &[MapPoint]) -> f64 {
    let n = corners.len();
    0.5 * (0..n)
        .map(|i| {
            let a = &corners[i];
            let b = &corners[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross2(a, b, c);
    let d2 = cross2(a, b, d);
    let d3 = cross2(c, d, a);
    let d4 = cross2(c, d, b);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when the quadrilateral has no crossing opposite edges and non-zero area.
pub fn is_simple_quad(corners: &[MapPoint; 4]) -> bool {
    let p: Vec<[f64; 2]> = corners.iter().map(xy).collect();
    !segments_cross(p[0], p[1], p[2], p[3])
        && !segments_cross(p[1], p[2], p[3], p[0])
        && signed_area(corners).abs() > 1e-12
}

/// Reorders corners counter-clockwise, starting from the smallest `(y, x)`.
/// Returns `order` with `normalized[k] = corners[order[k]]`.
pub fn normalize_winding(corners: &[MapPoint; 4]) -> [usize; 4] {
    let mut order = IDENTITY_PERMUTATION;
    if signed_area(corners) < 0.0 {
        order.reverse();
    }
    let start = (0..4)
        .min_by(|&a, &b| {
            let (pa, pb) = (&corners[order[a]], &corners[order[b]]);
            pa.y.total_cmp(&pb.y).then(pa.x.total_cmp(&pb.x))
        })
        .unwrap_or(0);
    order.rotate_left(start);
    order
}

impl DetectedMarking {
    /// Validates and winding-normalizes a detection; pixel corners follow the
    /// same reordering as the map corners.
    pub fn new(
        corners: [MapPoint; 4],
        pixel_corners: [PixelPoint; 4],
        source_frame: u64,
        camera_id: impl Into<String>,
    ) -> Result<Self, AssociationError> {
        if corners.iter().any(|c| !c.is_finite()) {
            return Err(AssociationError::InvalidDetection("non-finite corner".into()));
        }
        if !is_simple_quad(&corners) {
            return Err(AssociationError::InvalidDetection(
                "corners do not form a simple quadrilateral".into(),
            ));
        }
        let order = normalize_winding(&corners);
        Ok(Self {
            corners: order.map(|k| corners[k]),
            pixel_corners: order.map(|k| pixel_corners[k]),
            source_frame,
            camera_id: camera_id.into(),
        })
    }

    /// Geometric center of the corners.
    pub fn center(&self) -> [f64; 2] {
        corner_center(&self.corners)
    }
}

pub fn corner_center(corners: &[MapPoint; 4]) -> [f64; 2] {
    let (sx, sy) = corners.iter().fold((0.0, 0.0), |(x, y), c| (x + c.x, y + c.y));
    [sx / 4.0, sy / 4.0]
}

/// Result of pairing detection corners with map corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerMatch {
    pub permutation: CornerPermutation,
    pub total_distance: f64,
}

/// Total corner distance of `detection[i] <-> map[perm[i]]`.
pub fn permutation_distance(detection: &[MapPoint; 4], map: &[MapPoint; 4], perm: &CornerPermutation) -> f64 {
    (0..4).map(|i| planar_distance(&detection[i], &map[perm[i]])).sum()
}

fn planar_distance(a: &MapPoint, b: &MapPoint) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// The cyclic shift `i -> (i + k) mod 4` minimizing total corner distance.
/// Both inputs must share the same winding.
pub fn match_corners(detection: &[MapPoint; 4], map: &[MapPoint; 4]) -> CornerMatch {
    (0..4)
        .map(|shift| {
            let permutation = [0, 1, 2, 3].map(|i| (i + shift) % 4);
            CornerMatch {
                permutation,
                total_distance: permutation_distance(detection, map, &permutation),
            }
        })
        .min_by(|a, b| a.total_distance.total_cmp(&b.total_distance))
        .expect("four candidate shifts")
}

/// Outcome of associating one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub matched: Option<MarkingId>,
    pub corner_permutation: CornerPermutation,
    /// Center distance to the matched marking.
    pub center_distance: f64,
    /// Total corner distance under the chosen permutation.
    pub corner_distance: f64,
}

impl AssociationResult {
    fn unmatched() -> Self {
        Self {
            matched: None,
            corner_permutation: IDENTITY_PERMUTATION,
            center_distance: f64::INFINITY,
            corner_distance: f64::INFINITY,
        }
    }
}

/// Associates a map-frame detection against the indexed markings.
///
/// `corners_of` returns the current corners of an indexed marking.
pub fn associate_marking<F>(
    index: &QuadTree,
    corners_of: F,
    detection: &DetectedMarking,
    gate: f64,
    tie_epsilon: f64,
) -> Result<AssociationResult, AssociationError>
where
    F: Fn(MarkingId) -> [MapPoint; 4],
{
    let candidates = index.query_radius(detection.center(), gate);
    let Some((nearest, d_nearest)) = candidates.first().copied() else {
        return Ok(AssociationResult::unmatched());
    };
    if let Some((second, d_second)) = candidates.get(1).copied() {
        if d_second - d_nearest < tie_epsilon {
            return Err(AssociationError::AmbiguousAssociation {
                first: nearest.id,
                second: second.id,
                d_first: d_nearest,
                d_second,
            });
        }
    }
    let map_corners = corners_of(nearest.id);
    let m = match_corners(&detection.corners, &map_corners);
    Ok(AssociationResult {
        matched: Some(nearest.id),
        corner_permutation: m.permutation,
        center_distance: d_nearest,
        corner_distance: m.total_distance,
    })
}
