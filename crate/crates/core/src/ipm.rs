//! Inverse perspective mapping.
//!
//! A [`Homography`] maps homogeneous pixel coordinates onto the vehicle-frame
//! ground plane. It is either estimated from surveyed pixel/ground pairs
//! ([`estimate_homography_dlt`]) or composed from a camera model
//! ([`homography_from_camera`]). Only pixels inside the calibration
//! [`RegionOfInterest`] are trusted.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::geometry::{CameraModel, GroundPoint, PixelPoint};

/// Pixels whose homogeneous divisor is smaller than this map to infinity.
pub const AT_INFINITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IpmError {
    #[error("pixel ({u:.3}, {v:.3}) maps to the line at infinity")]
    AtInfinity { u: f64, v: f64 },
    #[error("need at least 4 point pairs, got {0}")]
    InsufficientPairs(usize),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("camera does not induce an invertible ground homography: {0}")]
    DegenerateCamera(String),
    #[error("singular or unnormalizable homography: {0}")]
    Singular(String),
    #[error("invalid region of interest: {0}")]
    InvalidRoi(String),
}

/// Pixel-to-ground projective map with `h[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Normalizes `m` so that its bottom-right entry is 1.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, IpmError> {
        let scale = m.amax();
        if !m.iter().all(|v| v.is_finite()) || scale == 0.0 {
            return Err(IpmError::Singular("non-finite or zero matrix".into()));
        }
        let corner = m[(2, 2)];
        if corner.abs() <= 1e-12 * scale {
            return Err(IpmError::Singular(
                "bottom-right entry vanishes; cannot normalize".into(),
            ));
        }
        let m = m / corner;
        let det = m.determinant();
        if !(det.abs() > 1e-12) {
            return Err(IpmError::Singular(format!("determinant {det:.3e}")));
        }
        Ok(Self { m })
    }

    /// Row-major entries `h1..h8, 1`.
    pub fn from_row_slice(rows: &[f64; 9]) -> Result<Self, IpmError> {
        Self::from_matrix(Matrix3::from_row_slice(rows))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_row_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Self, IpmError> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| IpmError::Singular("not invertible".into()))?;
        Self::from_matrix(inv)
    }

    pub fn apply(&self, p: PixelPoint) -> Result<GroundPoint, IpmError> {
        apply_ipm(self, p)
    }

    /// Relative Frobenius distance `|A - B| / |B|` after normalization.
    pub fn relative_error(&self, reference: &Homography) -> f64 {
        (self.m - reference.m).norm() / reference.m.norm()
    }
}

/// Inverse projects a pixel onto the vehicle-frame ground plane.
pub fn apply_ipm(h: &Homography, p: PixelPoint) -> Result<GroundPoint, IpmError> {
    let m = &h.m;
    let s = m[(2, 0)] * p.u + m[(2, 1)] * p.v + m[(2, 2)];
    if s.abs() <= AT_INFINITY_EPSILON {
        return Err(IpmError::AtInfinity { u: p.u, v: p.v });
    }
    Ok(GroundPoint::new(
        (m[(0, 0)] * p.u + m[(0, 1)] * p.v + m[(0, 2)]) / s,
        (m[(1, 0)] * p.u + m[(1, 1)] * p.v + m[(1, 2)]) / s,
    ))
}

/// A surveyed pixel / ground correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub pixel: PixelPoint,
    pub ground: GroundPoint,
}

impl PointPair {
    pub fn new(pixel: PixelPoint, ground: GroundPoint) -> Self {
        Self { pixel, ground }
    }
}

/// Similarity that moves the centroid to the origin and the mean distance
/// to sqrt(2).
fn isotropic_normalization(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .iter()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply_affine(t: &Matrix3<f64>, (x, y): (f64, f64)) -> (f64, f64) {
    (
        t[(0, 0)] * x + t[(0, 1)] * y + t[(0, 2)],
        t[(1, 0)] * x + t[(1, 1)] * y + t[(1, 2)],
    )
}

/// Least-squares DLT homography (pixel to ground) with isotropic
/// normalization of both point sets.
pub fn estimate_homography_dlt(pairs: &[PointPair]) -> Result<Homography, IpmError> {
    if pairs.len() < 4 {
        return Err(IpmError::InsufficientPairs(pairs.len()));
    }
    if pairs
        .iter()
        .any(|p| !(p.pixel.is_finite() && p.ground.x.is_finite() && p.ground.y.is_finite()))
    {
        return Err(IpmError::DegenerateConfiguration("non-finite coordinates".into()));
    }

    let pixels: Vec<(f64, f64)> = pairs.iter().map(|p| (p.pixel.u, p.pixel.v)).collect();
    let grounds: Vec<(f64, f64)> = pairs.iter().map(|p| (p.ground.x, p.ground.y)).collect();
    let t_pix = isotropic_normalization(&pixels);
    let t_gnd = isotropic_normalization(&grounds);

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pix, gnd)) in pixels.iter().zip(&grounds).enumerate() {
        let (u, v) = apply_affine(&t_pix, *pix);
        let (x, y) = apply_affine(&t_gnd, *gnd);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[u, v, 1.0, 0.0, 0.0, 0.0, -x * u, -x * v, -x]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, u, v, 1.0, -y * u, -y * v, -y]);
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| IpmError::DegenerateConfiguration("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let eighth = svd.singular_values[order[7]];
    if !(eighth > 1e-10 * largest) {
        return Err(IpmError::DegenerateConfiguration(format!(
            "design matrix rank < 8 (sigma_8 / sigma_1 = {:.3e})",
            eighth / largest
        )));
    }
    let null = v_t.row(order[8]);
    let h_norm = Matrix3::from_row_slice(null.transpose().as_slice());

    let t_gnd_inv = t_gnd
        .try_inverse()
        .ok_or_else(|| IpmError::DegenerateConfiguration("ground points coincide".into()))?;
    let h = t_gnd_inv * h_norm * t_pix;

    let sv = h_norm.singular_values();
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(IpmError::DegenerateConfiguration(
            "solution is a singular map (collinear points)".into(),
        ));
    }
    Homography::from_matrix(h).map_err(|e| IpmError::DegenerateConfiguration(e.to_string()))
}

/// Ground homography induced by a camera: the normalized inverse of
/// `K [r1 r2 t]` where `r1, r2` are the first two columns of the extrinsic
/// rotation.
pub fn homography_from_camera(camera: &CameraModel) -> Result<Homography, IpmError> {
    let r = camera.extrinsic.rotation.matrix();
    let t = camera.extrinsic.translation;
    let mut plane = Matrix3::zeros();
    plane.set_column(0, &r.column(0).into_owned());
    plane.set_column(1, &r.column(1).into_owned());
    plane.set_column(2, &t);
    let forward = camera.intrinsics.matrix() * plane;

    // The plane matrix loses rank when the camera sits on the ground plane.
    let sv = forward.singular_values();
    if !(sv.min() > 1e-12 * sv.max()) {
        return Err(IpmError::DegenerateCamera(format!(
            "ground projection is singular (singular values {:.3e} .. {:.3e})",
            sv.min(),
            sv.max()
        )));
    }
    let inverse = forward
        .try_inverse()
        .ok_or_else(|| IpmError::DegenerateCamera("not invertible".into()))?;
    Homography::from_matrix(inverse).map_err(|e| IpmError::DegenerateCamera(e.to_string()))
}

/// Ground homography of a camera, returned as the forward map
/// `ground -> pixel` for convenience in tests and rendering.
pub fn ground_to_pixel(camera: &CameraModel, g: GroundPoint) -> Option<PixelPoint> {
    let r = camera.extrinsic.rotation.matrix();
    let p = r.column(0) * g.x + r.column(1) * g.y + camera.extrinsic.translation;
    if p.z <= crate::geometry::DEPTH_EPSILON {
        return None;
    }
    let h = camera.intrinsics.matrix() * Vector3::new(p.x, p.y, p.z);
    Some(PixelPoint::new(h.x / h.z, h.y / h.z))
}

fn cross(o: PixelPoint, a: PixelPoint, b: PixelPoint) -> f64 {
    (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u)
}

/// Convex pixel polygon, vertices stored with positive signed area.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOfInterest {
    polygon: Vec<PixelPoint>,
}

impl RegionOfInterest {
    /// Validates a convex polygon; accepts either orientation.
    pub fn new(polygon: Vec<PixelPoint>) -> Result<Self, IpmError> {
        if polygon.len() < 3 {
            return Err(IpmError::InvalidRoi(format!(
                "need at least 3 vertices, got {}",
                polygon.len()
            )));
        }
        if polygon.iter().any(|p| !p.is_finite()) {
            return Err(IpmError::InvalidRoi("non-finite vertex".into()));
        }
        let area = signed_area(&polygon);
        if !(area.abs() > 1e-9) {
            return Err(IpmError::InvalidRoi("zero area".into()));
        }
        let mut polygon = polygon;
        if area < 0.0 {
            polygon.reverse();
        }
        let n = polygon.len();
        for i in 0..n {
            let turn = cross(polygon[i], polygon[(i + 1) % n], polygon[(i + 2) % n]);
            if turn < 0.0 {
                return Err(IpmError::InvalidRoi(format!("not convex at vertex {}", (i + 1) % n)));
            }
        }
        Ok(Self { polygon })
    }

    /// Convex hull of a point set (monotone chain); collinear boundary points
    /// are dropped.
    pub fn convex_hull(points: &[PixelPoint]) -> Result<Self, IpmError> {
        let mut pts: Vec<PixelPoint> = points.to_vec();
        pts.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.v.total_cmp(&b.v)));
        pts.dedup();
        if pts.len() < 3 {
            return Err(IpmError::InvalidRoi("fewer than 3 distinct points".into()));
        }
        let mut hull: Vec<PixelPoint> = Vec::with_capacity(2 * pts.len());
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &PixelPoint>> = if pass == 0 {
                Box::new(pts.iter())
            } else {
                Box::new(pts.iter().rev())
            };
            for &p in iter {
                while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        Self::new(hull)
    }

    /// ROI of a calibration: hull of the calibration pixels.
    pub fn from_pairs(pairs: &[PointPair]) -> Result<Self, IpmError> {
        let pixels: Vec<PixelPoint> = pairs.iter().map(|p| p.pixel).collect();
        Self::convex_hull(&pixels)
    }

    pub fn vertices(&self) -> &[PixelPoint] {
        &self.polygon
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        roi_contains(self, p)
    }
}

fn signed_area(poly: &[PixelPoint]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a.u * b.v - b.u * a.v
        })
        .sum::<f64>()
}

/// Inside or on the boundary of the convex ROI.
pub fn roi_contains(roi: &RegionOfInterest, p: PixelPoint) -> bool {
    let poly = &roi.polygon;
    let n = poly.len();
    (0..n).all(|i| cross(poly[i], poly[(i + 1) % n], p) >= 0.0)
}
