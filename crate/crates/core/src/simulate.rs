//! Synthetic marking fields, trajectories and noisy detections with ground
//! truth.
//!
//! Every random draw comes from a ChaCha stream keyed by the scene seed and a
//! small tuple of identifiers, so a detection can be regenerated from
//! `(seed, frame, camera, marking)` alone and frames can be rendered in any
//! order.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::association::MarkingId;
use crate::geometry::{project, CameraModel, Intrinsics, MapPoint, PixelPoint, RigidTransform};
use crate::ipm::{ground_to_pixel, homography_from_camera, Homography, PointPair, RegionOfInterest};
use crate::mapbuild::{DetectionRecord, VehiclePoseRecord};
use crate::par::{map_slice, Execution};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid scene spec at `{path}`: {message}")]
pub struct InvalidSpec {
    pub path: String,
    pub message: String,
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> InvalidSpec {
    InvalidSpec {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    /// Field width and height in meters, centered on the map origin.
    pub extent: [f64; 2],
    /// Distance between neighbouring marking centers.
    pub spacing: f64,
    /// Half-diagonal of each diamond along map x.
    pub half_diagonal_a: f64,
    /// Half-diagonal of each diamond along map y.
    pub half_diagonal_b: f64,
    /// Largest per-axis offset of a marking from its grid slot. Real paint is
    /// never on an exact lattice; without it every diamond edge runs through
    /// evaluation cell centers.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Straight {
        start: [f64; 2],
        heading_deg: f64,
        length: f64,
    },
    Waypoints {
        points: Vec<[f64; 2]>,
    },
    /// Back-and-forth passes along x, one per lane y.
    Lawnmower {
        x_range: [f64; 2],
        lanes: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub path: PathSpec,
    /// Meters per second.
    pub speed: f64,
    /// Frames per second.
    pub rate: f64,
    /// When set, exactly this many poses spread evenly along the path
    /// (the speed is then implied).
    #[serde(default)]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Optical center in the vehicle frame.
    pub position: [f64; 3],
    pub yaw_deg: f64,
    /// Downward tilt.
    pub pitch_deg: f64,
}

impl CameraSpec {
    pub fn model(&self) -> Result<CameraModel, InvalidSpec> {
        let k =
            Intrinsics::new(self.fx, self.fy, self.cx, self.cy).map_err(|e| invalid("intrinsics", e.to_string()))?;
        let ext = CameraModel::mounted(
            Vector3::from(self.position),
            self.yaw_deg.to_radians(),
            self.pitch_deg.to_radians(),
        );
        Ok(CameraModel::new(self.id.clone(), k, ext, self.width, self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub dropout: f64,
    /// Position noise on the emitted poses, meters (beyond the accurate-pose
    /// assumption; 0 by default).
    pub pose_sigma: f64,
    pub pose_yaw_sigma_deg: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            dropout: 0.0,
            pose_sigma: 0.0,
            pose_yaw_sigma_deg: 0.0,
        }
    }
}

/// Extrinsic error of the "different vehicle" calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 3.0,
            translation: 0.15,
        }
    }
}

/// Ground grid used to produce calibration point pairs, per camera, in
/// coordinates relative to the camera footprint and heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Forward distances of the grid rows.
    pub distances: Vec<f64>,
    /// Half-width of each row as a fraction of its distance.
    pub lateral_ratio: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            distances: vec![3.0, 4.0, 5.0, 6.0, 7.0],
            lateral_ratio: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub field: FieldSpec,
    pub trajectory: TrajectorySpec,
    #[serde(default = "default_rig")]
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    pub seed: u64,
}

/// Default rig: a forward and a rear camera, 1280x720, 800 px focal length.
pub fn default_rig() -> Vec<CameraSpec> {
    let cam = |id: &str, x: f64, yaw: f64| CameraSpec {
        id: id.to_string(),
        fx: 800.0,
        fy: 800.0,
        cx: 640.0,
        cy: 360.0,
        width: 1280,
        height: 720,
        position: [x, 0.0, 1.6],
        yaw_deg: yaw,
        pitch_deg: 26.0,
    };
    vec![cam("front", 1.5, 0.0), cam("rear", -0.8, 180.0)]
}

impl SceneSpec {
    /// The reference scene: a 20 m field of 25 diamonds covered by a
    /// lawn-mower drive, two cameras, 600 frames, 0.5 px noise.
    pub fn reference() -> Self {
        Self {
            field: FieldSpec {
                extent: [20.0, 20.0],
                spacing: 4.0,
                half_diagonal_a: 0.5,
                half_diagonal_b: 0.5,
                jitter: 0.3,
            },
            trajectory: TrajectorySpec {
                path: PathSpec::Lawnmower {
                    x_range: [-14.0, 14.0],
                    lanes: vec![-6.0, -2.0, 2.0, 6.0],
                },
                speed: 2.0,
                rate: 10.0,
                frames: Some(600),
            },
            cameras: default_rig(),
            noise: NoiseSpec {
                pixel_sigma: 0.5,
                ..NoiseSpec::default()
            },
            perturbation: PerturbationSpec::default(),
            calibration: CalibrationSpec::default(),
            seed: 42,
        }
    }

    /// Same scene with every noise source switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise = NoiseSpec::default();
        self
    }

    pub fn validate(&self) -> Result<(), InvalidSpec> {
        let f = &self.field;
        for (i, e) in f.extent.iter().enumerate() {
            if !(e.is_finite() && *e > 0.0) {
                return Err(invalid(format!("field.extent[{i}]"), "must be positive"));
            }
        }
        if !(f.half_diagonal_a > 0.0) {
            return Err(invalid("field.half_diagonal_a", "must be positive"));
        }
        if !(f.half_diagonal_b > 0.0) {
            return Err(invalid("field.half_diagonal_b", "must be positive"));
        }
        if !(f.jitter >= 0.0 && f.jitter.is_finite()) {
            return Err(invalid("field.jitter", "must be non-negative"));
        }
        if !(f.spacing > 2.0 * (f.half_diagonal_a.max(f.half_diagonal_b) + f.jitter)) {
            return Err(invalid(
                "field.spacing",
                "must exceed twice the larger half-diagonal plus jitter",
            ));
        }

        let t = &self.trajectory;
        if !(t.speed > 0.0 && t.speed.is_finite()) {
            return Err(invalid("trajectory.speed", "must be positive"));
        }
        if !(t.rate > 0.0 && t.rate.is_finite()) {
            return Err(invalid("trajectory.rate", "must be positive"));
        }
        if t.frames == Some(0) {
            return Err(invalid("trajectory.frames", "must be at least 1"));
        }
        match &t.path {
            PathSpec::Straight { length, .. } if !(*length > 0.0) => {
                return Err(invalid("trajectory.path.length", "must be positive"));
            }
            PathSpec::Lawnmower { x_range, lanes } => {
                if !(x_range[1] > x_range[0]) {
                    return Err(invalid("trajectory.path.x_range", "must be increasing"));
                }
                if lanes.is_empty() {
                    return Err(invalid("trajectory.path.lanes", "needs at least one lane"));
                }
            }
            _ => {}
        }
        if path_length(&waypoints(&t.path)) <= 0.0 {
            return Err(invalid("trajectory.path", "has zero length"));
        }

        if self.cameras.is_empty() {
            return Err(invalid("cameras", "at least one camera is required"));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if self.cameras[..i].iter().any(|o| o.id == c.id) {
                return Err(invalid(format!("cameras[{i}].id"), "duplicate camera id"));
            }
            if c.id.is_empty() || c.id.contains(char::is_whitespace) {
                return Err(invalid(format!("cameras[{i}].id"), "must be a non-empty token"));
            }
            if c.width == 0 || c.height == 0 {
                return Err(invalid(format!("cameras[{i}].width"), "image size must be positive"));
            }
            c.model()
                .map_err(|e| invalid(format!("cameras[{i}].{}", e.path), e.message))?;
        }

        let n = &self.noise;
        for (name, v) in [
            ("noise.pixel_sigma", n.pixel_sigma),
            ("noise.pose_sigma", n.pose_sigma),
            ("noise.pose_yaw_sigma_deg", n.pose_yaw_sigma_deg),
            ("perturbation.rotation_deg", self.perturbation.rotation_deg),
            ("perturbation.translation", self.perturbation.translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&n.dropout) {
            return Err(invalid("noise.dropout", "must lie in [0, 1]"));
        }
        let c = &self.calibration;
        if c.distances.len() < 2 || c.distances.iter().any(|d| !(*d > 0.0)) {
            return Err(invalid(
                "calibration.distances",
                "needs at least two positive distances",
            ));
        }
        if !(c.lateral_ratio > 0.0) {
            return Err(invalid("calibration.lateral_ratio", "must be positive"));
        }
        Ok(())
    }
}

/// Everything the simulator knows that the mapper does not.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub markings: Vec<(MarkingId, [MapPoint; 4])>,
    pub cameras: Vec<CameraModel>,
    pub homographies: Vec<Homography>,
    pub poses: Vec<VehiclePoseRecord>,
}

impl GroundTruth {
    pub fn camera(&self, id: &str) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.id == id)
    }
}

/// A generated scene: truth, the pose stream handed to the mapper, and each
/// camera's calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: GroundTruth,
    pub poses: Vec<VehiclePoseRecord>,
    pub calibration: BTreeMap<String, Vec<PointPair>>,
    pub rois: BTreeMap<String, RegionOfInterest>,
}

/// A rendered detection and the marking it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDetection {
    pub marking: MarkingId,
    pub record: DetectionRecord,
}

// Stream tags keep unrelated draws independent.
const TAG_POSE: u64 = 1;
const TAG_DETECTION: u64 = 2;
const TAG_PERTURB: u64 = 3;
const TAG_LAYOUT: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for a seed and a tuple of identifiers.
pub fn stream_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Axis-aligned diamond, counter-clockwise from its lowest vertex.
pub fn diamond(center: [f64; 2], a: f64, b: f64) -> [MapPoint; 4] {
    let [x, y] = center;
    [
        MapPoint::ground(x, y - b),
        MapPoint::ground(x + a, y),
        MapPoint::ground(x, y + b),
        MapPoint::ground(x - a, y),
    ]
}

fn grid_axis(extent: f64, spacing: f64) -> Vec<f64> {
    let n = ((extent / spacing) + 1e-9).floor().max(1.0) as usize;
    (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) * spacing).collect()
}

fn waypoints(path: &PathSpec) -> Vec<[f64; 2]> {
    match path {
        PathSpec::Straight {
            start,
            heading_deg,
            length,
        } => {
            let h = heading_deg.to_radians();
            vec![*start, [start[0] + length * h.cos(), start[1] + length * h.sin()]]
        }
        PathSpec::Waypoints { points } => points.clone(),
        PathSpec::Lawnmower { x_range, lanes } => {
            let mut pts = Vec::with_capacity(2 * lanes.len());
            for (i, y) in lanes.iter().enumerate() {
                let (a, b) = if i % 2 == 0 {
                    (x_range[0], x_range[1])
                } else {
                    (x_range[1], x_range[0])
                };
                pts.push([a, *y]);
                pts.push([b, *y]);
            }
            pts
        }
    }
}

fn path_length(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

/// Position and heading at arc length `s`.
fn sample_path(points: &[[f64; 2]], s: f64) -> (f64, f64, f64) {
    let mut remaining = s;
    let segments: Vec<_> = points.windows(2).filter(|w| w[0] != w[1]).collect();
    for (i, w) in segments.iter().enumerate() {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let len = (dx * dx + dy * dy).sqrt();
        if remaining < len || i + 1 == segments.len() {
            let f = (remaining / len).min(1.0);
            return (w[0][0] + f * dx, w[0][1] + f * dy, dy.atan2(dx));
        }
        remaining -= len;
    }
    unreachable!("validated paths have a positive length")
}

fn sample_trajectory(t: &TrajectorySpec) -> Vec<(f64, f64, f64, f64)> {
    let pts = waypoints(&t.path);
    let length = path_length(&pts);
    let (count, step) = match t.frames {
        Some(1) => (1, 0.0),
        Some(n) => (n, length / (n - 1) as f64),
        None => {
            let step = t.speed / t.rate;
            (((length / step) + 1e-9).floor() as usize + 1, step)
        }
    };
    (0..count)
        .map(|k| {
            let (x, y, yaw) = sample_path(&pts, k as f64 * step);
            (k as f64 / t.rate, x, y, yaw)
        })
        .collect()
}

/// Ground calibration grid of one camera and the true pixels it lands on.
fn calibration_pairs(spec: &CalibrationSpec, cam_spec: &CameraSpec, camera: &CameraModel) -> Option<Vec<PointPair>> {
    let yaw = cam_spec.yaw_deg.to_radians();
    let (c, s) = (yaw.cos(), yaw.sin());
    let mut pairs = Vec::with_capacity(2 * spec.distances.len());
    for &d in &spec.distances {
        for side in [-1.0, 1.0] {
            let l = side * spec.lateral_ratio * d;
            let x = cam_spec.position[0] + c * d - s * l;
            let y = cam_spec.position[1] + s * d + c * l;
            let g = crate::geometry::GroundPoint::new(x, y);
            let px = ground_to_pixel(camera, g)?;
            if !px.in_image(camera.width, camera.height) {
                return None;
            }
            pairs.push(PointPair::new(px, g));
        }
    }
    Some(pairs)
}

/// Builds the marking field, the trajectory and each camera's calibration.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, InvalidSpec> {
    spec.validate()?;
    let f = &spec.field;
    let mut markings = Vec::new();
    for y in grid_axis(f.extent[1], f.spacing) {
        for x in grid_axis(f.extent[0], f.spacing) {
            let id = MarkingId(markings.len() as u32);
            let mut rng = stream_rng(spec.seed, &[TAG_LAYOUT, u64::from(id.0)]);
            let (dx, dy) = if f.jitter > 0.0 {
                (
                    rng.random_range(-f.jitter..=f.jitter),
                    rng.random_range(-f.jitter..=f.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            markings.push((id, diamond([x + dx, y + dy], f.half_diagonal_a, f.half_diagonal_b)));
        }
    }

    let mut cameras = Vec::new();
    let mut homographies = Vec::new();
    let mut calibration = BTreeMap::new();
    let mut rois = BTreeMap::new();
    for (i, cs) in spec.cameras.iter().enumerate() {
        let model = cs.model()?;
        let h = homography_from_camera(&model).map_err(|e| invalid(format!("cameras[{i}]"), e.to_string()))?;
        let pairs = calibration_pairs(&spec.calibration, cs, &model)
            .ok_or_else(|| invalid(format!("cameras[{i}]"), "calibration grid is not fully visible"))?;
        let roi = RegionOfInterest::from_pairs(&pairs).map_err(|e| invalid(format!("cameras[{i}]"), e.to_string()))?;
        calibration.insert(cs.id.clone(), pairs);
        rois.insert(cs.id.clone(), roi);
        cameras.push(model);
        homographies.push(h);
    }

    let samples = sample_trajectory(&spec.trajectory);
    let mut truth_poses = Vec::with_capacity(samples.len());
    let mut poses = Vec::with_capacity(samples.len());
    let yaw_sigma = spec.noise.pose_yaw_sigma_deg.to_radians();
    for (k, (t, x, y, yaw)) in samples.into_iter().enumerate() {
        let frame = k as u64;
        truth_poses.push(VehiclePoseRecord {
            frame,
            timestamp: t,
            pose: RigidTransform::planar(x, y, yaw),
        });
        let mut rng = stream_rng(spec.seed, &[TAG_POSE, frame]);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let (nx, ny, nyaw) = (n(), n(), n());
        poses.push(VehiclePoseRecord {
            frame,
            timestamp: t,
            pose: RigidTransform::planar(
                x + spec.noise.pose_sigma * nx,
                y + spec.noise.pose_sigma * ny,
                yaw + yaw_sigma * nyaw,
            ),
        });
    }

    Ok(Scene {
        truth: GroundTruth {
            markings,
            cameras,
            homographies,
            poses: truth_poses,
        },
        poses,
        calibration,
        rois,
    })
}

/// One camera's detections in one frame.
fn render_frame(
    scene: &Scene,
    spec: &SceneSpec,
    pose: &VehiclePoseRecord,
    cam_index: usize,
    out: &mut Vec<SimulatedDetection>,
) {
    let camera = &scene.truth.cameras[cam_index];
    let roi = &scene.rois[&camera.id];
    for (id, corners) in &scene.truth.markings {
        let mut pixels = [PixelPoint::default(); 4];
        let visible = corners
            .iter()
            .zip(pixels.iter_mut())
            .all(|(c, slot)| match project(c, &pose.pose, camera) {
                Ok(px) if px.in_image(camera.width, camera.height) && roi.contains(px) => {
                    *slot = px;
                    true
                }
                _ => false,
            });
        if !visible {
            continue;
        }
        let mut rng = stream_rng(
            spec.seed,
            &[TAG_DETECTION, pose.frame, cam_index as u64, u64::from(id.0)],
        );
        // Draw everything unconditionally so noise settings never shift the
        // remaining draws.
        let drop_draw: f64 = rng.random();
        let shift = rng.random_range(0..4usize);
        let noise: [f64; 8] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        if drop_draw < spec.noise.dropout {
            continue;
        }
        let sigma = spec.noise.pixel_sigma;
        let emitted = (0..4)
            .map(|i| {
                let j = (i + shift) % 4;
                PixelPoint::new(
                    pixels[j].u + sigma * noise[2 * j],
                    pixels[j].v + sigma * noise[2 * j + 1],
                )
            })
            .collect();
        out.push(SimulatedDetection {
            marking: *id,
            record: DetectionRecord {
                frame: pose.frame,
                camera_id: camera.id.clone(),
                pixels: emitted,
            },
        });
    }
}

/// Renders every camera's detections along the true trajectory, in frame
/// order, then camera order, then marking order.
pub fn render_detections(scene: &Scene, spec: &SceneSpec, exec: Execution) -> Vec<SimulatedDetection> {
    let per_frame = map_slice(exec, &scene.truth.poses, |pose| {
        let mut out = Vec::new();
        for cam in 0..scene.truth.cameras.len() {
            render_frame(scene, spec, pose, cam, &mut out);
        }
        out
    });
    per_frame.into_iter().flatten().collect()
}

/// True extrinsic disturbed by a rotation of `rotation_deg` about a random
/// axis and a shift of the optical center by `translation` meters in a
/// random direction.
pub fn perturb_extrinsic(truth: &RigidTransform, p: &PerturbationSpec, rng: &mut impl Rng) -> RigidTransform {
    let mut unit = || loop {
        let v = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    };
    let axis = unit();
    let direction = unit();
    let rotation = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), p.rotation_deg.to_radians()) * truth.rotation;
    let center = truth.inverse().translation + p.translation * direction;
    RigidTransform::new(rotation, -(rotation * center))
}

/// The scene's perturbed ("different vehicle") camera models, one per camera.
pub fn perturbed_cameras(scene: &Scene, spec: &SceneSpec, p: &PerturbationSpec) -> Vec<CameraModel> {
    scene
        .truth
        .cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut rng = stream_rng(spec.seed, &[TAG_PERTURB, i as u64]);
            let mut model = cam.clone();
            model.extrinsic = perturb_extrinsic(&cam.extrinsic, p, &mut rng);
            model
        })
        .collect()
}
