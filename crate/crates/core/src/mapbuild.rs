//! Map state, the naive averaging strategy, and the incremental pipeline.
//!
//! Each detection is inverse projected through its camera's current
//! homography, lifted into the map frame by the vehicle pose, associated
//! against the quad-tree of marking centers, and folded into per-corner
//! running means. In optimization mode, every batch of newly created markings
//! triggers a bundle adjustment whose extrinsics refresh each camera's
//! homography for the detections that follow.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use nalgebra::Vector3;

use crate::association::{
    associate_marking, corner_center, match_corners, AssociationError, CornerPermutation, DetectedMarking, MarkingId,
    QuadTree, Rect, DEFAULT_GATE, DEFAULT_TIE_EPSILON,
};
use crate::geometry::{project, CameraModel, MapPoint, PixelPoint, RigidTransform};
use crate::ipm::{apply_ipm, Homography, IpmError, RegionOfInterest};
use crate::optimize::{self, OptimizeError, OptimizeSettings, SolveReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapError {
    #[error("corner {corner} lies outside the region of interest")]
    OutsideRoi { corner: usize },
    #[error(transparent)]
    Ipm(#[from] IpmError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error("no pose for frame {0}")]
    MissingPose(u64),
    #[error("unknown camera '{0}'")]
    UnknownCamera(String),
    #[error("invalid pose log: {0}")]
    InvalidPoseLog(String),
    #[error("observation from frame {frame} projects behind camera '{camera}'")]
    BehindCamera { frame: u64, camera: String },
    #[error("optimization failed: {0}")]
    Optimize(#[from] OptimizeError),
}

/// Vehicle pose (vehicle frame to map frame) at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehiclePoseRecord {
    pub frame: u64,
    pub timestamp: f64,
    pub pose: RigidTransform,
}

/// Poses indexed by strictly increasing frame number.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseLog {
    records: Vec<VehiclePoseRecord>,
}

impl PoseLog {
    pub fn new(records: Vec<VehiclePoseRecord>) -> Result<Self, MapError> {
        for w in records.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(MapError::InvalidPoseLog(format!(
                    "frames must be strictly increasing ({} after {})",
                    w[1].frame, w[0].frame
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn get(&self, frame: u64) -> Option<&VehiclePoseRecord> {
        self.records
            .binary_search_by_key(&frame, |r| r.frame)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn records(&self) -> &[VehiclePoseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One camera's view of a marking in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: u64,
    pub camera_id: String,
    /// Pixels in the detection's normalized corner order.
    pub pixels: [PixelPoint; 4],
    /// Detection corner `i` is marking corner `corner_permutation[i]`.
    pub corner_permutation: CornerPermutation,
}

impl Observation {
    /// Pixel measurement of marking corner `corner`.
    pub fn pixel_for_corner(&self, corner: usize) -> PixelPoint {
        let i = self
            .corner_permutation
            .iter()
            .position(|&c| c == corner)
            .expect("corner permutation is a bijection");
        self.pixels[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CornerAccumulator {
    pub sum: [f64; 2],
    pub count: u64,
}

impl CornerAccumulator {
    fn add(&mut self, p: &MapPoint) {
        self.sum[0] += p.x;
        self.sum[1] += p.y;
        self.count += 1;
    }

    fn mean(&self) -> MapPoint {
        let n = self.count.max(1) as f64;
        MapPoint::ground(self.sum[0] / n, self.sum[1] / n)
    }

    /// Restarts the running mean at `p` with the current weight.
    fn reseed(&mut self, p: &MapPoint) {
        let n = self.count as f64;
        self.sum = [p.x * n, p.y * n];
    }
}

/// A map marking: four ground-plane corner landmarks and their observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Marking {
    pub id: MarkingId,
    pub corners: [MapPoint; 4],
    pub observations: Vec<Observation>,
    pub accumulators: [CornerAccumulator; 4],
}

impl Marking {
    pub fn center(&self) -> [f64; 2] {
        corner_center(&self.corners)
    }

    pub fn observation_count(&self) -> usize {
        self.observations.len()
    }

    fn refresh_corners(&mut self) {
        for (corner, acc) in self.corners.iter_mut().zip(&self.accumulators) {
            *corner = acc.mean();
        }
    }
}

/// Per-camera state the pipeline works with.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSetup {
    /// Intrinsics and current extrinsic estimate; required for optimization.
    pub model: Option<CameraModel>,
    /// Homography currently used for inverse projection.
    pub homography: Homography,
    pub roi: RegionOfInterest,
}

impl CameraSetup {
    /// Setup whose homography is composed from the camera model.
    pub fn from_model(model: CameraModel, roi: RegionOfInterest) -> Result<Self, IpmError> {
        let homography = crate::ipm::homography_from_camera(&model)?;
        Ok(Self {
            model: Some(model),
            homography,
            roi,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub gate: f64,
    pub tie_epsilon: f64,
    pub quadtree_capacity: usize,
    pub quadtree_max_depth: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            gate: DEFAULT_GATE,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            quadtree_capacity: crate::association::quadtree::DEFAULT_CAPACITY,
            quadtree_max_depth: crate::association::quadtree::DEFAULT_MAX_DEPTH,
        }
    }
}

/// A detection set aside for review instead of entering the map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarantinedDetection {
    pub detection: DetectedMarking,
    pub reason: String,
}

/// What a single naive update did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Matched(MarkingId),
    Created(MarkingId),
}

/// The evolving map.
#[derive(Debug, Clone)]
pub struct MapState {
    markings: BTreeMap<MarkingId, Marking>,
    index: QuadTree,
    poses: PoseLog,
    cameras: BTreeMap<String, CameraSetup>,
    config: AssociationConfig,
    next_id: u32,
    pub quarantine: Vec<QuarantinedDetection>,
}

impl MapState {
    pub fn new(poses: PoseLog, cameras: BTreeMap<String, CameraSetup>, config: AssociationConfig) -> Self {
        Self {
            markings: BTreeMap::new(),
            index: QuadTree::with_params(
                Rect::square([0.0, 0.0], 64.0),
                config.quadtree_capacity,
                config.quadtree_max_depth,
            ),
            poses,
            cameras,
            config,
            next_id: 0,
            quarantine: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.markings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markings.is_empty()
    }

    pub fn markings(&self) -> impl Iterator<Item = &Marking> {
        self.markings.values()
    }

    pub fn marking(&self, id: MarkingId) -> Option<&Marking> {
        self.markings.get(&id)
    }

    pub fn index(&self) -> &QuadTree {
        &self.index
    }

    pub fn poses(&self) -> &PoseLog {
        &self.poses
    }

    pub fn cameras(&self) -> &BTreeMap<String, CameraSetup> {
        &self.cameras
    }

    pub fn camera(&self, id: &str) -> Option<&CameraSetup> {
        self.cameras.get(id)
    }

    pub fn config(&self) -> &AssociationConfig {
        &self.config
    }

    /// Associates a map-frame detection against the current markings.
    pub fn associate(
        &self,
        detection: &DetectedMarking,
    ) -> Result<crate::association::AssociationResult, AssociationError> {
        associate_marking(
            &self.index,
            |id| self.markings[&id].corners,
            detection,
            self.config.gate,
            self.config.tie_epsilon,
        )
    }

    /// Inserts a marking with known corners and no observations (used when
    /// loading maps and ground truth).
    pub fn insert_marking(&mut self, id: MarkingId, corners: [MapPoint; 4], weight: u64) {
        let mut accumulators = [CornerAccumulator::default(); 4];
        for (acc, c) in accumulators.iter_mut().zip(&corners) {
            acc.count = weight;
            acc.reseed(c);
        }
        let marking = Marking {
            id,
            corners: corners.map(|c| MapPoint::ground(c.x, c.y)),
            observations: Vec::new(),
            accumulators,
        };
        self.index.insert(marking.center(), id);
        self.next_id = self.next_id.max(id.0 + 1);
        self.markings.insert(id, marking);
    }

    /// Folds one map-frame detection into the map.
    pub fn naive_update(&mut self, detection: DetectedMarking) -> Result<UpdateOutcome, MapError> {
        let result = match self.associate(&detection) {
            Ok(r) => r,
            Err(e) => {
                self.quarantine.push(QuarantinedDetection {
                    detection,
                    reason: e.to_string(),
                });
                return Err(e.into());
            }
        };
        let observation = |perm: CornerPermutation| Observation {
            frame: detection.source_frame,
            camera_id: detection.camera_id.clone(),
            pixels: detection.pixel_corners,
            corner_permutation: perm,
        };
        match result.matched {
            Some(id) => {
                if result.corner_distance / 4.0 > 0.5 * self.config.gate {
                    info!(
                        "frame {}: detection matched marking {id} with mean corner residual {:.3} m",
                        detection.source_frame,
                        result.corner_distance / 4.0
                    );
                }
                let marking = self.markings.get_mut(&id).expect("indexed marking exists");
                let old_center = marking.center();
                for (i, &j) in result.corner_permutation.iter().enumerate() {
                    marking.accumulators[j].add(&detection.corners[i]);
                }
                marking.refresh_corners();
                marking.observations.push(observation(result.corner_permutation));
                let new_center = marking.center();
                self.index.relocate(old_center, new_center, id);
                Ok(UpdateOutcome::Matched(id))
            }
            None => {
                let id = MarkingId(self.next_id);
                self.next_id += 1;
                let mut accumulators = [CornerAccumulator::default(); 4];
                for (acc, c) in accumulators.iter_mut().zip(&detection.corners) {
                    acc.add(c);
                }
                let mut marking = Marking {
                    id,
                    corners: [MapPoint::default(); 4],
                    observations: vec![observation(crate::association::IDENTITY_PERMUTATION)],
                    accumulators,
                };
                marking.refresh_corners();
                self.index.insert(marking.center(), id);
                self.markings.insert(id, marking);
                Ok(UpdateOutcome::Created(id))
            }
        }
    }

    /// Replaces corner estimates (e.g. after optimization) and restarts the
    /// running means at the new values.
    pub fn set_corners(&mut self, id: MarkingId, corners: [MapPoint; 4]) {
        let marking = self.markings.get_mut(&id).expect("marking exists");
        let old_center = marking.center();
        for ((corner, acc), new) in marking
            .corners
            .iter_mut()
            .zip(marking.accumulators.iter_mut())
            .zip(corners)
        {
            let new = MapPoint::ground(new.x, new.y);
            acc.reseed(&new);
            *corner = new;
        }
        let new_center = marking.center();
        self.index.relocate(old_center, new_center, id);
    }

    /// Replaces a camera's model and homography.
    pub fn set_camera(&mut self, id: &str, model: CameraModel, homography: Homography) {
        if let Some(setup) = self.cameras.get_mut(id) {
            setup.model = Some(model);
            setup.homography = homography;
        }
    }

    /// Merges markings whose centers lie within the association gate of an
    /// older marking. Returns the number of merges.
    pub fn merge_duplicates(&mut self) -> usize {
        let mut merges = 0;
        let ids: Vec<MarkingId> = self.markings.keys().copied().collect();
        for keep in ids {
            let Some(kept) = self.markings.get(&keep) else { continue };
            let center = kept.center();
            let dupes: Vec<MarkingId> = self
                .index
                .query_radius(center, self.config.gate)
                .into_iter()
                .map(|(it, _)| it.id)
                .filter(|&id| id > keep)
                .collect();
            for dup in dupes {
                let other = self.markings.remove(&dup).expect("indexed marking exists");
                self.index.remove(other.center(), dup);
                let kept = self.markings.get_mut(&keep).expect("kept marking exists");
                let shift = match_corners(&other.corners, &kept.corners).permutation;
                for mut obs in other.observations {
                    obs.corner_permutation = obs.corner_permutation.map(|c| shift[c]);
                    kept.observations.push(obs);
                }
                for (j, acc) in other.accumulators.iter().enumerate() {
                    let target = &mut kept.accumulators[shift[j]];
                    target.sum[0] += acc.sum[0];
                    target.sum[1] += acc.sum[1];
                    target.count += acc.count;
                }
                let old_center = kept.center();
                kept.refresh_corners();
                let new_center = kept.center();
                self.index.relocate(old_center, new_center, keep);
                debug!("merged duplicate marking {dup} into {keep}");
                merges += 1;
            }
        }
        merges
    }

    /// Checks the map invariants.
    pub fn audit(&self) -> Result<(), String> {
        self.index.check_invariants()?;
        if self.index.len() != self.markings.len() {
            return Err(format!(
                "index holds {} centers for {} markings",
                self.index.len(),
                self.markings.len()
            ));
        }
        let items = self.index.items();
        for m in self.markings.values() {
            let c = m.center();
            let stored: Vec<_> = items.iter().filter(|it| it.id == m.id).collect();
            if stored.len() != 1 {
                return Err(format!("marking {} indexed {} times", m.id, stored.len()));
            }
            let s = stored[0].center;
            if (s[0] - c[0]).abs() > 1e-9 || (s[1] - c[1]).abs() > 1e-9 {
                return Err(format!("marking {} indexed at stale center", m.id));
            }
            if m.corners.iter().any(|p| p.z != 0.0) {
                return Err(format!("marking {} has a corner off the ground plane", m.id));
            }
            for obs in &m.observations {
                if self.poses.get(obs.frame).is_none() {
                    return Err(format!("marking {} observed in unknown frame {}", m.id, obs.frame));
                }
            }
        }
        Ok(())
    }

    /// Pairs of markings whose centers are within the association gate.
    pub fn duplicate_pairs(&self) -> Vec<(MarkingId, MarkingId)> {
        let mut out = Vec::new();
        for m in self.markings.values() {
            for (it, _) in self.index.query_radius(m.center(), self.config.gate) {
                if it.id > m.id {
                    out.push((m.id, it.id));
                }
            }
        }
        out
    }
}

/// Inverse projects four detection pixels into the map frame.
pub fn inverse_project_detection(
    pixels: &[PixelPoint; 4],
    homography: &Homography,
    roi: &RegionOfInterest,
    pose: &RigidTransform,
) -> Result<[MapPoint; 4], MapError> {
    let r = pose.rotation.matrix();
    let mut out = [MapPoint::default(); 4];
    for (corner, (px, slot)) in pixels.iter().zip(out.iter_mut()).enumerate() {
        if !roi.contains(*px) {
            return Err(MapError::OutsideRoi { corner });
        }
        let g = apply_ipm(homography, *px)?;
        let w: Vector3<f64> = r.column(0) * g.x + r.column(1) * g.y + pose.translation;
        *slot = MapPoint::ground(w.x, w.y);
    }
    Ok(out)
}

/// One detection record as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame: u64,
    pub camera_id: String,
    pub pixels: Vec<PixelPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineMode {
    Naive,
    Optimize(OptimizeSettings),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub association: AssociationConfig,
    pub mode: PipelineMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            association: AssociationConfig::default(),
            mode: PipelineMode::Naive,
        }
    }
}

/// Counters describing what happened to the input stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct PipelineStats {
    pub detections: usize,
    pub ingested: usize,
    pub wrong_corner_count: usize,
    pub invalid_polygon: usize,
    pub outside_roi: usize,
    pub at_infinity: usize,
    pub behind_camera: usize,
    pub missing_pose: usize,
    pub unknown_camera: usize,
    pub quarantined: usize,
    pub markings_created: usize,
    pub optimizations: usize,
    pub merges: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: MapState,
    pub reports: Vec<SolveReport>,
    pub stats: PipelineStats,
}

/// Runs the full frame-sequential pipeline.
pub fn run_pipeline(
    detections: &[DetectionRecord],
    poses: PoseLog,
    cameras: BTreeMap<String, CameraSetup>,
    config: &PipelineConfig,
) -> Result<PipelineOutput, MapError> {
    let mut cameras = cameras;
    if let PipelineMode::Optimize(settings) = &config.mode {
        // Optimization starts from each camera's prior.
        for (id, setup) in cameras.iter_mut() {
            if let (Some(model), Some(prior)) = (setup.model.as_mut(), settings.priors.get(id)) {
                model.extrinsic = prior.initial_extrinsic();
            }
        }
    }

    let mut map = MapState::new(poses, cameras, config.association);
    let mut stats = PipelineStats::default();
    let mut reports = Vec::new();
    let mut pending_new = 0usize;
    let mut dirty = false;

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by_key(|&i| detections[i].frame);

    for i in order {
        let det = &detections[i];
        stats.detections += 1;
        match ingest(&mut map, det, &mut stats) {
            Some(UpdateOutcome::Created(_)) => {
                stats.markings_created += 1;
                pending_new += 1;
                dirty = true;
            }
            Some(UpdateOutcome::Matched(_)) => dirty = true,
            None => {}
        }
        if let PipelineMode::Optimize(settings) = &config.mode {
            if pending_new >= settings.opt_every_n_new.max(1) {
                let report = optimize_map(&mut map, settings, &mut stats)?;
                reports.push(report);
                pending_new = 0;
                dirty = false;
            }
        }
    }

    if let PipelineMode::Optimize(settings) = &config.mode {
        if dirty && settings.final_pass && !map.is_empty() {
            let report = optimize_map(&mut map, settings, &mut stats)?;
            reports.push(report);
        }
    }
    stats.quarantined = map.quarantine.len();
    Ok(PipelineOutput { map, reports, stats })
}

/// Inverse projects, validates and folds a single detection record.
fn ingest(map: &mut MapState, det: &DetectionRecord, stats: &mut PipelineStats) -> Option<UpdateOutcome> {
    let Some(setup) = map.camera(&det.camera_id).cloned() else {
        warn!("frame {}: unknown camera '{}'", det.frame, det.camera_id);
        stats.unknown_camera += 1;
        return None;
    };
    let Ok(pixels) = <[PixelPoint; 4]>::try_from(det.pixels.as_slice()) else {
        stats.wrong_corner_count += 1;
        return None;
    };
    let Some(pose) = map.poses().get(det.frame).map(|r| r.pose) else {
        warn!("frame {}: no pose, detection skipped", det.frame);
        stats.missing_pose += 1;
        return None;
    };
    let corners = match inverse_project_detection(&pixels, &setup.homography, &setup.roi, &pose) {
        Ok(c) => c,
        Err(MapError::OutsideRoi { corner }) => {
            debug!(
                "frame {}: corner {corner} outside ROI of '{}'",
                det.frame, det.camera_id
            );
            stats.outside_roi += 1;
            return None;
        }
        Err(e) => {
            warn!("frame {}: {e}", det.frame);
            stats.at_infinity += 1;
            return None;
        }
    };
    if let Some(model) = &setup.model {
        if corners.iter().any(|c| project(c, &pose, model).is_err()) {
            warn!(
                "frame {}: {}",
                det.frame,
                MapError::BehindCamera {
                    frame: det.frame,
                    camera: det.camera_id.clone()
                }
            );
            stats.behind_camera += 1;
            return None;
        }
    }
    let detection = match DetectedMarking::new(corners, pixels, det.frame, det.camera_id.clone()) {
        Ok(d) => d,
        Err(e) => {
            debug!("frame {}: {e}", det.frame);
            stats.invalid_polygon += 1;
            return None;
        }
    };
    match map.naive_update(detection) {
        Ok(outcome) => {
            stats.ingested += 1;
            Some(outcome)
        }
        Err(e) => {
            warn!("frame {}: detection quarantined: {e}", det.frame);
            None
        }
    }
}

/// Runs one bundle adjustment over the whole map and writes the result back.
pub fn optimize_map(
    map: &mut MapState,
    settings: &OptimizeSettings,
    stats: &mut PipelineStats,
) -> Result<SolveReport, MapError> {
    let problem = optimize::build_problem(map, settings)?;
    let solution = optimize::solve(&problem, &settings.solver)?;
    optimize::apply_solution(map, &problem, &solution)?;
    stats.optimizations += 1;
    stats.merges += map.merge_duplicates();
    Ok(solution.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::ipm::homography_from_camera;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn square_roi(size: f64) -> RegionOfInterest {
        RegionOfInterest::new(vec![
            PixelPoint::new(-size, -size),
            PixelPoint::new(size, -size),
            PixelPoint::new(size, size),
            PixelPoint::new(-size, size),
        ])
        .unwrap()
    }

    fn diamond(cx: f64, cy: f64) -> [MapPoint; 4] {
        [
            MapPoint::ground(cx, cy - 0.5),
            MapPoint::ground(cx + 0.5, cy),
            MapPoint::ground(cx, cy + 0.5),
            MapPoint::ground(cx - 0.5, cy),
        ]
    }

    fn empty_map() -> MapState {
        let poses = PoseLog::new(
            (0..200)
                .map(|f| VehiclePoseRecord {
                    frame: f,
                    timestamp: f as f64,
                    pose: RigidTransform::identity(),
                })
                .collect(),
        )
        .unwrap();
        MapState::new(poses, BTreeMap::new(), AssociationConfig::default())
    }

    fn det(corners: [MapPoint; 4], frame: u64) -> DetectedMarking {
        DetectedMarking::new(corners, [PixelPoint::default(); 4], frame, "front").unwrap()
    }

    #[test]
    fn identity_inverse_projection() {
        let px = [(1.0, 2.0), (3.0, 2.0), (3.0, 4.0), (1.0, 4.0)].map(|(u, v)| PixelPoint::new(u, v));
        let roi = square_roi(100.0);
        let out = inverse_project_detection(&px, &Homography::identity(), &roi, &RigidTransform::identity()).unwrap();
        for (p, q) in px.iter().zip(&out) {
            assert_eq!((q.x, q.y, q.z), (p.u, p.v, 0.0));
        }
        let shifted = inverse_project_detection(
            &px,
            &Homography::identity(),
            &roi,
            &RigidTransform::from_translation(5.0, -3.0, 0.0),
        )
        .unwrap();
        for (p, q) in px.iter().zip(&shifted) {
            assert_eq!((q.x, q.y), (p.u + 5.0, p.v - 3.0));
        }
    }

    #[test]
    fn outside_roi_reports_corner() {
        let px = [(1.0, 2.0), (3.0, 2.0), (300.0, 4.0), (1.0, 4.0)].map(|(u, v)| PixelPoint::new(u, v));
        let err = inverse_project_detection(
            &px,
            &Homography::identity(),
            &square_roi(100.0),
            &RigidTransform::identity(),
        );
        assert_eq!(err, Err(MapError::OutsideRoi { corner: 2 }));
    }

    #[test]
    fn inverse_projection_recovers_projected_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let cam = CameraModel::new(
                "front",
                Intrinsics::new(800.0, 800.0, 640.0, 360.0).unwrap(),
                CameraModel::mounted(
                    Vector3::new(
                        rng.random_range(-1.0..2.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(1.0..2.5),
                    ),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.2..0.8),
                ),
                1280,
                720,
            );
            let pose = RigidTransform::planar(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-3.1..3.1),
            );
            let h = homography_from_camera(&cam).unwrap();
            let ahead = pose.transform_point(&MapPoint::new(6.0, 0.0, 0.0));
            let truth = diamond(ahead.x, ahead.y);
            let px = truth.map(|c| project(&c, &pose, &cam).unwrap());
            let out = inverse_project_detection(&px, &h, &square_roi(1e5), &pose).unwrap();
            for (a, b) in out.iter().zip(&truth) {
                assert!(a.distance(b) < 1e-6);
            }
        }
    }

    #[test]
    fn two_observations_average() {
        let mut map = empty_map();
        let p = diamond(0.0, 0.0);
        let q = diamond(0.2, -0.1);
        assert_eq!(
            map.naive_update(det(p, 0)).unwrap(),
            UpdateOutcome::Created(MarkingId(0))
        );
        assert_eq!(
            map.naive_update(det(q, 1)).unwrap(),
            UpdateOutcome::Matched(MarkingId(0))
        );
        let m = map.marking(MarkingId(0)).unwrap();
        for k in 0..4 {
            assert!((m.corners[k].x - 0.5 * (p[k].x + q[k].x)).abs() < 1e-15);
            assert!((m.corners[k].y - 0.5 * (p[k].y + q[k].y)).abs() < 1e-15);
        }
        assert_eq!(m.observations.len(), 2);
        map.audit().unwrap();
    }

    #[test]
    fn far_detection_creates_marking() {
        let mut map = empty_map();
        map.naive_update(det(diamond(0.0, 0.0), 0)).unwrap();
        assert_eq!(
            map.naive_update(det(diamond(5.0, 0.0), 1)).unwrap(),
            UpdateOutcome::Created(MarkingId(1))
        );
        assert_eq!(map.len(), 2);
        assert!(map.duplicate_pairs().is_empty());
    }

    #[test]
    fn rotated_detection_order_is_matched() {
        let mut map = empty_map();
        let d = diamond(1.0, 1.0);
        map.naive_update(det(d, 0)).unwrap();
        // Same marking seen with an oddly rotated square-ish quad.
        let skewed = [d[0], d[1], d[2], d[3]].map(|c| MapPoint::ground(c.x + 0.01, c.y));
        map.naive_update(det([skewed[2], skewed[3], skewed[0], skewed[1]], 1))
            .unwrap();
        let m = map.marking(MarkingId(0)).unwrap();
        assert!((m.corners[0].x - (d[0].x + 0.005)).abs() < 1e-12);
    }

    #[test]
    fn ambiguous_detection_is_quarantined() {
        let mut map = empty_map();
        map.insert_marking(MarkingId(0), diamond(0.6, 0.0), 1);
        map.insert_marking(MarkingId(1), diamond(-0.6, 0.0), 1);
        let err = map.naive_update(det(diamond(0.0, 0.0), 2));
        assert!(matches!(err, Err(MapError::Association(_))));
        assert_eq!(map.quarantine.len(), 1);
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn mean_error_shrinks_with_observations() {
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = diamond(3.0, 4.0);
        let (mut sq, mut count) = (0.0, 0);
        for _ in 0..50 {
            let mut map = empty_map();
            for f in 0..100 {
                let noisy = truth.map(|c| MapPoint::ground(c.x + noise.sample(&mut rng), c.y + noise.sample(&mut rng)));
                map.naive_update(det(noisy, f)).unwrap();
            }
            assert_eq!(map.len(), 1);
            for (c, t) in map.marking(MarkingId(0)).unwrap().corners.iter().zip(&truth) {
                sq += (c.x - t.x).powi(2) + (c.y - t.y).powi(2);
                count += 1;
            }
        }
        // Per-axis std of the mean is sigma / sqrt(N).
        let per_axis = (sq / (2.0 * count as f64)).sqrt();
        let expected = 0.1 / 10.0;
        assert!(per_axis < 2.0 * expected && per_axis > 0.5 * expected, "{per_axis}");
    }

    #[test]
    fn averaging_is_order_independent() {
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dets: Vec<_> = (0..30)
            .map(|f| {
                det(
                    diamond(2.0, 2.0)
                        .map(|c| MapPoint::ground(c.x + noise.sample(&mut rng), c.y + noise.sample(&mut rng))),
                    f,
                )
            })
            .collect();
        let mut a = empty_map();
        dets.iter().cloned().for_each(|d| {
            a.naive_update(d).unwrap();
        });
        let mut b = empty_map();
        dets.iter().rev().cloned().for_each(|d| {
            b.naive_update(d).unwrap();
        });
        let (ma, mb) = (a.marking(MarkingId(0)).unwrap(), b.marking(MarkingId(0)).unwrap());
        for (p, q) in ma.corners.iter().zip(&mb.corners) {
            assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_collapses_duplicates() {
        let mut map = empty_map();
        map.naive_update(det(diamond(0.0, 0.0), 0)).unwrap();
        map.naive_update(det(diamond(3.0, 0.0), 1)).unwrap();
        map.set_corners(MarkingId(1), diamond(0.1, 0.0));
        assert_eq!(map.duplicate_pairs().len(), 1);
        assert_eq!(map.merge_duplicates(), 1);
        assert_eq!(map.len(), 1);
        let m = map.marking(MarkingId(0)).unwrap();
        assert_eq!(m.observations.len(), 2);
        assert!((m.corners[0].x - 0.05).abs() < 1e-12);
        map.audit().unwrap();
    }

    #[test]
    fn pose_log_rejects_unordered_frames() {
        let rec = |f| VehiclePoseRecord {
            frame: f,
            timestamp: 0.0,
            pose: RigidTransform::identity(),
        };
        assert!(PoseLog::new(vec![rec(0), rec(2), rec(2)]).is_err());
        let log = PoseLog::new(vec![rec(0), rec(2), rec(5)]).unwrap();
        assert!(log.get(2).is_some());
        assert!(log.get(3).is_none());
    }

    #[test]
    fn empty_stream_gives_empty_map() {
        let out = run_pipeline(&[], PoseLog::default(), BTreeMap::new(), &PipelineConfig::default()).unwrap();
        assert!(out.map.is_empty());
        assert_eq!(out.stats, PipelineStats::default());
    }

    #[test]
    fn pipeline_counts_rejections() {
        let mut cameras = BTreeMap::new();
        cameras.insert(
            "front".to_string(),
            CameraSetup {
                model: None,
                homography: Homography::identity(),
                roi: square_roi(10.0),
            },
        );
        let poses = PoseLog::new(vec![VehiclePoseRecord {
            frame: 0,
            timestamp: 0.0,
            pose: RigidTransform::identity(),
        }])
        .unwrap();
        let quad = |o: f64| {
            vec![
                PixelPoint::new(o, 0.0),
                PixelPoint::new(o + 1.0, 0.0),
                PixelPoint::new(o + 1.0, 1.0),
                PixelPoint::new(o, 1.0),
            ]
        };
        let dets = vec![
            DetectionRecord {
                frame: 0,
                camera_id: "front".into(),
                pixels: quad(0.0),
            },
            DetectionRecord {
                frame: 0,
                camera_id: "front".into(),
                pixels: quad(0.0)[..3].to_vec(),
            },
            DetectionRecord {
                frame: 0,
                camera_id: "front".into(),
                pixels: quad(20.0),
            },
            DetectionRecord {
                frame: 1,
                camera_id: "front".into(),
                pixels: quad(0.0),
            },
            DetectionRecord {
                frame: 0,
                camera_id: "side".into(),
                pixels: quad(0.0),
            },
        ];
        let out = run_pipeline(&dets, poses, cameras, &PipelineConfig::default()).unwrap();
        assert_eq!(out.map.len(), 1);
        let s = &out.stats;
        assert_eq!(
            (
                s.ingested,
                s.wrong_corner_count,
                s.outside_roi,
                s.missing_pose,
                s.unknown_camera
            ),
            (1, 1, 1, 1, 1)
        );
    }
}
