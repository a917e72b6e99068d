//! Joint refinement of camera extrinsics and marking corners.
//!
//! Every stored observation contributes a whitened reprojection residual per
//! corner and every camera contributes a prior on its installation position.
//! Corners live on the ground plane, so each carries two parameters. The problem is solved by
//! Levenberg-Marquardt with the corner blocks eliminated through a Schur
//! complement (see [`solve`]).

mod solver;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::association::MarkingId;
use crate::geometry::{project_jacobian, CameraModel, MapPoint, PixelPoint, RigidTransform};
use crate::ipm::{homography_from_camera, Homography, IpmError};
use crate::mapbuild::MapState;
use crate::par::Execution;

pub use solver::{solve, Solution};

pub const DEFAULT_SIGMA_PIXEL: f64 = 1.0;
pub const DEFAULT_SIGMA_PRIOR: f64 = 0.05;
pub const DEFAULT_HUBER_DELTA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error("nothing to optimize")]
    EmptyProblem,
    #[error("camera '{0}' has observations but no prior")]
    MissingPrior(String),
    #[error("camera '{0}' has observations but no intrinsic model")]
    MissingModel(String),
    #[error("numerical failure at residual {term}: {reason}")]
    NumericalFailure { term: usize, reason: String },
    #[error("no progress after {iterations} iterations (damping {damping:e})")]
    NoProgress { iterations: usize, damping: f64 },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Ipm(#[from] IpmError),
}

/// Prior knowledge about one camera's mounting.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// Installation position `t0` of the optical center in the vehicle frame.
    pub position: Vector3<f64>,
    pub sigma_translation: f64,
    /// Rotation the optimizer starts from.
    pub initial_rotation: Rotation3<f64>,
    /// When set, also penalize rotation away from `initial_rotation`.
    pub sigma_rotation: Option<f64>,
}

impl PriorConfig {
    pub fn new(position: Vector3<f64>, initial_rotation: Rotation3<f64>) -> Self {
        Self {
            position,
            sigma_translation: DEFAULT_SIGMA_PRIOR,
            initial_rotation,
            sigma_rotation: None,
        }
    }

    /// Prior from a mounting position and heading: the rotation starts level
    /// (optical axis parallel to the ground, image y pointing down).
    pub fn from_mounting(position: Vector3<f64>, yaw: f64) -> Self {
        Self::new(position, CameraModel::level_rotation(yaw))
    }

    /// Mounting prior read off an existing (possibly coarse) calibration.
    pub fn from_calibration(extrinsic: &RigidTransform) -> Self {
        let axis = extrinsic.rotation.inverse() * Vector3::z();
        Self::from_mounting(extrinsic.inverse().translation, axis.y.atan2(axis.x))
    }

    pub fn initial_extrinsic(&self) -> RigidTransform {
        RigidTransform::new(self.initial_rotation, -(self.initial_rotation * self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub sigma_pixel: f64,
    /// Huber threshold in pixels; `None` for plain least squares.
    pub huber_delta: Option<f64>,
    pub initial_damping: f64,
    pub max_damping: f64,
    pub cost_tolerance: f64,
    pub gradient_tolerance: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            sigma_pixel: DEFAULT_SIGMA_PIXEL,
            huber_delta: None,
            initial_damping: 1e-4,
            max_damping: 1e12,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            execution: Execution::default(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: &str| Err(OptimizeError::InvalidOptions(m.to_string()));
        if !(self.sigma_pixel > 0.0) {
            return bad("sigma_pixel must be positive");
        }
        if matches!(self.huber_delta, Some(d) if !(d > 0.0)) {
            return bad("huber_delta must be positive");
        }
        if !(self.initial_damping > 0.0) || !(self.max_damping > self.initial_damping) {
            return bad("damping bounds must satisfy 0 < initial < max");
        }
        Ok(())
    }
}

/// Everything the pipeline needs to run bundle adjustments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSettings {
    pub priors: BTreeMap<String, PriorConfig>,
    pub solver: SolverOptions,
    /// Optimize after this many newly created markings.
    pub opt_every_n_new: usize,
    /// Run one more optimization once the stream is exhausted.
    pub final_pass: bool,
}

impl OptimizeSettings {
    pub fn new(priors: BTreeMap<String, PriorConfig>) -> Self {
        Self {
            priors,
            solver: SolverOptions::default(),
            opt_every_n_new: 10,
            final_pass: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    CostTolerance,
    SmallStep,
    MaxIterations,
}

/// Final extrinsic of one camera, as reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEstimate {
    pub id: String,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub final_damping: f64,
    pub residual_count: usize,
    pub parameter_count: usize,
    pub cameras: Vec<CameraEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraBlock {
    pub id: String,
    pub model: CameraModel,
    pub prior: PriorConfig,
}

/// One ground-plane corner parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBlock {
    pub marking: MarkingId,
    pub corner: usize,
    pub position: [f64; 2],
}

/// One observed pixel of one corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionTerm {
    pub corner: usize,
    pub camera: usize,
    pub frame: u64,
    pub pose: RigidTransform,
    pub observed: PixelPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationProblem {
    pub cameras: Vec<CameraBlock>,
    pub corners: Vec<CornerBlock>,
    pub terms: Vec<ReprojectionTerm>,
}

/// Parameter values the solver iterates on.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub extrinsics: Vec<RigidTransform>,
    pub corners: Vec<[f64; 2]>,
}

impl OptimizationProblem {
    pub fn initial_estimate(&self) -> Estimate {
        Estimate {
            extrinsics: self.cameras.iter().map(|c| c.model.extrinsic).collect(),
            corners: self.corners.iter().map(|c| c.position).collect(),
        }
    }

    fn prior_rows(&self) -> usize {
        self.cameras
            .iter()
            .map(|c| if c.prior.sigma_rotation.is_some() { 6 } else { 3 })
            .sum()
    }

    pub fn residual_count(&self) -> usize {
        2 * self.terms.len() + self.prior_rows()
    }

    pub fn parameter_count(&self) -> usize {
        6 * self.cameras.len() + 2 * self.corners.len()
    }

    /// Whitened residual vector without robust weighting: reprojection rows
    /// first (two per term), then priors.
    pub fn residuals(&self, estimate: &Estimate, sigma_pixel: f64) -> Result<Vec<f64>, OptimizeError> {
        let mut r = Vec::with_capacity(self.residual_count());
        for (i, term) in self.terms.iter().enumerate() {
            let (res, _, _) = self.linearize_term(i, term, estimate, sigma_pixel)?;
            r.extend_from_slice(&[res.x, res.y]);
        }
        for (c, cam) in self.cameras.iter().enumerate() {
            let (res, _) = prior_translation(cam, &estimate.extrinsics[c]);
            r.extend(res.iter());
            if let Some((res, _)) = prior_rotation(cam, &estimate.extrinsics[c]) {
                r.extend(res.iter());
            }
        }
        Ok(r)
    }

    /// Dense whitened Jacobian, columns ordered camera blocks first then
    /// corner blocks. Used for diagnostics and tests.
    pub fn jacobian_dense(&self, estimate: &Estimate, sigma_pixel: f64) -> Result<DMatrix<f64>, OptimizeError> {
        let ncam = 6 * self.cameras.len();
        let mut j = DMatrix::zeros(self.residual_count(), self.parameter_count());
        for (i, term) in self.terms.iter().enumerate() {
            let (_, jx, jc) = self.linearize_term(i, term, estimate, sigma_pixel)?;
            j.view_mut((2 * i, ncam + 2 * term.corner), (2, 2)).copy_from(&jx);
            j.view_mut((2 * i, 6 * term.camera), (2, 6)).copy_from(&jc);
        }
        let mut row = 2 * self.terms.len();
        for (c, cam) in self.cameras.iter().enumerate() {
            let (_, jt) = prior_translation(cam, &estimate.extrinsics[c]);
            j.view_mut((row, 6 * c), (3, 6)).copy_from(&jt);
            row += 3;
            if let Some((_, jr)) = prior_rotation(cam, &estimate.extrinsics[c]) {
                j.view_mut((row, 6 * c), (3, 6)).copy_from(&jr);
                row += 3;
            }
        }
        Ok(j)
    }

    /// Whitened residual and Jacobian blocks of one reprojection term.
    pub(crate) fn linearize_term(
        &self,
        index: usize,
        term: &ReprojectionTerm,
        estimate: &Estimate,
        sigma_pixel: f64,
    ) -> Result<TermLinearization, OptimizeError> {
        let camera = &self.cameras[term.camera];
        let mut model = camera.model.clone();
        model.extrinsic = estimate.extrinsics[term.camera];
        let xy = estimate.corners[term.corner];
        let corner = MapPoint::ground(xy[0], xy[1]);
        let jac = project_jacobian(&corner, &term.pose, &model).map_err(|e| OptimizeError::NumericalFailure {
            term: index,
            reason: e.to_string(),
        })?;
        let inv = 1.0 / sigma_pixel;
        let r = nalgebra::Vector2::new(jac.pixel.u - term.observed.u, jac.pixel.v - term.observed.v) * inv;
        let jx = jac.d_corner.fixed_view::<2, 2>(0, 0).into_owned() * inv;
        Ok((r, jx, jac.d_extrinsic * inv))
    }
}

/// Residual, corner Jacobian and extrinsic Jacobian of one term.
pub(crate) type TermLinearization = (
    nalgebra::Vector2<f64>,
    nalgebra::Matrix2<f64>,
    nalgebra::SMatrix<f64, 2, 6>,
);

type PriorBlock = (Vector3<f64>, nalgebra::SMatrix<f64, 3, 6>);

/// Residual on the optical center `c = -R^T t` in the vehicle frame.
fn prior_translation(camera: &CameraBlock, extrinsic: &RigidTransform) -> PriorBlock {
    let inv = 1.0 / camera.prior.sigma_translation;
    let rt = extrinsic.rotation.matrix().transpose();
    let center = -(rt * extrinsic.translation);
    let r = (center - camera.prior.position) * inv;
    let mut j = nalgebra::SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-rt * crate::geometry::skew(&extrinsic.translation) * inv));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt * inv));
    (r, j)
}

fn prior_rotation(camera: &CameraBlock, extrinsic: &RigidTransform) -> Option<PriorBlock> {
    let sigma = camera.prior.sigma_rotation?;
    let phi = crate::geometry::so3_log(&(extrinsic.rotation * camera.prior.initial_rotation.inverse()));
    let mut j = nalgebra::SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(crate::geometry::so3_left_jacobian_inv(&phi) / sigma));
    Some((phi / sigma, j))
}

/// Collects every stored observation of every marking into a problem.
pub fn build_problem(map: &MapState, settings: &OptimizeSettings) -> Result<OptimizationProblem, OptimizeError> {
    let mut camera_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cameras = Vec::new();
    let mut corners = Vec::new();
    let mut terms = Vec::new();

    // Cameras in id order so the parameter layout is deterministic.
    let mut used: Vec<&str> = map
        .markings()
        .flat_map(|m| m.observations.iter().map(|o| o.camera_id.as_str()))
        .collect();
    used.sort_unstable();
    used.dedup();
    for id in used {
        let setup = map
            .camera(id)
            .ok_or_else(|| OptimizeError::MissingModel(id.to_string()))?;
        let model = setup
            .model
            .clone()
            .ok_or_else(|| OptimizeError::MissingModel(id.to_string()))?;
        let prior = settings
            .priors
            .get(id)
            .cloned()
            .ok_or_else(|| OptimizeError::MissingPrior(id.to_string()))?;
        camera_index.insert(id, cameras.len());
        cameras.push(CameraBlock {
            id: id.to_string(),
            model,
            prior,
        });
    }

    for marking in map.markings() {
        if marking.observations.is_empty() {
            continue;
        }
        let base = corners.len();
        for (k, c) in marking.corners.iter().enumerate() {
            corners.push(CornerBlock {
                marking: marking.id,
                corner: k,
                position: [c.x, c.y],
            });
        }
        for obs in &marking.observations {
            let pose = map
                .poses()
                .get(obs.frame)
                .expect("observations only reference logged frames")
                .pose;
            let camera = camera_index[obs.camera_id.as_str()];
            for k in 0..4 {
                terms.push(ReprojectionTerm {
                    corner: base + k,
                    camera,
                    frame: obs.frame,
                    pose,
                    observed: obs.pixel_for_corner(k),
                });
            }
        }
    }

    if terms.is_empty() {
        return Err(OptimizeError::EmptyProblem);
    }
    Ok(OptimizationProblem {
        cameras,
        corners,
        terms,
    })
}

/// Camera model with a new extrinsic and the homography composed from it.
pub fn update_camera_from_solution(
    camera: &CameraModel,
    extrinsic: &RigidTransform,
) -> Result<(CameraModel, Homography), IpmError> {
    let mut model = camera.clone();
    model.extrinsic = *extrinsic;
    let h = homography_from_camera(&model)?;
    Ok((model, h))
}

/// Writes optimized corners and extrinsics back into the map.
pub fn apply_solution(
    map: &mut MapState,
    problem: &OptimizationProblem,
    solution: &Solution,
) -> Result<(), OptimizeError> {
    for (c, cam) in problem.cameras.iter().enumerate() {
        let (model, h) = update_camera_from_solution(&cam.model, &solution.estimate.extrinsics[c])?;
        map.set_camera(&cam.id, model, h);
    }
    for chunk in problem.corners.chunks(4).zip(solution.estimate.corners.chunks(4)) {
        let (blocks, xy) = chunk;
        let mut corners = [MapPoint::default(); 4];
        for (b, p) in blocks.iter().zip(xy) {
            corners[b.corner] = MapPoint::ground(p[0], p[1]);
        }
        map.set_corners(blocks[0].marking, corners);
    }
    Ok(())
}
