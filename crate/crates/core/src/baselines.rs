//! The four mapping baselines and the camera-setup matrix they run over.
//!
//! - naive mapping with the supplied calibration (CNI when the calibration
//!   is accurate, ENI when it belongs to a different vehicle),
//! - Opt: naive initialization plus joint bundle adjustment,
//! - ONI: naive mapping re-run with the homographies Opt produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::geometry::CameraModel;
use crate::ipm::{IpmError, RegionOfInterest};
use crate::mapbuild::{
    run_pipeline, AssociationConfig, CameraSetup, DetectionRecord, MapError, MapState, PipelineConfig, PipelineMode,
    PipelineOutput, PipelineStats, PoseLog,
};
use crate::metrics::{evaluate, map_markings, EvaluationConfig, EvaluationReport, MarkingCorners};
use crate::optimize::{OptimizeSettings, PriorConfig, SolveReport, SolverOptions, DEFAULT_SIGMA_PRIOR};
use crate::par::Execution;
use crate::simulate::{
    generate_scene, perturbed_cameras, render_detections, InvalidSpec, PerturbationSpec, Scene, SceneSpec,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("camera setup needs camera '{0}', which the scene does not have")]
    MissingCamera(String),
    #[error("camera '{0}' has no intrinsic model")]
    MissingModel(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Ipm(#[from] IpmError),
    #[error(transparent)]
    Spec(#[from] InvalidSpec),
}

/// Quality of the calibration handed to the mapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Calibrated on this vehicle.
    Calibrated,
    /// Calibrated on a different vehicle.
    Transferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Naive,
    Opt,
    Oni,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Naive, Baseline::Opt, Baseline::Oni];

    pub fn label(self, scenario: Scenario) -> &'static str {
        match (self, scenario) {
            (Baseline::Naive, Scenario::Calibrated) => "CNI",
            (Baseline::Naive, Scenario::Transferred) => "ENI",
            (Baseline::Opt, _) => "Opt",
            (Baseline::Oni, _) => "ONI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraSelection {
    Front,
    Rear,
    Both,
}

impl CameraSelection {
    pub const ALL: [CameraSelection; 3] = [CameraSelection::Front, CameraSelection::Rear, CameraSelection::Both];

    pub fn label(self) -> &'static str {
        match self {
            CameraSelection::Front => "front",
            CameraSelection::Rear => "rear",
            CameraSelection::Both => "both",
        }
    }

    /// Camera ids this setup uses out of the available ones.
    pub fn camera_ids(self, available: &[String]) -> Result<Vec<String>, BaselineError> {
        let want: Vec<&str> = match self {
            CameraSelection::Front => vec!["front"],
            CameraSelection::Rear => vec!["rear"],
            CameraSelection::Both => return Ok(available.to_vec()),
        };
        want.into_iter()
            .map(|id| {
                available
                    .iter()
                    .find(|a| a.as_str() == id)
                    .cloned()
                    .ok_or_else(|| BaselineError::MissingCamera(id.to_string()))
            })
            .collect()
    }
}

/// Tunables shared by every baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub association: AssociationConfig,
    pub solver: SolverOptions,
    pub sigma_prior: f64,
    pub sigma_rotation_prior: Option<f64>,
    pub opt_every_n_new: usize,
    pub evaluation: EvaluationConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            association: AssociationConfig::default(),
            solver: SolverOptions::default(),
            sigma_prior: DEFAULT_SIGMA_PRIOR,
            sigma_rotation_prior: None,
            opt_every_n_new: 10,
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl BaselineConfig {
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.solver.execution = exec;
        self.evaluation.execution = exec;
        self
    }

    /// Optimization settings whose mounting priors come from the supplied
    /// calibration.
    pub fn optimize_settings(&self, setups: &BTreeMap<String, CameraSetup>) -> Result<OptimizeSettings, BaselineError> {
        let mut priors = BTreeMap::new();
        for (id, setup) in setups {
            let model = setup
                .model
                .as_ref()
                .ok_or_else(|| BaselineError::MissingModel(id.clone()))?;
            let mut prior = PriorConfig::from_calibration(&model.extrinsic);
            prior.sigma_translation = self.sigma_prior;
            prior.sigma_rotation = self.sigma_rotation_prior;
            priors.insert(id.clone(), prior);
        }
        let mut settings = OptimizeSettings::new(priors);
        settings.solver = self.solver;
        settings.opt_every_n_new = self.opt_every_n_new;
        Ok(settings)
    }
}

/// Camera setups built from camera models (homographies composed from them).
pub fn setups_from_models(
    models: &[CameraModel],
    rois: &BTreeMap<String, RegionOfInterest>,
) -> Result<BTreeMap<String, CameraSetup>, BaselineError> {
    models
        .iter()
        .map(|m| {
            let roi = rois
                .get(&m.id)
                .ok_or_else(|| BaselineError::MissingCamera(m.id.clone()))?;
            Ok((m.id.clone(), CameraSetup::from_model(m.clone(), roi.clone())?))
        })
        .collect()
}

/// Setups carrying the extrinsics and homographies of an optimized map.
pub fn optimized_setups(map: &MapState) -> BTreeMap<String, CameraSetup> {
    map.cameras().clone()
}

fn restrict(
    detections: &[DetectionRecord],
    setups: &BTreeMap<String, CameraSetup>,
    ids: &[String],
) -> (Vec<DetectionRecord>, BTreeMap<String, CameraSetup>) {
    let chosen: BTreeMap<String, CameraSetup> = setups
        .iter()
        .filter(|(id, _)| ids.contains(id))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let dets = detections
        .iter()
        .filter(|d| chosen.contains_key(&d.camera_id))
        .cloned()
        .collect();
    (dets, chosen)
}

pub fn run_naive(
    detections: &[DetectionRecord],
    poses: &PoseLog,
    setups: &BTreeMap<String, CameraSetup>,
    cfg: &BaselineConfig,
) -> Result<PipelineOutput, BaselineError> {
    let config = PipelineConfig {
        association: cfg.association,
        mode: PipelineMode::Naive,
    };
    Ok(run_pipeline(detections, poses.clone(), setups.clone(), &config)?)
}

pub fn run_opt(
    detections: &[DetectionRecord],
    poses: &PoseLog,
    setups: &BTreeMap<String, CameraSetup>,
    cfg: &BaselineConfig,
) -> Result<PipelineOutput, BaselineError> {
    let config = PipelineConfig {
        association: cfg.association,
        mode: PipelineMode::Optimize(cfg.optimize_settings(setups)?),
    };
    Ok(run_pipeline(detections, poses.clone(), setups.clone(), &config)?)
}

/// A finished baseline run and its evaluation.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub baseline: Baseline,
    pub map: MapState,
    pub reports: Vec<SolveReport>,
    pub stats: PipelineStats,
    pub evaluation: EvaluationReport,
}

impl BaselineOutcome {
    fn new(baseline: Baseline, out: PipelineOutput, truth: &[MarkingCorners], cfg: &BaselineConfig) -> Self {
        let evaluation =
            evaluate(&map_markings(&out.map), truth, &cfg.evaluation).expect("evaluation cell size is validated");
        Self {
            baseline,
            map: out.map,
            reports: out.reports,
            stats: out.stats,
            evaluation,
        }
    }
}

/// Naive, Opt and ONI on one camera setup. ONI is skipped when Opt fails.
pub fn run_setup(
    detections: &[DetectionRecord],
    poses: &PoseLog,
    supplied: &BTreeMap<String, CameraSetup>,
    selection: CameraSelection,
    truth: &[MarkingCorners],
    cfg: &BaselineConfig,
) -> Result<Vec<Result<BaselineOutcome, String>>, BaselineError> {
    let available: Vec<String> = supplied.keys().cloned().collect();
    let ids = selection.camera_ids(&available)?;
    let (dets, setups) = restrict(detections, supplied, &ids);

    let naive = run_naive(&dets, poses, &setups, cfg).map(|o| BaselineOutcome::new(Baseline::Naive, o, truth, cfg));
    let opt = run_opt(&dets, poses, &setups, cfg).map(|o| BaselineOutcome::new(Baseline::Opt, o, truth, cfg));
    let oni = match &opt {
        Ok(o) => run_naive(&dets, poses, &optimized_setups(&o.map), cfg)
            .map(|out| BaselineOutcome::new(Baseline::Oni, out, truth, cfg))
            .map_err(|e| e.to_string()),
        Err(e) => Err(format!("no optimized calibration: {e}")),
    };
    Ok(vec![
        naive.map_err(|e| e.to_string()),
        opt.map_err(|e| e.to_string()),
        oni,
    ])
}

/// One cell of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCell {
    pub baseline: String,
    pub setup: String,
    pub rmse: Option<f64>,
    pub mean_iou: Option<f64>,
    pub markings: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineMatrix {
    pub scenario: Scenario,
    pub cells: Vec<MatrixCell>,
}

impl BaselineMatrix {
    pub fn cell(&self, baseline: &str, setup: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.baseline == baseline && c.setup == setup)
    }

    /// Table with baselines as rows and camera setups as columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let setups: Vec<&str> = CameraSelection::ALL.iter().map(|c| c.label()).collect();
        let _ = write!(s, "{:<8}", "method");
        for setup in &setups {
            let _ = write!(s, " | {:>13} {:>6} {:>5}", format!("{setup}:rmse"), "iou", "n");
        }
        s.push('\n');
        for b in Baseline::ALL {
            let label = b.label(self.scenario);
            let _ = write!(s, "{label:<8}");
            for setup in &setups {
                match self.cell(label, setup) {
                    Some(MatrixCell {
                        failure: None,
                        rmse,
                        mean_iou,
                        markings,
                        ..
                    }) => {
                        let r = rmse.map_or("n/a".into(), |v| format!("{v:.4}"));
                        let i = mean_iou.map_or("n/a".into(), |v| format!("{v:.3}"));
                        let _ = write!(s, " | {r:>13} {i:>6} {markings:>5}");
                    }
                    _ => {
                        let _ = write!(s, " | {:>13} {:>6} {:>5}", "FAILED", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        for c in self.cells.iter().filter(|c| c.failure.is_some()) {
            let _ = writeln!(
                s,
                "# {} / {}: {}",
                c.baseline,
                c.setup,
                c.failure.as_deref().unwrap_or("")
            );
        }
        s
    }
}

/// Runs every baseline over every camera setup. Failures are recorded per
/// cell instead of aborting the matrix.
pub fn run_matrix(
    scenario: Scenario,
    detections: &[DetectionRecord],
    poses: &PoseLog,
    supplied: &BTreeMap<String, CameraSetup>,
    truth: &[MarkingCorners],
    cfg: &BaselineConfig,
) -> BaselineMatrix {
    let mut cells = Vec::new();
    for selection in CameraSelection::ALL {
        match run_setup(detections, poses, supplied, selection, truth, cfg) {
            Ok(results) => {
                for (b, r) in Baseline::ALL.into_iter().zip(results) {
                    cells.push(match r {
                        Ok(o) => MatrixCell {
                            baseline: b.label(scenario).to_string(),
                            setup: selection.label().to_string(),
                            rmse: o.evaluation.rmse,
                            mean_iou: o.evaluation.mean_iou,
                            markings: o.map.len(),
                            failure: None,
                        },
                        Err(e) => failed_cell(b.label(scenario), selection, e),
                    });
                }
            }
            Err(e) => {
                for b in Baseline::ALL {
                    cells.push(failed_cell(b.label(scenario), selection, e.to_string()));
                }
            }
        }
    }
    BaselineMatrix { scenario, cells }
}

fn failed_cell(label: &str, selection: CameraSelection, failure: String) -> MatrixCell {
    MatrixCell {
        baseline: label.to_string(),
        setup: selection.label().to_string(),
        rmse: None,
        mean_iou: None,
        markings: 0,
        failure: Some(failure),
    }
}

/// A generated scene with its detection stream and both calibrations.
#[derive(Debug, Clone)]
pub struct SimulatedInputs {
    pub spec: SceneSpec,
    pub scene: Scene,
    pub detections: Vec<DetectionRecord>,
    pub poses: PoseLog,
    pub truth: Vec<MarkingCorners>,
    /// Calibration of this vehicle.
    pub calibrated: BTreeMap<String, CameraSetup>,
    /// Calibration of a different vehicle.
    pub transferred: BTreeMap<String, CameraSetup>,
}

impl SimulatedInputs {
    /// Generates and renders `spec`; the transferred calibration uses
    /// `perturbation` (or the scene's own).
    pub fn generate(
        spec: &SceneSpec,
        perturbation: Option<PerturbationSpec>,
        exec: Execution,
    ) -> Result<Self, BaselineError> {
        let scene = generate_scene(spec)?;
        let detections = render_detections(&scene, spec, exec)
            .into_iter()
            .map(|d| d.record)
            .collect();
        let poses = PoseLog::new(scene.poses.clone())?;
        let calibrated = setups_from_models(&scene.truth.cameras, &scene.rois)?;
        let p = perturbation.unwrap_or(spec.perturbation);
        let transferred = setups_from_models(&perturbed_cameras(&scene, spec, &p), &scene.rois)?;
        Ok(Self {
            spec: spec.clone(),
            truth: scene.truth.markings.clone(),
            scene,
            detections,
            poses,
            calibrated,
            transferred,
        })
    }

    pub fn supplied(&self, scenario: Scenario) -> &BTreeMap<String, CameraSetup> {
        match scenario {
            Scenario::Calibrated => &self.calibrated,
            Scenario::Transferred => &self.transferred,
        }
    }

    pub fn matrix(&self, scenario: Scenario, cfg: &BaselineConfig) -> BaselineMatrix {
        run_matrix(
            scenario,
            &self.detections,
            &self.poses,
            self.supplied(scenario),
            &self.truth,
            cfg,
        )
    }

    pub fn setup(
        &self,
        scenario: Scenario,
        selection: CameraSelection,
        cfg: &BaselineConfig,
    ) -> Result<Vec<Result<BaselineOutcome, String>>, BaselineError> {
        run_setup(
            &self.detections,
            &self.poses,
            self.supplied(scenario),
            selection,
            &self.truth,
            cfg,
        )
    }
}
