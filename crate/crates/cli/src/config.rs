//! TOML run configurations.
//!
//! Relative paths inside a config file are resolved against the directory
//! holding that file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hdmap_core::baselines::{BaselineConfig, CameraSelection, Scenario};
use hdmap_core::mapbuild::AssociationConfig;
use hdmap_core::metrics::{EvaluationConfig, DEFAULT_CELL, DEFAULT_EVAL_GATE};
use hdmap_core::optimize::{SolverOptions, DEFAULT_SIGMA_PRIOR};
use hdmap_core::par::Execution;
use hdmap_core::simulate::{PerturbationSpec, SceneSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Parameters shared by every command that builds or scores maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingParams {
    pub association: AssociationConfig,
    pub solver: SolverOptions,
    /// Standard deviation of the installation-position prior, meters.
    pub sigma_prior: f64,
    /// Standard deviation of an optional rotation prior, radians.
    pub sigma_rotation_prior: Option<f64>,
    /// Run a bundle adjustment after this many new markings.
    pub opt_every_n_new: usize,
    /// Truth-to-estimate matching gate for evaluation, meters.
    pub eval_gate: f64,
    /// IoU raster cell size, meters.
    pub cell: f64,
    pub execution: Execution,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            association: AssociationConfig::default(),
            solver: SolverOptions::default(),
            sigma_prior: DEFAULT_SIGMA_PRIOR,
            sigma_rotation_prior: None,
            opt_every_n_new: 10,
            eval_gate: DEFAULT_EVAL_GATE,
            cell: DEFAULT_CELL,
            execution: Execution::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(format!("{name} must be positive, got {v}")))
    }
}

impl MappingParams {
    pub fn validate(&self) -> Result<(), CliError> {
        let a = &self.association;
        positive("association.gate", a.gate)?;
        if !(a.tie_epsilon >= 0.0) {
            return Err(CliError::config("association.tie_epsilon must be non-negative"));
        }
        if a.quadtree_capacity == 0 || a.quadtree_max_depth == 0 {
            return Err(CliError::config(
                "association.quadtree_capacity and quadtree_max_depth must be at least 1",
            ));
        }
        self.solver
            .validate()
            .map_err(|e| CliError::config(format!("solver: {e}")))?;
        positive("sigma_prior", self.sigma_prior)?;
        if let Some(s) = self.sigma_rotation_prior {
            positive("sigma_rotation_prior", s)?;
        }
        if self.opt_every_n_new == 0 {
            return Err(CliError::config("opt_every_n_new must be at least 1"));
        }
        positive("eval_gate", self.eval_gate)?;
        positive("cell", self.cell)
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            association: self.association,
            solver: self.solver,
            sigma_prior: self.sigma_prior,
            sigma_rotation_prior: self.sigma_rotation_prior,
            opt_every_n_new: self.opt_every_n_new,
            evaluation: self.evaluation(),
        }
        .with_execution(self.execution)
    }

    pub fn evaluation(&self) -> EvaluationConfig {
        EvaluationConfig {
            gate: self.eval_gate,
            cell: self.cell,
            execution: self.execution,
        }
    }
}

/// Which mapping strategy `build` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BuildBaseline {
    /// Naive averaging through the supplied homographies (CNI or ENI).
    Naive,
    /// Joint optimization of corners and extrinsics.
    Opt,
    /// Naive averaging through the homographies an Opt run produced.
    Oni,
}

/// Camera setup selection, mirrored for clap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Cameras {
    Front,
    Rear,
    Both,
}

impl From<Cameras> for CameraSelection {
    fn from(c: Cameras) -> Self {
        match c {
            Cameras::Front => CameraSelection::Front,
            Cameras::Rear => CameraSelection::Rear,
            Cameras::Both => CameraSelection::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub poses: PathBuf,
    pub detections: Vec<PathBuf>,
    /// Camera calibration blocks.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Per-camera point-pair files; the homography and region of interest
    /// are then estimated from the pairs.
    #[serde(default)]
    pub pairs: BTreeMap<String, PathBuf>,
    #[serde(default = "default_baseline")]
    pub baseline: BuildBaseline,
    #[serde(default = "default_cameras")]
    pub cameras: Cameras,
    /// Only used to label naive runs (CNI or ENI).
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    #[serde(default)]
    pub mapping: MappingParams,
}

fn default_baseline() -> BuildBaseline {
    BuildBaseline::Opt
}

fn default_cameras() -> Cameras {
    Cameras::Both
}

fn default_scenario() -> Scenario {
    Scenario::Calibrated
}

impl BuildConfig {
    fn resolve(&mut self, base: &Path) {
        self.poses = base.join(&self.poses);
        for d in &mut self.detections {
            *d = base.join(&*d);
        }
        if let Some(c) = &mut self.calibration {
            *c = base.join(&*c);
        }
        for p in self.pairs.values_mut() {
            *p = base.join(&*p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.detections.is_empty() {
            return Err(CliError::config("detections: at least one file is required"));
        }
        if self.calibration.is_none() && self.pairs.is_empty() {
            return Err(CliError::config("either calibration or pairs must be given"));
        }
        let mut inputs: Vec<&PathBuf> = vec![&self.poses];
        inputs.extend(&self.detections);
        inputs.extend(&self.calibration);
        inputs.extend(self.pairs.values());
        for p in inputs {
            if !p.is_file() {
                return Err(CliError::config(format!("input file {} does not exist", p.display())));
            }
        }
        self.mapping.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default = "SceneSpec::reference")]
    pub scene: SceneSpec,
    /// Overrides the scene's own perturbation for the transferred calibration.
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub mapping: MappingParams,
}

fn default_scenarios() -> Vec<Scenario> {
    vec![Scenario::Calibrated, Scenario::Transferred]
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::reference(),
            perturbation: None,
            scenarios: default_scenarios(),
            mapping: MappingParams::default(),
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.scenarios.is_empty() {
            return Err(CliError::config("scenarios must not be empty"));
        }
        self.mapping.validate()
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Deserializes a TOML file; problems become config errors naming the file.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_build(path: &Path) -> Result<BuildConfig, CliError> {
    let mut cfg: BuildConfig = load_toml(path)?;
    cfg.resolve(&base_dir(path));
    Ok(cfg)
}

pub fn load_scene(path: Option<&Path>) -> Result<SceneSpec, CliError> {
    let spec = match path {
        Some(p) => load_toml(p)?,
        None => SceneSpec::reference(),
    };
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(spec)
}

pub fn load_matrix(path: Option<&Path>) -> Result<MatrixConfig, CliError> {
    let cfg = match path {
        Some(p) => load_toml(p)?,
        None => MatrixConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}
