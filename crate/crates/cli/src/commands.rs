use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hdmap_core::baselines::{
    optimized_setups, run_matrix, run_naive, run_opt, Baseline, CameraSelection, SimulatedInputs,
};
use hdmap_core::formats::{self, FormatError};
use hdmap_core::ipm::{estimate_homography_dlt, RegionOfInterest};
use hdmap_core::mapbuild::{CameraSetup, DetectionRecord, PipelineOutput, PoseLog};
use hdmap_core::metrics::{evaluate, EvaluationConfig};
use hdmap_core::par::Execution;
use log::info;
use serde::Serialize;

use crate::config::{self, BuildBaseline, BuildConfig, Cameras};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const POSES: &str = "poses.txt";
pub const TRUTH: &str = "truth.txt";
pub const CALIBRATION: &str = "calibration.txt";
pub const CALIBRATION_TRANSFERRED: &str = "calibration_transferred.txt";
pub const CALIBRATION_OPTIMIZED: &str = "calibration_optimized.txt";
pub const MAP: &str = "map.txt";
pub const RUN_LOG: &str = "run_log.jsonl";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const MATCHES_CSV: &str = "matches.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const MATRIX_TEXT: &str = "matrix.txt";
pub const MATRIX_JSON: &str = "matrix.json";

pub fn detections_file(camera: &str) -> String {
    format!("detections_{camera}.txt")
}

pub fn pairs_file(camera: &str) -> String {
    format!("pairs_{camera}.txt")
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_file<T>(path: &Path, parse: impl Fn(&str) -> Result<T, FormatError>) -> Result<T, CliError> {
    parse(&read(path)?).map_err(|e| CliError::format(path, e))
}

pub fn simulate(config: Option<&Path>, seed: Option<u64>, exec: Execution, out: &Path) -> Result<(), CliError> {
    let mut spec = config::load_scene(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let start = Instant::now();
    let inputs = SimulatedInputs::generate(&spec, None, exec)?;
    info!(
        "simulated {} markings, {} poses, {} detections in {:.2?}",
        inputs.truth.len(),
        inputs.scene.poses.len(),
        inputs.detections.len(),
        start.elapsed()
    );

    let mut run = RunDir::create(out)?;
    run.write(POSES, &formats::write_poses(&inputs.scene.poses))?;
    for cam in &spec.cameras {
        let dets: Vec<DetectionRecord> = inputs
            .detections
            .iter()
            .filter(|d| d.camera_id == cam.id)
            .cloned()
            .collect();
        run.write(&detections_file(&cam.id), &formats::write_detections(&dets))?;
        run.write(
            &pairs_file(&cam.id),
            &formats::write_pairs(&inputs.scene.calibration[&cam.id]),
        )?;
    }
    run.write(TRUTH, &formats::write_truth(&inputs.truth))?;
    run.write(CALIBRATION, &formats::write_calibration(&inputs.calibrated))?;
    run.write(
        CALIBRATION_TRANSFERRED,
        &formats::write_calibration(&inputs.transferred),
    )?;
    run.finish(
        "simulate",
        Some(spec.seed),
        &config.map(Path::to_path_buf).into_iter().collect::<Vec<_>>(),
        &spec,
    )
}

/// Camera setups from the calibration file, with point-pair overrides.
fn load_setups(cfg: &BuildConfig) -> Result<BTreeMap<String, CameraSetup>, CliError> {
    let mut setups = match &cfg.calibration {
        Some(path) => parse_file(path, formats::parse_calibration)?,
        None => BTreeMap::new(),
    };
    for (id, path) in &cfg.pairs {
        let pairs = parse_file(path, formats::parse_pairs)?;
        let content = |e: String| CliError::format(path, FormatError::Content(e));
        let homography = estimate_homography_dlt(&pairs).map_err(|e| content(e.to_string()))?;
        let roi = RegionOfInterest::from_pairs(&pairs).map_err(|e| content(e.to_string()))?;
        let model = setups.get(id).and_then(|s| s.model.clone());
        setups.insert(id.clone(), CameraSetup { model, homography, roi });
    }
    Ok(setups)
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogRecord<'a> {
    Solve {
        stage: &'a str,
        index: usize,
        report: &'a hdmap_core::optimize::SolveReport,
    },
    Summary {
        stage: &'a str,
        markings: usize,
        stats: &'a hdmap_core::mapbuild::PipelineStats,
    },
}

fn log_run(log: &mut String, stage: &str, out: &PipelineOutput) {
    for (index, report) in out.reports.iter().enumerate() {
        let rec = LogRecord::Solve { stage, index, report };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable")).unwrap();
    }
    let rec = LogRecord::Summary {
        stage,
        markings: out.map.len(),
        stats: &out.stats,
    };
    writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable")).unwrap();
}

pub fn build(
    config: &Path,
    baseline: Option<BuildBaseline>,
    cameras: Option<Cameras>,
    exec: Option<Execution>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = config::load_build(config)?;
    if let Some(b) = baseline {
        cfg.baseline = b;
    }
    if let Some(c) = cameras {
        cfg.cameras = c;
    }
    if let Some(e) = exec {
        cfg.mapping.execution = e;
    }
    cfg.validate()?;

    let poses = PoseLog::new(parse_file(&cfg.poses, formats::parse_poses)?)?;
    let mut detections = Vec::new();
    for path in &cfg.detections {
        detections.extend(parse_file(path, formats::parse_detections)?);
    }
    let all = load_setups(&cfg)?;
    let available: Vec<String> = all.keys().cloned().collect();
    let ids = CameraSelection::from(cfg.cameras).camera_ids(&available)?;
    let setups: BTreeMap<String, CameraSetup> = all.into_iter().filter(|(id, _)| ids.contains(id)).collect();
    detections.retain(|d| setups.contains_key(&d.camera_id));

    let bcfg = cfg.mapping.baseline_config();
    let start = Instant::now();
    let mut log = String::new();
    let label = match cfg.baseline {
        BuildBaseline::Naive => Baseline::Naive.label(cfg.scenario),
        BuildBaseline::Opt => "Opt",
        BuildBaseline::Oni => "ONI",
    };
    let (result, optimized) = match cfg.baseline {
        BuildBaseline::Naive => (run_naive(&detections, &poses, &setups, &bcfg)?, None),
        BuildBaseline::Opt => {
            let opt = run_opt(&detections, &poses, &setups, &bcfg)?;
            let cal = optimized_setups(&opt.map);
            (opt, Some(cal))
        }
        BuildBaseline::Oni => {
            let opt = run_opt(&detections, &poses, &setups, &bcfg)?;
            log_run(&mut log, "Opt", &opt);
            let cal = optimized_setups(&opt.map);
            (run_naive(&detections, &poses, &cal, &bcfg)?, Some(cal))
        }
    };
    log_run(&mut log, label, &result);
    info!(
        "{label}: {} markings from {} detections in {:.2?}",
        result.map.len(),
        result.stats.ingested,
        start.elapsed()
    );

    let mut run = RunDir::create(out)?;
    run.write(MAP, &formats::write_map(&result.map))?;
    if let Some(cal) = &optimized {
        run.write(CALIBRATION_OPTIMIZED, &formats::write_calibration(cal))?;
    }
    run.write(RUN_LOG, &log)?;
    let mut inputs = vec![config.to_path_buf(), cfg.poses.clone()];
    inputs.extend(cfg.detections.iter().cloned());
    inputs.extend(cfg.calibration.iter().cloned());
    inputs.extend(cfg.pairs.values().cloned());
    run.finish("build", None, &inputs, &cfg)
}

#[derive(Serialize)]
struct EvaluateSnapshot<'a> {
    map: &'a Path,
    truth: &'a Path,
    gate: f64,
    cell: f64,
}

pub fn evaluate_maps(
    map: &Path,
    truth: &Path,
    gate: f64,
    cell: f64,
    exec: Execution,
    out: &Path,
) -> Result<(), CliError> {
    for (name, v) in [("gate", gate), ("cell", cell)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::config(format!("{name} must be positive")));
        }
    }
    for p in [map, truth] {
        if !p.is_file() {
            return Err(CliError::config(format!("input file {} does not exist", p.display())));
        }
    }
    let estimate = parse_file(map, formats::parse_map)?;
    let truth_markings = parse_file(truth, formats::parse_truth)?;
    let cfg = EvaluationConfig {
        gate,
        cell,
        execution: exec,
    };
    let report = evaluate(&estimate.markings, &truth_markings, &cfg).map_err(|e| CliError::config(e.to_string()))?;
    info!("rmse {:?}, mean IoU {:?}", report.rmse, report.mean_iou);

    let mut run = RunDir::create(out)?;
    run.write(REPORT_TEXT, &report.to_text())?;
    run.write(MATCHES_CSV, &report.to_csv())?;
    run.write(TRACE_CSV, &report.trace_csv())?;
    run.write_json(REPORT_JSON, &report)?;
    let snapshot = EvaluateSnapshot { map, truth, gate, cell };
    run.finish("evaluate", None, &[map.to_path_buf(), truth.to_path_buf()], &snapshot)
}

pub fn baseline_matrix(config: Option<&Path>, exec: Option<Execution>, out: &Path) -> Result<(), CliError> {
    let mut cfg = config::load_matrix(config)?;
    if let Some(e) = exec {
        cfg.mapping.execution = e;
    }
    let bcfg = cfg.mapping.baseline_config();
    let inputs = SimulatedInputs::generate(&cfg.scene, cfg.perturbation, cfg.mapping.execution)?;
    let mut text = String::new();
    let mut matrices = Vec::new();
    for scenario in &cfg.scenarios {
        let start = Instant::now();
        let m = run_matrix(
            *scenario,
            &inputs.detections,
            &inputs.poses,
            inputs.supplied(*scenario),
            &inputs.truth,
            &bcfg,
        );
        info!("{scenario:?} matrix in {:.2?}", start.elapsed());
        writeln!(
            text,
            "# scenario: {}",
            serde_json::to_string(scenario).expect("serializable").trim_matches('"')
        )
        .unwrap();
        text.push_str(&m.to_table());
        text.push('\n');
        matrices.push(m);
    }
    let mut run = RunDir::create(out)?;
    run.write(MATRIX_TEXT, &text)?;
    run.write_json(MATRIX_JSON, &matrices)?;
    let inputs: Vec<PathBuf> = config.map(Path::to_path_buf).into_iter().collect();
    run.finish("baseline-matrix", Some(cfg.scene.seed), &inputs, &cfg)
}
