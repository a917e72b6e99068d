//! Acceptance checks on the reference scene and randomized property suites.
//!
//! Runs without the libtest harness and prints one PASS/FAIL line per
//! criterion. The process fails when the set of failing criteria differs
//! from `EXPECTED_FAILURES`, in either direction.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hdmap_core::association::{match_corners, normalize_winding, CornerPermutation, MarkingId, QuadTree, Rect};
use hdmap_core::baselines::{
    optimized_setups, run_opt, run_setup, BaselineConfig, BaselineOutcome, CameraSelection, SimulatedInputs,
};
use hdmap_core::geometry::{project, so3_exp, so3_log};
use hdmap_core::ipm::{estimate_homography_dlt, PointPair};
use hdmap_core::metrics::{evaluate, evaluate_iou, evaluate_rmse, map_markings, MarkingCorners, DEFAULT_CELL};
use hdmap_core::optimize::{
    solve, CameraBlock, CornerBlock, OptimizationProblem, PriorConfig, ReprojectionTerm, SolverOptions,
};
use hdmap_core::par::Execution;
use hdmap_core::simulate::{diamond, PerturbationSpec, SceneSpec};
use hdmap_core::{CameraModel, GroundPoint, Intrinsics, MapPoint, PixelPoint, RigidTransform};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Criteria that fail on this implementation for reasons recorded with
/// the build decisions. Each still runs and prints its numbers.
const EXPECTED_FAILURES: &[u32] = &[5, 6, 7];

const SETUPS: [CameraSelection; 3] = CameraSelection::ALL;

struct Verdict {
    id: u32,
    name: &'static str,
    ok: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

impl Verdict {
    fn pass(&self) -> bool {
        self.ok && self.elapsed <= self.budget
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- criterion 1

fn random_camera(r: &mut ChaCha8Rng) -> CameraModel {
    let k = Intrinsics::new(
        r.random_range(500.0..1200.0),
        r.random_range(500.0..1200.0),
        r.random_range(560.0..720.0),
        r.random_range(300.0..420.0),
    )
    .unwrap();
    let yaw = if r.random_bool(0.5) { 0.0 } else { std::f64::consts::PI } + r.random_range(-0.1..0.1);
    let position = Vector3::new(
        r.random_range(-2.0..2.0),
        r.random_range(-0.5..0.5),
        r.random_range(1.2..2.2),
    );
    let mut ext = CameraModel::mounted(position, yaw, r.random_range(10f64..40.0).to_radians());
    let wobble = Vector3::new(
        r.random_range(-0.03..0.03),
        r.random_range(-0.03..0.03),
        r.random_range(-0.03..0.03),
    );
    ext = ext.retract(&SMatrix::<f64, 6, 1>::new(wobble.x, wobble.y, wobble.z, 0.0, 0.0, 0.0));
    CameraModel::new("cam", k, ext, 1280, 720)
}

/// A small problem with noisy observations and a random evaluation point.
fn random_problem(r: &mut ChaCha8Rng) -> Option<(OptimizationProblem, hdmap_core::optimize::Estimate)> {
    let camera = random_camera(r);
    let ahead = camera.extrinsic.inverse().rotation * Vector3::z();
    let center = camera.center_in_vehicle();
    let mut corners = Vec::new();
    for m in 0..2 {
        let d = r.random_range(3.0..8.0);
        let c = [
            center.x + ahead.x * d + r.random_range(-1.5..1.5),
            center.y + ahead.y * d + r.random_range(-1.5..1.5),
        ];
        for (k, p) in diamond(c, r.random_range(0.2..0.6), r.random_range(0.2..0.6))
            .iter()
            .enumerate()
        {
            corners.push(CornerBlock {
                marking: MarkingId(m),
                corner: k,
                position: [p.x, p.y],
            });
        }
    }
    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut terms = Vec::new();
    for f in 0..3 {
        let pose = RigidTransform::planar(
            r.random_range(-0.5..0.5),
            r.random_range(-0.3..0.3),
            r.random_range(-0.05..0.05),
        );
        for (i, c) in corners.iter().enumerate() {
            if let Ok(px) = project(&MapPoint::ground(c.position[0], c.position[1]), &pose, &camera) {
                terms.push(ReprojectionTerm {
                    corner: i,
                    camera: 0,
                    frame: f,
                    pose,
                    observed: PixelPoint::new(px.u + noise.sample(r), px.v + noise.sample(r)),
                });
            }
        }
    }
    if terms.is_empty() {
        return None;
    }
    let mut prior = PriorConfig::from_calibration(&camera.extrinsic);
    prior.sigma_translation = r.random_range(0.02..0.2);
    if r.random_bool(0.5) {
        prior.sigma_rotation = Some(r.random_range(0.01..0.1));
    }
    prior.position += Vector3::new(
        r.random_range(-0.1..0.1),
        r.random_range(-0.1..0.1),
        r.random_range(-0.1..0.1),
    );
    let problem = OptimizationProblem {
        cameras: vec![CameraBlock {
            id: "cam".into(),
            model: camera,
            prior,
        }],
        corners,
        terms,
    };
    let mut estimate = problem.initial_estimate();
    let d = SMatrix::<f64, 6, 1>::from_fn(|i, _| {
        if i < 3 {
            r.random_range(-0.01..0.01)
        } else {
            r.random_range(-0.05..0.05)
        }
    });
    estimate.extrinsics[0] = estimate.extrinsics[0].retract(&d);
    for c in &mut estimate.corners {
        c[0] += r.random_range(-0.05..0.05);
        c[1] += r.random_range(-0.05..0.05);
    }
    Some((problem, estimate))
}

fn jacobian_check() -> (bool, String) {
    let mut r = rng(1);
    let h = 1e-6;
    let (mut configs, mut worst) = (0, 0.0f64);
    while configs < 1000 {
        let Some((problem, est)) = random_problem(&mut r) else {
            continue;
        };
        let sigma = r.random_range(0.5..2.0);
        let Ok(j) = problem.jacobian_dense(&est, sigma) else {
            continue;
        };
        let n = problem.parameter_count();
        let mut fd = DMatrix::zeros(j.nrows(), n);
        let eval = |col: usize, step: f64| -> Option<DVector<f64>> {
            let mut e = est.clone();
            if col < 6 {
                let mut d = SMatrix::<f64, 6, 1>::zeros();
                d[col] = step;
                e.extrinsics[0] = e.extrinsics[0].retract(&d);
            } else {
                e.corners[(col - 6) / 2][(col - 6) % 2] += step;
            }
            problem.residuals(&e, sigma).ok().map(DVector::from_vec)
        };
        let mut usable = true;
        for col in 0..n {
            match (eval(col, h), eval(col, -h)) {
                (Some(a), Some(b)) => fd.set_column(col, &((a - b) / (2.0 * h))),
                _ => usable = false,
            }
        }
        if !usable {
            continue;
        }
        worst = worst.max((&j - &fd).amax() / j.amax());
        configs += 1;
    }
    (
        worst <= 1e-5,
        format!("{configs} configurations, worst relative deviation {worst:.2e} (limit 1e-5)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn normalized(m: &Matrix3<f64>) -> Matrix3<f64> {
    let n = m / m.norm();
    // Fix the overall sign by the largest-magnitude entry.
    let k = n.iamax_full();
    if n[k] < 0.0 {
        -n
    } else {
        n
    }
}

fn dlt_check() -> (bool, String) {
    let mut r = rng(2);
    let pixel_scale = Matrix3::new(1.0 / 640.0, 0.0, -1.0, 0.0, 1.0 / 360.0, -1.0, 0.0, 0.0, 1.0);
    let mut worst = 0.0f64;
    let mut trials = 0;
    while trials < 1000 {
        let a = Matrix3::from_fn(|i, j| f64::from(u8::from(i == j)) + r.random_range(-0.3..0.3));
        let h = Matrix3::new(10.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 1.0) * a * pixel_scale;
        let mut pairs = Vec::new();
        for _ in 0..10 {
            let p = Vector3::new(r.random_range(0.0..1280.0), r.random_range(0.0..720.0), 1.0);
            let g = h * p;
            if g.z.abs() < 0.1 {
                break;
            }
            pairs.push(PointPair::new(
                PixelPoint::new(p.x, p.y),
                GroundPoint::new(g.x / g.z, g.y / g.z),
            ));
        }
        if pairs.len() < 10 {
            continue;
        }
        let est = estimate_homography_dlt(&pairs).expect("ten generic pairs");
        let (e, t) = (normalized(est.matrix()), normalized(&h));
        worst = worst.max((e - t).norm() / t.norm());
        trials += 1;
    }
    (
        worst <= 1e-9,
        format!("{trials} trials, worst relative Frobenius error {worst:.2e} (limit 1e-9)"),
    )
}

// ------------------------------------------------------- criteria 3 to 7, 9

fn traces_monotone(reports: &[hdmap_core::optimize::SolveReport]) -> bool {
    reports.iter().all(|r| r.cost_trace.windows(2).all(|w| w[1] <= w[0]))
}

struct SetupRuns {
    selection: CameraSelection,
    naive: BaselineOutcome,
    opt: BaselineOutcome,
    oni: BaselineOutcome,
}

fn run_all_setups(inputs: &SimulatedInputs, transferred: bool, cfg: &BaselineConfig) -> Vec<SetupRuns> {
    let supplied = if transferred {
        &inputs.transferred
    } else {
        &inputs.calibrated
    };
    SETUPS
        .iter()
        .map(|&selection| {
            let mut out = run_setup(
                &inputs.detections,
                &inputs.poses,
                supplied,
                selection,
                &inputs.truth,
                cfg,
            )
            .expect("reference rig has both cameras")
            .into_iter()
            .map(|r| r.expect("baseline run succeeds"));
            SetupRuns {
                selection,
                naive: out.next().unwrap(),
                opt: out.next().unwrap(),
                oni: out.next().unwrap(),
            }
        })
        .collect()
}

fn rmse(o: &BaselineOutcome) -> f64 {
    o.evaluation.rmse.unwrap_or(f64::INFINITY)
}

fn iou(o: &BaselineOutcome) -> f64 {
    o.evaluation.mean_iou.unwrap_or(0.0)
}

fn noiseless_identity(cfg: &BaselineConfig) -> (bool, String, Vec<hdmap_core::optimize::SolveReport>) {
    let inputs = SimulatedInputs::generate(&SceneSpec::reference().noiseless(), None, Execution::Parallel).unwrap();
    let opt = run_opt(&inputs.detections, &inputs.poses, &inputs.transferred, cfg).unwrap();
    let estimate = map_markings(&opt.map);
    let report = evaluate_rmse(&estimate, &inputs.truth, cfg.evaluation.gate);
    let worst_corner = report.corner_errors().into_iter().fold(0.0, f64::max);
    let all_found = report.matches.len() == inputs.truth.len() && estimate.len() == inputs.truth.len();
    let solved = optimized_setups(&opt.map);
    let mut worst_rot = 0.0f64;
    for (id, setup) in &solved {
        let est = setup.model.as_ref().unwrap().extrinsic.rotation;
        let truth = inputs.scene.truth.camera(id).unwrap().extrinsic.rotation;
        worst_rot = worst_rot.max(so3_log(&(est * truth.inverse())).norm());
    }
    let ok = all_found && worst_corner <= 1e-3 && worst_rot <= 1e-4;
    let detail = format!(
        "{}/{} markings, worst corner {worst_corner:.2e} m (limit 1e-3), worst rotation {worst_rot:.2e} rad (limit 1e-4)",
        report.matches.len(),
        inputs.truth.len()
    );
    (ok, detail, opt.reports)
}

fn table(runs: &[SetupRuns], f: impl Fn(&SetupRuns) -> String) -> String {
    runs.iter()
        .map(|r| format!("{}: {}", r.selection.label(), f(r)))
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------- criterion 8

fn quadtree_check(r: &mut ChaCha8Rng) -> (bool, String) {
    let mut tree = QuadTree::with_params(Rect::new([-20.0, -20.0], [20.0, 20.0]), 4, 10);
    let mut brute: Vec<([f64; 2], MarkingId)> = Vec::new();
    let mut next = 0u32;
    let mut mismatches = 0;
    let mut queries = 0;
    let point = |r: &mut ChaCha8Rng| {
        // Occasionally outside the initial bounds to exercise growth.
        let span = if r.random_bool(0.05) { 60.0 } else { 20.0 };
        [r.random_range(-span..span), r.random_range(-span..span)]
    };
    for _ in 0..10_000 {
        match r.random_range(0..10) {
            0..=3 => {
                let p = point(r);
                tree.insert(p, MarkingId(next));
                brute.push((p, MarkingId(next)));
                next += 1;
            }
            4 if !brute.is_empty() => {
                let (p, id) = brute.swap_remove(r.random_range(0..brute.len()));
                mismatches += usize::from(!tree.remove(p, id));
            }
            5 if !brute.is_empty() => {
                let i = r.random_range(0..brute.len());
                let q = point(r);
                let (p, id) = brute[i];
                mismatches += usize::from(!tree.relocate(p, q, id));
                brute[i].0 = q;
            }
            _ => {
                let c = point(r);
                let radius = r.random_range(0.0..8.0);
                let mut want: Vec<(u32, f64)> = brute
                    .iter()
                    .filter_map(|(p, id)| {
                        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                        (d <= radius).then_some((id.0, d))
                    })
                    .collect();
                want.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let got: Vec<(u32, f64)> = tree
                    .query_radius(c, radius)
                    .into_iter()
                    .map(|(it, d)| (it.id.0, d))
                    .collect();
                let ids = |v: &[(u32, f64)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
                mismatches += usize::from(ids(&got) != ids(&want));
                queries += 1;
            }
        }
    }
    mismatches += usize::from(tree.len() != brute.len());
    mismatches += usize::from(tree.check_invariants().is_err());
    (
        mismatches == 0,
        format!("10000 operations ({queries} queries), {mismatches} disagreements"),
    )
}

fn all_permutations() -> Vec<CornerPermutation> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    p.iter().for_each(|&i| seen[i] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn corner_match_check(r: &mut ChaCha8Rng) -> (bool, String) {
    let perms = all_permutations();
    assert_eq!(perms.len(), 24);
    let dist = |a: &MapPoint, b: &MapPoint| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let (mut trials, mut agree) = (0, 0);
    while trials < 1000 {
        let truth = diamond(
            [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)],
            r.random_range(0.3..0.8),
            r.random_range(0.3..0.8),
        );
        let sigma = r.random_range(0.02..0.2);
        let noise = Normal::new(0.0, sigma).unwrap();
        let shift = r.random_range(0..4);
        let raw: [MapPoint; 4] = std::array::from_fn(|i| {
            let t = truth[(i + shift) % 4];
            MapPoint::ground(t.x + noise.sample(r), t.y + noise.sample(r))
        });
        if !hdmap_core::association::is_simple_quad(&raw) {
            continue;
        }
        let det = normalize_winding(&raw).map(|k| raw[k]);
        let map = normalize_winding(&truth).map(|k| truth[k]);
        let fast = match_corners(&det, &map).total_distance;
        let best = perms
            .iter()
            .map(|p| (0..4).map(|i| dist(&det[i], &map[p[i]])).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        agree += usize::from(fast <= best + 1e-12);
        trials += 1;
    }
    let share = agree as f64 / trials as f64;
    (
        share >= 0.99,
        format!(
            "corner matching optimal in {agree}/{trials} noisy trials ({:.1}%, limit 99%)",
            100.0 * share
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

/// Two markings seen by one camera; solves the same problem at two noise
/// scales with every standard deviation multiplied by the same factor.
fn sigma_coscaling() -> (bool, String) {
    let k = Intrinsics::new(800.0, 800.0, 640.0, 360.0).unwrap();
    let truth = CameraModel::new(
        "front",
        k,
        CameraModel::mounted(Vector3::new(1.5, 0.0, 1.6), 0.0, 26f64.to_radians()),
        1280,
        720,
    );
    let mut r = rng(9);
    let noise = Normal::new(0.0, 0.7).unwrap();
    let truth_corners: Vec<MapPoint> = [[5.0, -0.8], [6.5, 0.9]]
        .iter()
        .flat_map(|c| diamond(*c, 0.5, 0.5))
        .collect();
    let corners: Vec<CornerBlock> = truth_corners
        .iter()
        .enumerate()
        .map(|(i, p)| CornerBlock {
            marking: MarkingId(i as u32 / 4),
            corner: i % 4,
            position: [p.x + r.random_range(-0.05..0.05), p.y + r.random_range(-0.05..0.05)],
        })
        .collect();
    let mut terms = Vec::new();
    for f in 0..15 {
        let pose = RigidTransform::planar(-2.5 + 0.25 * f as f64, 0.2 * (f as f64).sin(), 0.01 * f as f64);
        for (i, c) in truth_corners.iter().enumerate() {
            let px = project(c, &pose, &truth).unwrap();
            terms.push(ReprojectionTerm {
                corner: i,
                camera: 0,
                frame: f,
                pose,
                observed: PixelPoint::new(px.u + noise.sample(&mut r), px.v + noise.sample(&mut r)),
            });
        }
    }
    let mut start = truth.clone();
    start.extrinsic = RigidTransform::new(
        so3_exp(&Vector3::new(0.01, -0.02, 0.015)) * truth.extrinsic.rotation,
        truth.extrinsic.translation + Vector3::new(0.03, -0.02, 0.04),
    );
    let solve_scaled = |s: f64| {
        let mut prior = PriorConfig::from_calibration(&start.extrinsic);
        prior.sigma_translation = 0.05 * s;
        prior.sigma_rotation = Some(0.02 * s);
        let problem = OptimizationProblem {
            cameras: vec![CameraBlock {
                id: "front".into(),
                model: start.clone(),
                prior,
            }],
            corners: corners.clone(),
            terms: terms.clone(),
        };
        let opts = SolverOptions {
            sigma_pixel: s,
            ..SolverOptions::default()
        };
        solve(&problem, &opts).unwrap()
    };
    let (a, b) = (solve_scaled(1.0), solve_scaled(3.0));
    let corner_diff = a
        .estimate
        .corners
        .iter()
        .zip(&b.estimate.corners)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max);
    let (ea, eb) = (&a.estimate.extrinsics[0], &b.estimate.extrinsics[0]);
    let rot_diff = so3_log(&(ea.rotation * eb.rotation.inverse())).norm();
    let trans_diff = (ea.translation - eb.translation).amax();
    let ok = corner_diff <= 1e-6 && rot_diff <= 1e-8 && trans_diff <= 1e-6 && traces_monotone(&[a.report, b.report]);
    (
        ok,
        format!(
            "sigma x3 moves corners {corner_diff:.1e} m, rotation {rot_diff:.1e} rad, translation {trans_diff:.1e} m"
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn inside_convex(poly: &[MapPoint; 4], x: f64, y: f64) -> bool {
    // Corners are counter-clockwise after winding normalization.
    (0..4).all(|i| {
        let (a, b) = (&poly[i], &poly[(i + 1) % 4]);
        (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) > 0.0
    })
}

fn brute_iou(a: &[MapPoint; 4], b: &[MapPoint; 4], cell: f64) -> f64 {
    let (mut both, mut either) = (0u64, 0u64);
    for j in -200..200 {
        for i in -200..200 {
            let (x, y) = ((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
            let (ia, ib) = (inside_convex(a, x, y), inside_convex(b, x, y));
            both += u64::from(ia && ib);
            either += u64::from(ia || ib);
        }
    }
    both as f64 / either as f64
}

fn metrics_oracle(existing: &[(Vec<MarkingCorners>, &[MarkingCorners])]) -> (bool, String) {
    let mut r = rng(10);
    let mut iou_mismatch = 0;
    for _ in 0..100 {
        let c = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        let a = diamond(c, r.random_range(0.2..1.0), r.random_range(0.2..1.0));
        let b = diamond(
            [c[0] + r.random_range(-1.0..1.0), c[1] + r.random_range(-1.0..1.0)],
            r.random_range(0.2..1.0),
            r.random_range(0.2..1.0),
        );
        let (a, b) = (normalize_winding(&a).map(|k| a[k]), normalize_winding(&b).map(|k| b[k]));
        let fast = evaluate_iou(&a, &b, DEFAULT_CELL).unwrap();
        iou_mismatch += usize::from(fast != brute_iou(&a, &b, DEFAULT_CELL));
    }

    // RMSE from the matched pairs, each pair's corners assigned by the best
    // of all 24 permutations.
    let perms = all_permutations();
    let mut worst = 0.0f64;
    for (estimate, truth) in existing {
        let report = evaluate_rmse(estimate, truth, 2.0);
        let by_id = |set: &[MarkingCorners], id: MarkingId| set.iter().find(|(i, _)| *i == id).unwrap().1;
        let mut sum = 0.0;
        for m in &report.matches {
            let (e, t) = (by_id(estimate, m.estimate), by_id(truth, m.truth));
            sum += perms
                .iter()
                .map(|p| {
                    (0..4)
                        .map(|i| (e[i].x - t[p[i]].x).powi(2) + (e[i].y - t[p[i]].y).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
        }
        let recomputed = (sum / (4 * report.matches.len()) as f64).sqrt();
        worst = worst.max((recomputed - report.rmse.unwrap()).abs());
    }
    (
        iou_mismatch == 0 && worst <= 1e-12,
        format!(
            "IoU differs from the cell scan on {iou_mismatch}/100 pairs; RMSE recomputation off by {worst:.1e} on {} maps (limit 1e-12)",
            existing.len()
        ),
    )
}

// ---------------------------------------------------------------------- main

fn main() -> ExitCode {
    let cfg = BaselineConfig::default();
    let mut verdicts = Vec::new();
    let mut push = |id, name, (ok, detail): (bool, String), elapsed, budget_s: u64| {
        verdicts.push(Verdict {
            id,
            name,
            ok,
            detail,
            elapsed,
            budget: Duration::from_secs(budget_s),
        })
    };

    let (res, t) = timed(jacobian_check);
    push(1, "Jacobian vs central differences", res, t, 5);

    let (res, t) = timed(dlt_check);
    push(2, "DLT exact recovery", res, t, 5);

    let ((ok3, detail3, reports3), t) = timed(|| noiseless_identity(&cfg));
    push(3, "Noiseless end-to-end identity", (ok3, detail3), t, 60);

    let reference = SceneSpec::reference();
    let two_degrees = PerturbationSpec {
        rotation_deg: 2.0,
        translation: 0.10,
    };
    let (runs4, t4) = timed(|| {
        let inputs = SimulatedInputs::generate(&reference, Some(two_degrees), Execution::Parallel).unwrap();
        let runs = run_all_setups(&inputs, true, &cfg);
        (inputs, runs)
    });
    let (inputs4, runs4) = runs4;
    let ok4 = runs4
        .iter()
        .all(|s| rmse(&s.opt) <= 0.05 && rmse(&s.naive) >= 3.0 * rmse(&s.opt));
    let d4 = table(&runs4, |s| {
        format!(
            "Opt {:.4} m, ENI {:.4} m, ratio {:.1}",
            rmse(&s.opt),
            rmse(&s.naive),
            rmse(&s.naive) / rmse(&s.opt)
        )
    });
    push(
        4,
        "Perturbation recovery (Opt <= 0.05 m, ENI >= 3x Opt)",
        (ok4, d4),
        t4,
        300,
    );

    let ok5 = runs4
        .iter()
        .all(|s| (rmse(&s.oni) - rmse(&s.opt)).abs() <= 0.10 * rmse(&s.opt));
    let d5 = table(&runs4, |s| {
        format!(
            "ONI {:.4} vs Opt {:.4} ({:+.0}%)",
            rmse(&s.oni),
            rmse(&s.opt),
            100.0 * (rmse(&s.oni) / rmse(&s.opt) - 1.0)
        )
    });
    push(5, "ONI within 10% of Opt", (ok5, d5), t4, 300);

    let (runs6, t6) = timed(|| {
        let inputs = SimulatedInputs::generate(&reference, None, Execution::Parallel).unwrap();
        let runs = run_all_setups(&inputs, false, &cfg);
        let transferred = run_all_setups(&inputs, true, &cfg);
        (inputs, runs, transferred)
    });
    let (inputs_ref, runs6, runs7) = runs6;
    let ok6 = runs6
        .iter()
        .all(|s| (rmse(&s.naive) - rmse(&s.opt)).abs() <= 0.25 * rmse(&s.opt));
    let d6 = table(&runs6, |s| {
        format!(
            "CNI {:.4} vs Opt {:.4} ({:+.0}%)",
            rmse(&s.naive),
            rmse(&s.opt),
            100.0 * (rmse(&s.naive) / rmse(&s.opt) - 1.0)
        )
    });
    push(6, "CNI within 25% of Opt", (ok6, d6), t6, 300);

    // Re-scores the existing transferred-scenario maps of the reference scene.
    let (scores, t7) = timed(|| {
        runs7
            .iter()
            .map(|s| {
                let score = |o: &BaselineOutcome| {
                    evaluate(&map_markings(&o.map), &inputs_ref.truth, &cfg.evaluation)
                        .unwrap()
                        .mean_iou
                        .unwrap_or(0.0)
                };
                (s.selection, score(&s.opt), score(&s.oni), score(&s.naive))
            })
            .collect::<Vec<_>>()
    });
    let ok7 = scores
        .iter()
        .all(|&(_, opt, oni, eni)| opt >= 0.60 && oni >= 0.60 && eni <= 0.35)
        && runs7.iter().zip(&scores).all(|(s, sc)| sc.1 == iou(&s.opt));
    let d7 = scores
        .iter()
        .map(|(sel, opt, oni, eni)| format!("{}: Opt {opt:.3}, ONI {oni:.3}, ENI {eni:.3}", sel.label()))
        .collect::<Vec<_>>()
        .join("; ");
    push(7, "IoU pattern (Opt/ONI >= 0.60, ENI <= 0.35)", (ok7, d7), t7, 60);

    let ((q, m), t8) = timed(|| {
        let mut r = rng(8);
        (quadtree_check(&mut r), corner_match_check(&mut r))
    });
    push(
        8,
        "Association soundness",
        (q.0 && m.0, format!("{}; {}", q.1, m.1)),
        t8,
        30,
    );

    let ((co_ok, co_detail), t9) = timed(sigma_coscaling);
    let mut reports: Vec<_> = reports3;
    for s in runs4.iter().chain(&runs6) {
        for o in [&s.opt, &s.oni, &s.naive] {
            reports.extend(o.reports.iter().cloned());
        }
    }
    let monotone = traces_monotone(&reports);
    let d9 = format!(
        "{} solver runs from criteria 3 to 6 {}; {co_detail}",
        reports.len(),
        if monotone { "non-increasing" } else { "NOT monotone" }
    );
    push(9, "Optimizer contract", (monotone && co_ok, d9), t9, 60);

    let existing: Vec<(Vec<MarkingCorners>, &[MarkingCorners])> = runs4
        .iter()
        .flat_map(|s| [&s.opt, &s.oni, &s.naive])
        .map(|o| (map_markings(&o.map), inputs4.truth.as_slice()))
        .collect();
    let (res, t10) = timed(|| metrics_oracle(&existing));
    push(10, "Metrics oracle", res, t10, 10);

    println!();
    let mut failing = Vec::new();
    for v in &verdicts {
        let status = if v.pass() { "PASS" } else { "FAIL" };
        let over = if v.elapsed > v.budget {
            " [over time budget]"
        } else {
            ""
        };
        println!(
            "criterion {:>2} {status}  {}  ({:.2?} of {:?}){over}\n               {}",
            v.id, v.name, v.elapsed, v.budget, v.detail
        );
        if !v.pass() {
            failing.push(v.id);
        }
    }
    let passed = verdicts.len() - failing.len();
    println!(
        "\n{passed}/{} criteria pass; failing: {failing:?}; expected failing: {EXPECTED_FAILURES:?}",
        verdicts.len()
    );
    if failing == EXPECTED_FAILURES {
        ExitCode::SUCCESS
    } else {
        println!("the failing set differs from the expected one");
        ExitCode::FAILURE
    }
}
