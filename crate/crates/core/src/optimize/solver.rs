//! Levenberg-Marquardt with Schur elimination of the corner blocks.

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector2, Vector6};

use super::{
    prior_rotation, prior_translation, CameraEstimate, Estimate, OptimizationProblem, OptimizeError, SolveReport,
    SolverOptions, Termination,
};
use crate::par::{map_indices, pairwise_sum};

type Matrix6 = SMatrix<f64, 6, 6>;
type Matrix2x6 = SMatrix<f64, 2, 6>;

const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub estimate: Estimate,
    pub report: SolveReport,
}

/// Normal equations in block form.
struct Linearization {
    cost: f64,
    u: Vec<Matrix2<f64>>,
    gx: Vec<Vector2<f64>>,
    v: Vec<Matrix6>,
    gc: Vec<Vector6<f64>>,
    /// Corner-camera coupling blocks, per corner.
    w: Vec<Vec<(usize, Matrix2x6)>>,
}

struct Step {
    dc: Vec<Vector6<f64>>,
    dx: Vec<Vector2<f64>>,
    predicted: f64,
}

/// Half the Huber cost of a whitened residual and the square root of its
/// reweighting factor.
fn robust(r: &Vector2<f64>, delta: Option<f64>) -> (f64, f64) {
    let s = r.norm_squared();
    match delta {
        Some(d) if s > d * d => {
            let n = s.sqrt();
            (0.5 * (2.0 * d * n - d * d), (d / n).sqrt())
        }
        _ => (0.5 * s, 1.0),
    }
}

fn whitened_delta(opts: &SolverOptions) -> Option<f64> {
    opts.huber_delta.map(|d| d / opts.sigma_pixel)
}

fn prior_cost(problem: &OptimizationProblem, est: &Estimate) -> f64 {
    let mut cost = 0.0;
    for (c, cam) in problem.cameras.iter().enumerate() {
        cost += 0.5 * prior_translation(cam, &est.extrinsics[c]).0.norm_squared();
        if let Some((r, _)) = prior_rotation(cam, &est.extrinsics[c]) {
            cost += 0.5 * r.norm_squared();
        }
    }
    cost
}

/// Total cost `0.5 * sum(rho(r^2))`.
fn evaluate_cost(problem: &OptimizationProblem, est: &Estimate, opts: &SolverOptions) -> Result<f64, OptimizeError> {
    let delta = whitened_delta(opts);
    let costs = map_indices(opts.execution, problem.terms.len(), |i| {
        let term = &problem.terms[i];
        problem
            .linearize_term(i, term, est, opts.sigma_pixel)
            .map(|(r, _, _)| robust(&r, delta).0)
    });
    let costs: Result<Vec<f64>, _> = costs.into_iter().collect();
    Ok(pairwise_sum(&costs?) + prior_cost(problem, est))
}

fn linearize(
    problem: &OptimizationProblem,
    est: &Estimate,
    opts: &SolverOptions,
) -> Result<Linearization, OptimizeError> {
    let delta = whitened_delta(opts);
    let blocks = map_indices(opts.execution, problem.terms.len(), |i| {
        let term = &problem.terms[i];
        let (r, jx, jc) = problem.linearize_term(i, term, est, opts.sigma_pixel)?;
        let (cost, sw) = robust(&r, delta);
        let finite = cost.is_finite() && jx.iter().chain(jc.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(OptimizeError::NumericalFailure {
                term: i,
                reason: "non-finite cost or Jacobian".into(),
            });
        }
        Ok((cost, r * sw, jx * sw, jc * sw))
    });

    let nk = problem.corners.len();
    let nc = problem.cameras.len();
    let mut lin = Linearization {
        cost: 0.0,
        u: vec![Matrix2::zeros(); nk],
        gx: vec![Vector2::zeros(); nk],
        v: vec![Matrix6::zeros(); nc],
        gc: vec![Vector6::zeros(); nc],
        w: vec![Vec::new(); nk],
    };
    let mut costs = Vec::with_capacity(blocks.len());
    for (term, block) in problem.terms.iter().zip(blocks) {
        let (cost, r, jx, jc) = block?;
        costs.push(cost);
        let (k, c) = (term.corner, term.camera);
        lin.u[k] += jx.transpose() * jx;
        lin.gx[k] += jx.transpose() * r;
        lin.v[c] += jc.transpose() * jc;
        lin.gc[c] += jc.transpose() * r;
        let coupling = jx.transpose() * jc;
        match lin.w[k].iter_mut().find(|(cc, _)| *cc == c) {
            Some((_, m)) => *m += coupling,
            None => lin.w[k].push((c, coupling)),
        }
    }
    for (c, cam) in problem.cameras.iter().enumerate() {
        let (r, j) = prior_translation(cam, &est.extrinsics[c]);
        lin.v[c] += j.transpose() * j;
        lin.gc[c] += j.transpose() * r;
        if let Some((r, j)) = prior_rotation(cam, &est.extrinsics[c]) {
            lin.v[c] += j.transpose() * j;
            lin.gc[c] += j.transpose() * r;
        }
    }
    lin.cost = pairwise_sum(&costs) + prior_cost(problem, est);
    Ok(lin)
}

fn gradient_max_norm(lin: &Linearization) -> f64 {
    let a = lin.gx.iter().map(|g| g.amax()).fold(0.0, f64::max);
    let b = lin.gc.iter().map(|g| g.amax()).fold(0.0, f64::max);
    a.max(b)
}

fn clamp_diag(x: f64) -> f64 {
    x.clamp(DIAG_MIN, DIAG_MAX)
}

/// Solves the damped normal equations through the reduced camera system.
fn damped_step(lin: &Linearization, lambda: f64) -> Option<Step> {
    let nc = lin.v.len();
    let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
    let mut b = DVector::<f64>::zeros(6 * nc);
    let mut dv = Vec::with_capacity(nc);
    for c in 0..nc {
        let mut v = lin.v[c];
        let d = Vector6::from_fn(|i, _| clamp_diag(lin.v[c][(i, i)]));
        for i in 0..6 {
            v[(i, i)] += lambda * d[i];
        }
        dv.push(d);
        s.view_mut((6 * c, 6 * c), (6, 6)).copy_from(&v);
        b.rows_mut(6 * c, 6).copy_from(&(-lin.gc[c]));
    }

    let mut u_inv = Vec::with_capacity(lin.u.len());
    let mut du = Vec::with_capacity(lin.u.len());
    for (k, u) in lin.u.iter().enumerate() {
        let d = Vector2::new(clamp_diag(u[(0, 0)]), clamp_diag(u[(1, 1)]));
        let mut damped = *u;
        damped[(0, 0)] += lambda * d.x;
        damped[(1, 1)] += lambda * d.y;
        let inv = damped.try_inverse()?;
        for (c, w) in &lin.w[k] {
            let t = w.transpose() * inv;
            let mut rows = b.rows_mut(6 * c, 6);
            rows += t * lin.gx[k];
            for (c2, w2) in &lin.w[k] {
                let mut blk = s.view_mut((6 * c, 6 * c2), (6, 6));
                blk -= t * w2;
            }
        }
        u_inv.push(inv);
        du.push(d);
    }

    let chol = s.cholesky()?;
    let dc_flat = chol.solve(&b);
    let dc: Vec<Vector6<f64>> = (0..nc)
        .map(|c| Vector6::from_iterator(dc_flat.rows(6 * c, 6).iter().copied()))
        .collect();

    let mut dx = Vec::with_capacity(lin.u.len());
    for (k, inv) in u_inv.iter().enumerate() {
        let mut rhs = -lin.gx[k];
        for (c, w) in &lin.w[k] {
            rhs -= w * dc[*c];
        }
        dx.push(inv * rhs);
    }

    // Model decrease 0.5 * d^T (lambda D d - g).
    let mut predicted = 0.0;
    for (k, d) in dx.iter().enumerate() {
        predicted += d.dot(&(lambda * du[k].component_mul(d) - lin.gx[k]));
    }
    for (c, d) in dc.iter().enumerate() {
        predicted += d.dot(&(lambda * dv[c].component_mul(d) - lin.gc[c]));
    }
    Some(Step {
        dc,
        dx,
        predicted: 0.5 * predicted,
    })
}

fn apply_step(est: &Estimate, step: &Step) -> Estimate {
    Estimate {
        extrinsics: est.extrinsics.iter().zip(&step.dc).map(|(e, d)| e.retract(d)).collect(),
        corners: est
            .corners
            .iter()
            .zip(&step.dx)
            .map(|(p, d)| [p[0] + d.x, p[1] + d.y])
            .collect(),
    }
}

fn step_is_negligible(est: &Estimate, step: &Step) -> bool {
    let mut x2 = 0.0;
    let mut d2 = 0.0;
    for (e, d) in est.extrinsics.iter().zip(&step.dc) {
        x2 += e.translation.norm_squared();
        d2 += d.norm_squared();
    }
    for (p, d) in est.corners.iter().zip(&step.dx) {
        x2 += p[0] * p[0] + p[1] * p[1];
        d2 += d.norm_squared();
    }
    d2.sqrt() <= 1e-12 * (x2.sqrt() + 1e-12)
}

/// Minimizes the problem's cost starting from its stored parameter values.
pub fn solve(problem: &OptimizationProblem, opts: &SolverOptions) -> Result<Solution, OptimizeError> {
    opts.validate()?;
    if problem.terms.is_empty() {
        return Err(OptimizeError::EmptyProblem);
    }
    let mut est = problem.initial_estimate();
    let mut lin = linearize(problem, &est, opts)?;
    let initial_cost = lin.cost;
    let mut trace = vec![initial_cost];
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut accepted = 0;

    let termination = loop {
        if gradient_max_norm(&lin) < opts.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let Some(step) = damped_step(&lin, lambda) else {
            lambda *= 10.0;
            if lambda > opts.max_damping {
                return Err(OptimizeError::NoProgress {
                    iterations,
                    damping: lambda,
                });
            }
            continue;
        };
        if step_is_negligible(&est, &step) {
            break Termination::SmallStep;
        }
        let candidate = apply_step(&est, &step);
        let new_cost = evaluate_cost(problem, &candidate, opts).ok();
        match new_cost {
            Some(new_cost) if new_cost < lin.cost => {
                let relative = (lin.cost - new_cost) / lin.cost;
                est = candidate;
                lin = linearize(problem, &est, opts)?;
                trace.push(lin.cost);
                accepted += 1;
                lambda = (lambda * 0.5).max(1e-15);
                debug!("iteration {iterations}: cost {:.6e} (lambda {lambda:.1e})", lin.cost);
                if relative < opts.cost_tolerance {
                    break Termination::CostTolerance;
                }
            }
            _ => {
                // The model cannot promise a meaningful decrease: converged.
                if step.predicted <= opts.cost_tolerance * lin.cost {
                    break Termination::CostTolerance;
                }
                lambda *= 10.0;
                if lambda > opts.max_damping {
                    return Err(OptimizeError::NoProgress {
                        iterations,
                        damping: lambda,
                    });
                }
            }
        }
    };

    let cameras = problem
        .cameras
        .iter()
        .zip(&est.extrinsics)
        .map(|(cam, e)| {
            let q = e.quaternion();
            CameraEstimate {
                id: cam.id.clone(),
                rotation: [q.w, q.i, q.j, q.k],
                translation: [e.translation.x, e.translation.y, e.translation.z],
            }
        })
        .collect();
    let report = SolveReport {
        iterations,
        accepted_steps: accepted,
        initial_cost,
        final_cost: lin.cost,
        termination,
        cost_trace: trace,
        final_damping: lambda,
        residual_count: problem.residual_count(),
        parameter_count: problem.parameter_count(),
        cameras,
    };
    Ok(Solution { estimate: est, report })
}
