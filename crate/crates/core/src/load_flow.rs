//! Load-flow map `F(v) = diag(v) conj(Y_LL (v - w))`, its Jacobian in
//! rectangular coordinates, a damped Newton solver and fixed-step continuation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::GridModel;

pub const DEFAULT_SIGMA_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadFlowError {
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("continuation lost the solution branch at t = {t_failed} (last good t = {t_last_good:?})")]
    PathLost { t_last_good: Option<f64>, t_failed: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Stack a complex vector as `(Re v_1..Re v_N, Im v_1..Im v_N)`.
pub fn to_rect(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

pub fn from_rect(x: &DVector<f64>) -> DVector<Complex64> {
    let n = x.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(x[i], x[n + i]))
}

pub fn eval_f(model: &GridModel, v: &DVector<Complex64>) -> DVector<Complex64> {
    let i = model.nodal_currents(v);
    v.zip_map(&i, |vj, ij| vj * ij.conj())
}

/// Real `2N×2N` Jacobian of `F`; rows `(Re s, Im s)`, columns `(Re v, Im v)`.
pub fn jacobian(model: &GridModel, v: &DVector<Complex64>) -> DMatrix<f64> {
    let n = model.n_pq();
    let y = model.y_ll();
    let i = model.nodal_currents(v);
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    let imag_unit = Complex64::new(0.0, 1.0);
    for j in 0..n {
        for k in 0..n {
            let mut d_re = v[j] * y[(j, k)].conj();
            let mut d_im = -imag_unit * v[j] * y[(j, k)].conj();
            if j == k {
                d_re += i[j].conj();
                d_im += imag_unit * i[j].conj();
            }
            jac[(j, k)] = d_re.re;
            jac[(n + j, k)] = d_re.im;
            jac[(j, n + k)] = d_im.re;
            jac[(n + j, n + k)] = d_im.im;
        }
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub residual_tol: f64,
    /// Halve the step while the residual grows.
    pub step_damping: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            residual_tol: 1e-10,
            step_damping: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadFlowSolution {
    pub v: DVector<Complex64>,
    pub iterations: usize,
    pub residual: f64,
}

fn mismatch(model: &GridModel, v: &DVector<Complex64>, s: &DVector<Complex64>) -> DVector<f64> {
    to_rect(&(eval_f(model, v) - s))
}

pub fn solve_load_flow(
    model: &GridModel,
    s: &DVector<Complex64>,
    v_start: &DVector<Complex64>,
    opts: &NewtonOptions,
) -> Result<LoadFlowSolution, LoadFlowError> {
    let n = model.n_pq();
    for len in [s.len(), v_start.len()] {
        if len != n {
            return Err(LoadFlowError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let mut v = v_start.clone();
    let mut r = mismatch(model, &v, s);
    let mut norm = r.amax();
    for iter in 0..=opts.max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm <= opts.residual_tol {
            return Ok(LoadFlowSolution {
                v,
                iterations: iter,
                residual: norm,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let Some(dx) = jacobian(model, &v).lu().solve(&(-&r)) else {
            return Err(LoadFlowError::NoConvergence {
                iterations: iter,
                residual: norm,
            });
        };
        let dv = from_rect(&dx);
        let mut step = 1.0;
        let (mut v_next, mut r_next) = {
            let cand = &v + &dv;
            let rc = mismatch(model, &cand, s);
            (cand, rc)
        };
        if opts.step_damping {
            let mut halvings = 0;
            while !(r_next.amax() < norm) && halvings < 30 {
                step *= 0.5;
                halvings += 1;
                v_next = &v + &dv * Complex64::new(step, 0.0);
                r_next = mismatch(model, &v_next, s);
            }
            if !(r_next.amax() < norm) {
                // stalled at a local minimiser of the residual
                return Err(LoadFlowError::NoConvergence {
                    iterations: iter + 1,
                    residual: norm,
                });
            }
        }
        v = v_next;
        r = r_next;
        norm = r.amax();
    }
    Err(LoadFlowError::NoConvergence {
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Newton from the zero-load voltage `w`.
pub fn high_voltage_solution(
    model: &GridModel,
    s: &DVector<Complex64>,
    opts: &NewtonOptions,
) -> Result<LoadFlowSolution, LoadFlowError> {
    solve_load_flow(model, s, model.w(), opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonsingularityCheck {
    pub nonsingular: bool,
    pub min_singular_value: f64,
}

pub fn min_singular_value(model: &GridModel, v: &DVector<Complex64>) -> f64 {
    jacobian(model, v).singular_values().min()
}

pub fn is_nonsingular(
    model: &GridModel,
    v: &DVector<Complex64>,
    sigma_tol: f64,
) -> NonsingularityCheck {
    let sigma = min_singular_value(model, v);
    NonsingularityCheck {
        nonsingular: sigma > sigma_tol,
        min_singular_value: sigma,
    }
}

/// Row-wise quantity `Σ_n |(Y_LL⁻¹)_{m,n} i_n| - |v_m|`; the necessary
/// condition for a singular Jacobian holds iff some entry is `≥ 0`.
pub fn singularity_condition_slack(model: &GridModel, v: &DVector<Complex64>) -> DVector<f64> {
    let i = model.nodal_currents(v);
    let inv = model.y_ll_inv();
    DVector::from_fn(model.n_pq(), |m, _| {
        let lhs: f64 = (0..model.n_pq()).map(|n| (inv[(m, n)] * i[n]).norm()).sum();
        lhs - v[m].norm()
    })
}

pub fn singularity_necessary_condition(model: &GridModel, v: &DVector<Complex64>) -> bool {
    singularity_necessary_condition_within(model, v, 0.0)
}

/// As [`singularity_necessary_condition`], accepting slack down to `-tol·max(1, |v_m|)`.
///
/// With a single PQ bus the condition reads `|v − w| ≥ |v|` and holds with
/// equality at every singular point, so located points need rounding slack.
pub fn singularity_necessary_condition_within(
    model: &GridModel,
    v: &DVector<Complex64>,
    tol: f64,
) -> bool {
    singularity_condition_slack(model, v)
        .iter()
        .zip(v.iter())
        .any(|(&d, vm)| d >= -tol * vm.norm().max(1.0))
}

/// Piecewise-linear path in injection space; waypoints are spread uniformly over `t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerPath {
    waypoints: Vec<DVector<Complex64>>,
}

impl PowerPath {
    pub fn new(waypoints: Vec<DVector<Complex64>>) -> Self {
        assert!(!waypoints.is_empty(), "a power path needs at least one waypoint");
        Self { waypoints }
    }

    pub fn segment(from: DVector<Complex64>, to: DVector<Complex64>) -> Self {
        Self::new(vec![from, to])
    }

    pub fn waypoints(&self) -> &[DVector<Complex64>] {
        &self.waypoints
    }

    pub fn at(&self, t: f64) -> DVector<Complex64> {
        let segments = self.waypoints.len() - 1;
        if segments == 0 {
            return self.waypoints[0].clone();
        }
        let pos = t.clamp(0.0, 1.0) * segments as f64;
        let k = (pos.floor() as usize).min(segments - 1);
        let local = pos - k as f64;
        let a = &self.waypoints[k];
        let b = &self.waypoints[k + 1];
        a + (b - a) * Complex64::new(local, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationOptions {
    pub n_steps: usize,
    pub newton: NewtonOptions,
    /// Largest admissible change `‖Δv‖∞` between consecutive states.
    pub continuity_bound: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            n_steps: 100,
            newton: NewtonOptions::default(),
            continuity_bound: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub s: DVector<Complex64>,
    pub v: DVector<Complex64>,
}

/// Track the load-flow solution along `path`, using the previous state as predictor.
pub fn continuation_trace(
    model: &GridModel,
    path: &PowerPath,
    v_start: &DVector<Complex64>,
    opts: &ContinuationOptions,
) -> Result<Vec<TracePoint>, LoadFlowError> {
    match continuation_trace_partial(model, path, v_start, opts) {
        (trace, None) => Ok(trace),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`continuation_trace`] but keeps the points computed before a failure.
pub fn continuation_trace_partial(
    model: &GridModel,
    path: &PowerPath,
    v_start: &DVector<Complex64>,
    opts: &ContinuationOptions,
) -> (Vec<TracePoint>, Option<LoadFlowError>) {
    let steps = opts.n_steps.max(1);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut prev = v_start.clone();
    let mut t_last_good = None;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let s = path.at(t);
        let lost = LoadFlowError::PathLost {
            t_last_good,
            t_failed: t,
        };
        let sol = match solve_load_flow(model, &s, &prev, &opts.newton) {
            Ok(sol) => sol,
            Err(e @ LoadFlowError::Dimension { .. }) => return (trace, Some(e)),
            Err(_) => return (trace, Some(lost)),
        };
        if k > 0 && (&sol.v - &prev).iter().map(|d| d.norm()).fold(0.0, f64::max) >= opts.continuity_bound {
            return (trace, Some(lost));
        }
        prev = sol.v.clone();
        t_last_good = Some(t);
        trace.push(TracePoint { t, s, v: sol.v });
    }
    (trace, None)
}

/// CSV with columns `t, re_v1, im_v1, ..., re_vN, im_vN`.
pub fn trace_to_csv(trace: &[TracePoint]) -> String {
    let n = trace.first().map_or(0, |p| p.v.len());
    let mut out = String::from("t");
    for j in 1..=n {
        out.push_str(&format!(",re_v{j},im_v{j}"));
    }
    out.push('\n');
    for p in trace {
        out.push_str(&format!("{}", p.t));
        for vj in p.v.iter() {
            out.push_str(&format!(",{},{}", vj.re, vj.im));
        }
        out.push('\n');
    }
    out
}
