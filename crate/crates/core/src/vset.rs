//! Calibration of the auxiliary current caps and assembly of the voltage set `V`.
//!
//! `Ṽ` is the intersection of branch- and nodal-current disks. It is
//! non-singular when, for every PQ bus pair `(m, n)` and sign pair
//! `(ψ, φ)`, the second-order cone program
//!
//! ```text
//! v ∈ Ṽ,  ψ·Re u_n ≥ 0,  φ·Im u_n ≥ 0,
//! ‖Row_m(Y_LL⁻¹)‖₁ · (ψ·Re u_n + φ·Im u_n) ≥ |v_m|,   u = Y_LL (v − w)
//! ```
//!
//! is infeasible. The nodal caps `λ·Î` are grown until this test fails.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, AffineExpr, Cone, ConicOptions, ConicProblem, SolveStatus};
use crate::constraints::{
    aux_forms, combine, security_forms, AuxBounds, ComplexAffine, ConstraintError,
    ConstraintSet, SecuritySpec,
};
use crate::grid::GridModel;

/// Guard against schedules that would take effectively forever to reach the cap.
pub const MAX_SCHEDULE_STEPS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VsetError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("invalid lambda schedule: {0}")]
    BadSchedule(String),
    #[error("calibration failed at lambda = {lambda}: {reason}")]
    CalibrationFailed { lambda: f64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct P1Index {
    /// 0-based PQ indices.
    pub m: usize,
    pub n: usize,
    pub psi: i8,
    pub phi: i8,
}

/// All `4N²` instances in canonical order.
pub fn p1_indices(n_pq: usize) -> Vec<P1Index> {
    let mut out = Vec::with_capacity(4 * n_pq * n_pq);
    for m in 0..n_pq {
        for n in 0..n_pq {
            for psi in [1, -1] {
                for phi in [1, -1] {
                    out.push(P1Index { m, n, psi, phi });
                }
            }
        }
    }
    out
}

fn affine_parts(a: &ComplexAffine) -> (AffineExpr, AffineExpr) {
    let (cr, gr) = a.real_part();
    let (ci, gi) = a.imag_part();
    (
        AffineExpr::from_dense(cr, gr.as_slice()),
        AffineExpr::from_dense(ci, gi.as_slice()),
    )
}

/// `bound ≥ |a(v)|` as a three-dimensional second-order cone.
fn add_disk(p: &mut ConicProblem, a: &ComplexAffine, bound: f64) {
    let (re, im) = affine_parts(a);
    p.add_cone(Cone::SecondOrder(3), &[AffineExpr::constant(bound), re, im]);
}

pub fn formulate_p1(model: &GridModel, aux: &AuxBounds, idx: P1Index) -> ConicProblem {
    let n_pq = model.n_pq();
    let mut p = ConicProblem::new(2 * n_pq);
    p.objective = vec![1.0; 2 * n_pq];
    for (row, bound) in aux.i_branch.iter().enumerate() {
        add_disk(&mut p, &ComplexAffine::branch_current(model, row), *bound);
    }
    for (j, bound) in aux.i_node.iter().enumerate() {
        add_disk(&mut p, &ComplexAffine::nodal_current(model, j), *bound);
    }
    let (ure, uim) = affine_parts(&ComplexAffine::nodal_current(model, idx.n));
    let s_re = ure.scaled(idx.psi as f64);
    let s_im = uim.scaled(idx.phi as f64);
    p.add_cone(Cone::NonNegative(2), &[s_re.clone(), s_im.clone()]);
    let k: f64 = model
        .y_ll_inv()
        .row(idx.m)
        .iter()
        .map(|z| z.norm())
        .sum();
    let lhs = s_re.plus(&s_im).scaled(k);
    p.add_cone(
        Cone::SecondOrder(3),
        &[lhs, AffineExpr::var(idx.m), AffineExpr::var(n_pq + idx.m)],
    );
    p.compress();
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Infeasible,
    Feasible,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P1Record {
    #[serde(flatten)]
    pub index: P1Index,
    pub status: CheckStatus,
    pub certificate_digest: Option<String>,
    pub reason: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum P1Verdict {
    AllInfeasible,
    FirstFeasible(P1Index),
    /// The solver could not decide an instance; treated like a feasible one.
    Inconclusive { index: P1Index, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct P1Report {
    pub verdict: P1Verdict,
    pub records: Vec<P1Record>,
}

pub fn solve_p1(model: &GridModel, aux: &AuxBounds, idx: P1Index, opts: &ConicOptions) -> P1Record {
    let start = Instant::now();
    let problem = formulate_p1(model, aux, idx);
    let out = conic::solve(&problem, opts);
    let (status, certificate_digest, reason) = match out.status {
        SolveStatus::Infeasible(cert) => {
            // The backend only emits verified certificates; re-check anyway
            // since the whole verdict rests on this.
            if conic::verify_infeasibility_certificate(&problem, &cert, opts.cert_tol) {
                (CheckStatus::Infeasible, Some(cert.digest()), None)
            } else {
                (CheckStatus::Unknown, None, Some("certificate rejected".to_string()))
            }
        }
        SolveStatus::Feasible { .. } => (CheckStatus::Feasible, None, None),
        SolveStatus::Unknown(r) => (CheckStatus::Unknown, None, Some(r)),
    };
    P1Record {
        index: idx,
        status,
        certificate_digest,
        reason,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Solves every instance (concurrently) and reduces in canonical order, so
/// the verdict does not depend on completion order.
pub fn check_p1_all(model: &GridModel, aux: &AuxBounds, opts: &ConicOptions) -> P1Report {
    let records: Vec<P1Record> = p1_indices(model.n_pq())
        .into_par_iter()
        .map(|idx| solve_p1(model, aux, idx, opts))
        .collect();
    let verdict = records
        .iter()
        .find_map(|r| match r.status {
            CheckStatus::Infeasible => None,
            CheckStatus::Feasible => Some(P1Verdict::FirstFeasible(r.index)),
            CheckStatus::Unknown => Some(P1Verdict::Inconclusive {
                index: r.index,
                reason: r.reason.clone().unwrap_or_default(),
            }),
        })
        .unwrap_or(P1Verdict::AllInfeasible);
    P1Report { verdict, records }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Ratio(f64),
    Step(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub mode: ScheduleMode,
    /// Calibration stops once some nodal cap `λ·Î_j` would exceed this (p.u.).
    pub cap: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            start: 0.1,
            mode: ScheduleMode::Ratio(1.2),
            cap: 1.0,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<(), VsetError> {
        let bad = |m: String| Err(VsetError::BadSchedule(m));
        if !(self.start.is_finite() && self.start > 0.0) {
            return bad(format!("start must be positive, got {}", self.start));
        }
        if !(self.cap.is_finite() && self.cap > 0.0) {
            return bad(format!("cap must be positive, got {}", self.cap));
        }
        match self.mode {
            ScheduleMode::Ratio(r) if !(r.is_finite() && r > 1.0) => {
                bad(format!("ratio must exceed 1, got {r}"))
            }
            ScheduleMode::Step(d) if !(d.is_finite() && d > 0.0) => {
                bad(format!("step must be positive, got {d}"))
            }
            _ => Ok(()),
        }
    }

    /// The `k`-th value, computed directly rather than by accumulation.
    pub fn value(&self, k: usize) -> f64 {
        match self.mode {
            ScheduleMode::Ratio(r) => self.start * r.powi(k as i32),
            ScheduleMode::Step(d) => self.start + k as f64 * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Feasible,
    Unknown,
    CapExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStep {
    pub lambda: f64,
    pub all_infeasible: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub lambda_star: f64,
    pub aux: AuxBounds,
    pub stop: StopReason,
    pub steps: Vec<LambdaStep>,
    /// P1 records at `lambda_star`, the evidence for non-singularity of `Ṽ`.
    pub records: Vec<P1Record>,
}

pub fn calibrate_lambda(
    model: &GridModel,
    security: &SecuritySpec,
    beta: f64,
    i_node_ref: &[f64],
    schedule: &LambdaSchedule,
    opts: &ConicOptions,
) -> Result<Calibration, VsetError> {
    schedule.validate()?;
    security.validate(model)?;
    // Validates beta and the reference profile before any solve.
    AuxBounds::new(security, beta, i_node_ref, schedule.start)?;
    let ref_max = i_node_ref.iter().copied().fold(0.0, f64::max);
    let mut steps = Vec::new();
    let mut best: Option<(f64, AuxBounds, Vec<P1Record>)> = None;
    let mut stop = StopReason::CapExceeded;
    for k in 0..MAX_SCHEDULE_STEPS {
        let lambda = schedule.value(k);
        if lambda * ref_max > schedule.cap * (1.0 + 1e-12) {
            break;
        }
        let aux = AuxBounds::new(security, beta, i_node_ref, lambda)?;
        let started = Instant::now();
        let report = check_p1_all(model, &aux, opts);
        let all_infeasible = report.verdict == P1Verdict::AllInfeasible;
        steps.push(LambdaStep {
            lambda,
            all_infeasible,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        match report.verdict {
            P1Verdict::AllInfeasible => best = Some((lambda, aux, report.records)),
            P1Verdict::FirstFeasible(_) => {
                stop = StopReason::Feasible;
                break;
            }
            P1Verdict::Inconclusive { .. } => {
                stop = StopReason::Unknown;
                break;
            }
        }
    }
    match best {
        Some((lambda_star, aux, records)) => Ok(Calibration {
            lambda_star,
            aux,
            stop,
            steps,
            records,
        }),
        None => {
            let reason = match stop {
                StopReason::Feasible => "the first schedule value already admits a singular point",
                StopReason::Unknown => "the solver could not decide the first schedule value",
                StopReason::CapExceeded => "the schedule starts above the cap",
            };
            Err(VsetError::CalibrationFailed {
                lambda: schedule.start,
                reason: reason.to_string(),
            })
        }
    }
}

/// `V`: the `Ṽ` block followed by the security constraints.
pub fn assemble_v(model: &GridModel, security: &SecuritySpec, aux: &AuxBounds) -> ConstraintSet {
    combine(aux_forms(model, aux), security_forms(model, security))
}
