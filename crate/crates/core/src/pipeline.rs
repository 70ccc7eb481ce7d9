//! Admissibility certification: calibrate `Ṽ`, assemble `V`, then test an
//! uncertainty set for membership, connectivity and boundary exclusion.
//!
//! The pipeline is one-sided. It either proves a set admissible or says
//! [`VerdictResult::Unknown`] together with the stage that failed.

use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{eval_constraints, security_forms, ConstraintSet, SecuritySpec, DEFAULT_MEMBERSHIP_TOL};
use crate::grid::GridModel;
use crate::load_flow::{eval_f, is_nonsingular, DEFAULT_SIGMA_TOL};
use crate::moment::{check_p0_infeasible, P0Options, P0Record, P0Status};
use crate::uncertainty::{KappaTemplate, UncertaintyError, UncertaintySet};
use crate::vset::{assemble_v, calibrate_lambda, Calibration, LambdaSchedule, LambdaStep, P1Record, VsetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("no admissible kappa: the smallest tested value {kappa} is not certified")]
    NoAdmissibleKappa { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub beta: f64,
    /// Reference nodal current profile `Î`; uniform 1 p.u. when absent.
    pub i_node_ref: Option<Vec<f64>>,
    pub schedule: LambdaSchedule,
    pub p0: P0Options,
    pub membership_tol: f64,
    pub sigma_tol: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            i_node_ref: None,
            schedule: LambdaSchedule::default(),
            p0: P0Options::default(),
            membership_tol: DEFAULT_MEMBERSHIP_TOL,
            sigma_tol: DEFAULT_SIGMA_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    MembershipFailed { min_margin: f64, ell: Option<usize> },
    ConnectivityFailed { reason: String },
    BoundaryNotExcluded { ells: Vec<usize> },
    CalibrationFailed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", content = "failure", rename_all = "snake_case")]
pub enum VerdictResult {
    Admissible,
    Unknown(Failure),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub calibration_s: f64,
    pub boundary_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub lambda_star: Option<f64>,
    pub calibration_steps: Vec<LambdaStep>,
    pub p1: Vec<P1Record>,
    /// Smallest margin of `v_initial` in `V`.
    pub membership_margin: Option<f64>,
    pub p0: Vec<P0Record>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(flatten)]
    pub result: VerdictResult,
    pub evidence: Evidence,
}

impl Verdict {
    pub fn is_admissible(&self) -> bool {
        self.result == VerdictResult::Admissible
    }

    /// Copy with every wall-clock measurement zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut v = self.clone();
        v.evidence.timings = Timings::default();
        for s in &mut v.evidence.calibration_steps {
            s.wall_time_s = 0.0;
        }
        for r in &mut v.evidence.p1 {
            r.wall_time_s = 0.0;
        }
        for r in &mut v.evidence.p0 {
            r.wall_time_s = 0.0;
        }
        v
    }
}

/// A calibrated grid, reusable across many uncertainty sets.
#[derive(Debug, Clone)]
pub struct Certifier {
    pub model: GridModel,
    pub security: SecuritySpec,
    pub opts: PipelineOptions,
    pub calibration: Result<Calibration, VsetError>,
    pub calibration_s: f64,
    /// `V`, present when calibration succeeded.
    pub v_set: Option<ConstraintSet>,
}

impl Certifier {
    pub fn new(
        model: GridModel,
        security: SecuritySpec,
        opts: PipelineOptions,
    ) -> Result<Self, PipelineError> {
        security
            .validate(&model)
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        opts.schedule
            .validate()
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        let i_ref = opts
            .i_node_ref
            .clone()
            .unwrap_or_else(|| vec![1.0; model.n_pq()]);
        let started = Instant::now();
        let calibration = calibrate_lambda(
            &model,
            &security,
            opts.beta,
            &i_ref,
            &opts.schedule,
            &opts.p0.conic,
        );
        if let Err(VsetError::Constraint(e)) = &calibration {
            return Err(PipelineError::Input(e.to_string()));
        }
        let calibration_s = started.elapsed().as_secs_f64();
        let v_set = calibration
            .as_ref()
            .ok()
            .map(|c| assemble_v(&model, &security, &c.aux));
        Ok(Self {
            model,
            security,
            opts,
            calibration,
            calibration_s,
            v_set,
        })
    }

    /// Initial-state conditions: secure, non-singular, and its injection in the set.
    pub fn check_preconditions(
        &self,
        v_initial: &DVector<Complex64>,
        uncertainty: &UncertaintySet,
    ) -> Result<(), PipelineError> {
        let n = self.model.n_pq();
        if v_initial.len() != n {
            return Err(PipelineError::Input(format!(
                "initial voltage has {} entries, grid has {n} PQ buses",
                v_initial.len()
            )));
        }
        if uncertainty.n_buses() != n {
            return Err(PipelineError::Input(format!(
                "uncertainty set covers {} buses, grid has {n} PQ buses",
                uncertainty.n_buses()
            )));
        }
        let margins = eval_constraints(&security_forms(&self.model, &self.security), v_initial);
        if !(margins.min > 0.0) {
            return Err(PipelineError::PreconditionViolated(format!(
                "initial state violates security constraint {} (margin {:e})",
                margins.argmin.map_or(0, |i| i + 1),
                margins.min
            )));
        }
        let ns = is_nonsingular(&self.model, v_initial, self.opts.sigma_tol);
        if !ns.nonsingular {
            return Err(PipelineError::PreconditionViolated(format!(
                "load-flow Jacobian at the initial state is singular (min singular value {:e})",
                ns.min_singular_value
            )));
        }
        let s0 = eval_f(&self.model, v_initial);
        if !uncertainty.contains(&s0) {
            return Err(PipelineError::PreconditionViolated(
                "initial injection lies outside the uncertainty set".into(),
            ));
        }
        Ok(())
    }

    pub fn test(
        &self,
        v_initial: &DVector<Complex64>,
        uncertainty: &UncertaintySet,
    ) -> Result<Verdict, PipelineError> {
        let started = Instant::now();
        self.check_preconditions(v_initial, uncertainty)?;
        let mut evidence = Evidence {
            timings: Timings {
                calibration_s: self.calibration_s,
                ..Timings::default()
            },
            ..Evidence::default()
        };
        let finish = |result: VerdictResult, mut evidence: Evidence| {
            evidence.timings.total_s = started.elapsed().as_secs_f64() + self.calibration_s;
            Ok(Verdict { result, evidence })
        };

        if let Err(e) = uncertainty.validate(self.model.n_pq()) {
            let reason = match e {
                UncertaintyError::BusCount { .. } => return Err(PipelineError::Input(e.to_string())),
                other => other.to_string(),
            };
            return finish(
                VerdictResult::Unknown(Failure::ConnectivityFailed { reason }),
                evidence,
            );
        }

        let cal = match &self.calibration {
            Ok(c) => c,
            Err(e) => {
                return finish(
                    VerdictResult::Unknown(Failure::CalibrationFailed {
                        reason: e.to_string(),
                    }),
                    evidence,
                )
            }
        };
        evidence.lambda_star = Some(cal.lambda_star);
        evidence.calibration_steps = cal.steps.clone();
        evidence.p1 = cal.records.clone();

        let v_set = self.v_set.as_ref().expect("V exists after calibration");
        let margins = eval_constraints(v_set, v_initial);
        evidence.membership_margin = Some(margins.min);
        if !margins.strictly_inside(self.opts.membership_tol) {
            return finish(
                VerdictResult::Unknown(Failure::MembershipFailed {
                    min_margin: margins.min,
                    ell: margins.argmin.map(|i| i + 1),
                }),
                evidence,
            );
        }

        let p0_started = Instant::now();
        let records = check_p0_infeasible(&self.model, v_set, uncertainty, &self.opts.p0);
        evidence.timings.boundary_s = p0_started.elapsed().as_secs_f64();
        let open: Vec<usize> = records
            .iter()
            .filter(|r| r.status != P0Status::Infeasible)
            .map(|r| r.ell)
            .collect();
        evidence.p0 = records;
        if open.is_empty() {
            finish(VerdictResult::Admissible, evidence)
        } else {
            finish(
                VerdictResult::Unknown(Failure::BoundaryNotExcluded { ells: open }),
                evidence,
            )
        }
    }
}

pub fn test_admissibility(
    model: &GridModel,
    security: &SecuritySpec,
    v_initial: &DVector<Complex64>,
    uncertainty: &UncertaintySet,
    opts: &PipelineOptions,
) -> Result<Verdict, PipelineError> {
    let certifier = Certifier::new(model.clone(), security.clone(), opts.clone())?;
    // One-off convenience; `Certifier` amortises calibration across sets.
    certifier.test(v_initial, uncertainty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaSearch {
    /// Smallest `κ` tested first; must be certified for the search to proceed.
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub resolution: f64,
}

impl Default for KappaSearch {
    fn default() -> Self {
        Self {
            kappa_min: 0.01,
            kappa_max: 1.0,
            resolution: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaTrial {
    pub kappa: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa_star: f64,
    /// First value found not certified, if any was tested.
    pub first_unknown: Option<f64>,
    pub trials: Vec<KappaTrial>,
}

/// Bisection over `κ`, relying on monotone growth of the template.
pub fn max_kappa(
    certifier: &Certifier,
    v_initial: &DVector<Complex64>,
    template: &KappaTemplate,
    search: &KappaSearch,
) -> Result<KappaResult, PipelineError> {
    let ok = |x: f64| x.is_finite() && x > 0.0;
    if !(ok(search.kappa_min) && ok(search.resolution) && search.kappa_max > search.kappa_min) {
        return Err(PipelineError::Input(format!(
            "kappa search needs 0 < kappa_min < kappa_max and a positive resolution, got {search:?}"
        )));
    }
    let mut trials = Vec::new();
    let run = |kappa: f64, trials: &mut Vec<KappaTrial>| -> Result<bool, PipelineError> {
        let set = template
            .at(kappa)
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        let verdict = certifier.test(v_initial, &set)?;
        let admissible = verdict.is_admissible();
        trials.push(KappaTrial { kappa, verdict });
        Ok(admissible)
    };
    if !run(search.kappa_min, &mut trials)? {
        return Err(PipelineError::NoAdmissibleKappa {
            kappa: search.kappa_min,
        });
    }
    if run(search.kappa_max, &mut trials)? {
        return Ok(KappaResult {
            kappa_star: search.kappa_max,
            first_unknown: None,
            trials,
        });
    }
    let (mut lo, mut hi) = (search.kappa_min, search.kappa_max);
    while hi - lo > search.resolution {
        let mid = 0.5 * (lo + hi);
        if run(mid, &mut trials)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(KappaResult {
        kappa_star: lo,
        first_unknown: Some(hi),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, BranchSpec};
    use crate::uncertainty::PowerRegion;

    fn two_bus() -> GridModel {
        build_grid(
            &[BranchSpec::line(0, 1, Complex64::new(1.0, 0.0), 0.0)],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap()
    }

    fn certifier() -> Certifier {
        let m = two_bus();
        let sec = SecuritySpec::uniform(&m, 0.9, 1.1, 1.0);
        Certifier::new(m, sec, PipelineOptions::default()).unwrap()
    }

    fn one(re: f64, im: f64) -> DVector<Complex64> {
        DVector::from_element(1, Complex64::new(re, im))
    }

    #[test]
    fn singleton_at_zero_is_admissible() {
        let c = certifier();
        let w = c.model.w().clone();
        let v = c.test(&w, &UncertaintySet::singleton(&one(0.0, 0.0))).unwrap();
        assert!(v.is_admissible(), "{:?}", v.result);
        assert!(v.evidence.p0.iter().all(|r| r.certificate_digest.is_some()));
        let again = c.test(&w, &UncertaintySet::singleton(&one(0.0, 0.0))).unwrap();
        assert_eq!(v.without_timings(), again.without_timings());
    }

    #[test]
    fn nose_box_is_unknown() {
        let c = certifier();
        let w = c.model.w().clone();
        let u = UncertaintySet::new(vec![PowerRegion::rect(-0.3, 0.0, 0.0, 0.0)]);
        let v = c.test(&w, &u).unwrap();
        assert!(matches!(
            v.result,
            VerdictResult::Unknown(Failure::BoundaryNotExcluded { .. })
        ));
    }

    #[test]
    fn low_initial_voltage_violates_precondition() {
        let c = certifier();
        let u = UncertaintySet::new(vec![PowerRegion::rect(-1.0, 1.0, -1.0, 1.0)]);
        assert!(matches!(
            c.test(&one(0.85, 0.0), &u),
            Err(PipelineError::PreconditionViolated(_))
        ));
        // Injection outside the set.
        let far = UncertaintySet::singleton(&one(0.5, 0.0));
        assert!(matches!(
            c.test(c.model.w(), &far),
            Err(PipelineError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn unbounded_region_fails_connectivity() {
        let c = certifier();
        let u = UncertaintySet::new(vec![PowerRegion::HalfPlanes(vec![
            crate::uncertainty::HalfPlane::new(1.0, 0.0, 0.0),
        ])]);
        let v = c.test(c.model.w(), &u).unwrap();
        assert!(matches!(
            v.result,
            VerdictResult::Unknown(Failure::ConnectivityFailed { .. })
        ));
    }

    #[test]
    fn verdict_json_shape() {
        let v = Verdict {
            result: VerdictResult::Unknown(Failure::BoundaryNotExcluded { ells: vec![1, 4] }),
            evidence: Evidence::default(),
        };
        let j = serde_json::to_value(&v).unwrap();
        assert_eq!(j["result"], "unknown");
        assert_eq!(j["failure"]["kind"], "boundary_not_excluded");
        let back: Verdict = serde_json::from_value(j).unwrap();
        assert_eq!(back, v);
        let a = Verdict {
            result: VerdictResult::Admissible,
            evidence: Evidence::default(),
        };
        let j = serde_json::to_value(&a).unwrap();
        assert_eq!(j["result"], "admissible");
        assert_eq!(serde_json::from_value::<Verdict>(j).unwrap(), a);
    }
}
