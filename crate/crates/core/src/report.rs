//! JSON reports written by the command-line tool.
//!
//! Every report carries `schema_version` and a `command` tag selecting the
//! body. Parsing a report and writing it back is lossless.

use serde::{Deserialize, Serialize};

use crate::constraints::{AuxBounds, ConstraintKind, ConstraintSet, Owner};
use crate::grid::ComplexValue;
use crate::oracle::{BoundaryHit, Collision, Violation};
use crate::pipeline::{KappaSearch, KappaTrial, Verdict};
use crate::vset::{LambdaSchedule, LambdaStep, P1Record, StopReason};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    #[serde(flatten)]
    pub body: ReportBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ReportBody {
    Vset(VsetReport),
    Admissibility(AdmissibilityReport),
    MaxKappa(MaxKappaReport),
    Oracle(OracleReport),
    Loadflow(LoadflowReport),
}

impl Report {
    pub fn new(body: ReportBody) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            body,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports contain only finite numbers")
    }
}

/// One row of `V` as listed in reports, numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEntry {
    pub ell: usize,
    pub kind: ConstraintKind,
    pub owner: Owner,
}

pub fn constraint_entries(set: &ConstraintSet) -> Vec<ConstraintEntry> {
    set.entries
        .iter()
        .enumerate()
        .map(|(i, c)| ConstraintEntry {
            ell: i + 1,
            kind: c.kind,
            owner: c.owner,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsetOutcome {
    Calibrated,
    CalibrationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsetReport {
    pub outcome: VsetOutcome,
    pub schedule: LambdaSchedule,
    pub lambda_star: Option<f64>,
    pub stop: Option<StopReason>,
    pub aux: Option<AuxBounds>,
    pub steps: Vec<LambdaStep>,
    pub p1: Vec<P1Record>,
    pub constraints: Vec<ConstraintEntry>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissibilityOutcome {
    Admissible,
    Unknown,
    PreconditionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub outcome: AdmissibilityOutcome,
    pub verdict: Option<Verdict>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxKappaOutcome {
    Found,
    NoAdmissibleKappa,
    PreconditionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxKappaReport {
    pub outcome: MaxKappaOutcome,
    pub search: KappaSearch,
    pub kappa_star: Option<f64>,
    pub first_unknown: Option<f64>,
    pub trials: Vec<KappaTrial>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Paths,
    Boundary,
    Uniqueness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub probe: Probe,
    pub seed: u64,
    /// Paths, samples or trials attempted.
    pub attempts: usize,
    pub violations: Vec<Violation>,
    pub boundary_hits: Vec<BoundaryHit>,
    pub collisions: Vec<Collision>,
    /// Set when the probe could not run, e.g. because calibration failed.
    pub error: Option<String>,
}

impl OracleReport {
    pub fn findings(&self) -> usize {
        self.violations.len() + self.boundary_hits.len() + self.collisions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadflowReport {
    pub converged: bool,
    pub n_steps: usize,
    /// Last path parameter with a solution on the branch.
    pub t_last_good: Option<f64>,
    pub v_final: Vec<ComplexValue>,
    pub min_singular_value: Option<f64>,
    pub error: Option<String>,
}
