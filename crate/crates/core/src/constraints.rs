//! Constraint functionals `f_ℓ(v)` as quadratic forms in `x = (Re v; Im v)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridModel;
use crate::load_flow::to_rect;

pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("invalid security bounds: {0}")]
    InvalidSecurity(String),
    #[error("invalid auxiliary bounds: {0}")]
    InvalidAux(String),
    #[error("malformed security file: {0}")]
    Parse(String),
}

/// `κ + c^T v` for a complex row `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexAffine {
    pub offset: Complex64,
    pub coeffs: DVector<Complex64>,
}

impl ComplexAffine {
    pub fn bus_voltage(n: usize, j: usize) -> Self {
        let mut coeffs = DVector::from_element(n, Complex64::new(0.0, 0.0));
        coeffs[j] = Complex64::new(1.0, 0.0);
        Self {
            offset: Complex64::new(0.0, 0.0),
            coeffs,
        }
    }

    /// `Row_j(Y_LL)(v - w)`.
    pub fn nodal_current(model: &GridModel, j: usize) -> Self {
        let row = model.y_ll().row(j).transpose();
        Self {
            offset: -row.dot(model.w()),
            coeffs: row,
        }
    }

    pub fn branch_current(model: &GridModel, row: usize) -> Self {
        let r = &model.branch_rows()[row];
        Self {
            offset: r.a * model.slack_voltage(),
            coeffs: r.c.clone(),
        }
    }

    pub fn eval(&self, v: &DVector<Complex64>) -> Complex64 {
        self.offset + self.coeffs.dot(v)
    }

    /// Real part as `(constant, row over x)`.
    pub fn real_part(&self) -> (f64, DVector<f64>) {
        let n = self.coeffs.len();
        let row = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.coeffs[i].re
            } else {
                -self.coeffs[i - n].im
            }
        });
        (self.offset.re, row)
    }

    pub fn imag_part(&self) -> (f64, DVector<f64>) {
        let n = self.coeffs.len();
        let row = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.coeffs[i].im
            } else {
                self.coeffs[i - n].re
            }
        });
        (self.offset.im, row)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            offset: self.offset * k,
            coeffs: &self.coeffs * Complex64::new(k, 0.0),
        }
    }
}

/// `f(x) = constant + linear·x + xᵀ quadratic x` with `quadratic` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticForm {
    pub fn zero(dim: usize) -> Self {
        Self {
            constant: 0.0,
            linear: DVector::zeros(dim),
            quadratic: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// `|κ + cᵀv|²`.
    pub fn abs_sq(a: &ComplexAffine) -> Self {
        let (kr, gr) = a.real_part();
        let (ki, gi) = a.imag_part();
        Self {
            constant: kr * kr + ki * ki,
            linear: &gr * (2.0 * kr) + &gi * (2.0 * ki),
            quadratic: &gr * gr.transpose() + &gi * gi.transpose(),
        }
    }

    /// `bound² - |κ + cᵀv|²`.
    pub fn disk(a: &ComplexAffine, bound: f64) -> Self {
        let mut q = Self::abs_sq(a).scale(-1.0);
        q.constant += bound * bound;
        q
    }

    /// Product of two real affine functions `(c1 + g1·x)(c2 + g2·x)`.
    pub fn product(c1: f64, g1: &DVector<f64>, c2: f64, g2: &DVector<f64>) -> Self {
        let outer = g1 * g2.transpose();
        Self {
            constant: c1 * c2,
            linear: g1 * c2 + g2 * c1,
            quadratic: (&outer + outer.transpose()) * 0.5,
        }
    }

    pub fn scale(mut self, k: f64) -> Self {
        self.constant *= k;
        self.linear *= k;
        self.quadratic *= k;
        self
    }

    pub fn add(mut self, other: &Self) -> Self {
        self.constant += other.constant;
        self.linear += &other.linear;
        self.quadratic += &other.quadratic;
        self
    }

    pub fn eval_rect(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.linear.dot(x) + x.dot(&(&self.quadratic * x))
    }

    pub fn eval(&self, v: &DVector<Complex64>) -> f64 {
        self.eval_rect(&to_rect(v))
    }

    pub fn symmetry_defect(&self) -> f64 {
        (&self.quadratic - self.quadratic.transpose()).amax()
    }
}

/// Per-bus or per-directed-branch value given either as one scalar or as a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BusValues {
    Uniform(f64),
    PerBus(Vec<f64>),
}

impl BusValues {
    pub fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>, ConstraintError> {
        match self {
            BusValues::Uniform(x) => Ok(vec![*x; n]),
            BusValues::PerBus(v) if v.len() == n => Ok(v.clone()),
            BusValues::PerBus(v) => Err(ConstraintError::InvalidSecurity(format!(
                "{what}: expected {n} values, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchLimit {
    pub from: usize,
    pub to: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BranchValues {
    Uniform(f64),
    /// Limits per branch; an entry applies to both directions unless the
    /// reverse direction is listed separately.
    PerBranch(Vec<BranchLimit>),
}

/// On-disk security and auxiliary specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecurityFile {
    pub vmin: BusValues,
    pub vmax: BusValues,
    pub imax: BranchValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_node_ref: Option<BusValues>,
}

impl SecurityFile {
    pub fn from_json_str(s: &str) -> Result<Self, ConstraintError> {
        serde_json::from_str(s).map_err(|e| ConstraintError::Parse(e.to_string()))
    }

    pub fn to_spec(&self, model: &GridModel) -> Result<SecuritySpec, ConstraintError> {
        let n = model.n_pq();
        let vmin = self.vmin.expand(n, "vmin")?;
        let vmax = self.vmax.expand(n, "vmax")?;
        let rows = model.branch_rows();
        let imax = match &self.imax {
            BranchValues::Uniform(x) => vec![*x; rows.len()],
            BranchValues::PerBranch(list) => {
                let mut out = vec![None; rows.len()];
                // exact directions first, then fill reverse directions
                for pass in 0..2 {
                    for lim in list {
                        let mut found = false;
                        for (idx, r) in rows.iter().enumerate() {
                            let exact = r.from == lim.from && r.to == lim.to;
                            let reverse = r.from == lim.to && r.to == lim.from;
                            if exact || reverse {
                                found = true;
                            }
                            if (pass == 0 && exact) || (pass == 1 && reverse && out[idx].is_none())
                            {
                                out[idx] = Some(lim.value);
                            }
                        }
                        if !found {
                            return Err(ConstraintError::InvalidSecurity(format!(
                                "imax given for unknown branch {}->{}",
                                lim.from, lim.to
                            )));
                        }
                    }
                }
                out.into_iter()
                    .zip(rows)
                    .map(|(v, r)| {
                        v.ok_or_else(|| {
                            ConstraintError::InvalidSecurity(format!(
                                "missing imax for branch {}->{}",
                                r.from, r.to
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let spec = SecuritySpec { vmin, vmax, imax };
        spec.validate(model)?;
        Ok(spec)
    }

    pub fn i_node_ref(&self, model: &GridModel) -> Result<Option<Vec<f64>>, ConstraintError> {
        self.i_node_ref
            .as_ref()
            .map(|b| b.expand(model.n_pq(), "i_node_ref"))
            .transpose()
    }
}

/// Security bounds; `imax` is indexed like [`GridModel::branch_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct SecuritySpec {
    pub vmin: Vec<f64>,
    pub vmax: Vec<f64>,
    pub imax: Vec<f64>,
}

impl SecuritySpec {
    pub fn uniform(model: &GridModel, vmin: f64, vmax: f64, imax: f64) -> Self {
        Self {
            vmin: vec![vmin; model.n_pq()],
            vmax: vec![vmax; model.n_pq()],
            imax: vec![imax; model.branch_rows().len()],
        }
    }

    pub fn validate(&self, model: &GridModel) -> Result<(), ConstraintError> {
        let bad = |m: String| Err(ConstraintError::InvalidSecurity(m));
        if self.vmin.len() != model.n_pq() || self.vmax.len() != model.n_pq() {
            return bad("voltage bounds must be given for every PQ bus".into());
        }
        if self.imax.len() != model.branch_rows().len() {
            return bad("current bounds must be given for every directed branch".into());
        }
        for (j, (lo, hi)) in self.vmin.iter().zip(&self.vmax).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < *lo && lo < hi) {
                return bad(format!("bus {}: need 0 < vmin < vmax", j + 1));
            }
        }
        if let Some(i) = self.imax.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            let r = &model.branch_rows()[i];
            return bad(format!("branch {}->{}: imax must be positive", r.from, r.to));
        }
        Ok(())
    }
}

/// Auxiliary current caps defining the convex set `Ṽ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxBounds {
    pub beta: f64,
    pub i_branch: Vec<f64>,
    pub i_node_ref: Vec<f64>,
    pub lambda: f64,
    pub i_node: Vec<f64>,
}

impl AuxBounds {
    pub fn new(
        security: &SecuritySpec,
        beta: f64,
        i_node_ref: &[f64],
        lambda: f64,
    ) -> Result<Self, ConstraintError> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(ConstraintError::InvalidAux(format!(
                "beta must lie in (0, 1], got {beta}"
            )));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(ConstraintError::InvalidAux(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if i_node_ref.len() != security.vmin.len()
            || i_node_ref.iter().any(|x| !(x.is_finite() && *x > 0.0))
        {
            return Err(ConstraintError::InvalidAux(
                "i_node_ref needs one positive value per PQ bus".into(),
            ));
        }
        Ok(Self {
            beta,
            i_branch: security.imax.iter().map(|x| beta * x).collect(),
            i_node_ref: i_node_ref.to_vec(),
            lambda,
            i_node: i_node_ref.iter().map(|x| lambda * x).collect(),
        })
    }

    /// Bounds with explicit caps, bypassing the `β`/`λ` parameterisation.
    pub fn explicit(i_branch: Vec<f64>, i_node: Vec<f64>) -> Self {
        Self {
            beta: 1.0,
            i_branch,
            i_node_ref: i_node.clone(),
            lambda: 1.0,
            i_node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    VLow,
    VUp,
    IBranchSec,
    IBranchAux,
    INodeAux,
}

/// Bus numbers are 1-based PQ buses, branches use grid bus numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Bus(usize),
    Branch { from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub owner: Owner,
    pub form: QuadraticForm,
}

/// Ordered constraint list; the first `aux_count` entries define `Ṽ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub dim: usize,
    pub entries: Vec<Constraint>,
    pub aux_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Margins {
    pub values: Vec<f64>,
    pub min: f64,
    pub argmin: Option<usize>,
}

impl Margins {
    pub fn strictly_inside(&self, tol: f64) -> bool {
        self.min > tol
    }
}

impl ConstraintSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            aux_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn aux_block(&self) -> ConstraintSet {
        ConstraintSet {
            dim: self.dim,
            entries: self.entries[..self.aux_count].to_vec(),
            aux_count: self.aux_count,
        }
    }

    pub fn security_block(&self) -> ConstraintSet {
        ConstraintSet {
            dim: self.dim,
            entries: self.entries[self.aux_count..].to_vec(),
            aux_count: 0,
        }
    }
}

pub fn security_forms(model: &GridModel, spec: &SecuritySpec) -> ConstraintSet {
    let n = model.n_pq();
    let mut entries = Vec::with_capacity(2 * n + spec.imax.len());
    for j in 0..n {
        let mag = QuadraticForm::abs_sq(&ComplexAffine::bus_voltage(n, j));
        let mut f = mag.clone();
        f.constant -= spec.vmin[j] * spec.vmin[j];
        entries.push(Constraint {
            kind: ConstraintKind::VLow,
            owner: Owner::Bus(j + 1),
            form: f,
        });
    }
    for j in 0..n {
        let mut f = QuadraticForm::abs_sq(&ComplexAffine::bus_voltage(n, j)).scale(-1.0);
        f.constant += spec.vmax[j] * spec.vmax[j];
        entries.push(Constraint {
            kind: ConstraintKind::VUp,
            owner: Owner::Bus(j + 1),
            form: f,
        });
    }
    for (idx, row) in model.branch_rows().iter().enumerate() {
        entries.push(Constraint {
            kind: ConstraintKind::IBranchSec,
            owner: Owner::Branch {
                from: row.from,
                to: row.to,
            },
            form: QuadraticForm::disk(&ComplexAffine::branch_current(model, idx), spec.imax[idx]),
        });
    }
    ConstraintSet {
        dim: 2 * n,
        entries,
        aux_count: 0,
    }
}

pub fn aux_forms(model: &GridModel, aux: &AuxBounds) -> ConstraintSet {
    let n = model.n_pq();
    let mut entries = Vec::new();
    for (idx, row) in model.branch_rows().iter().enumerate() {
        entries.push(Constraint {
            kind: ConstraintKind::IBranchAux,
            owner: Owner::Branch {
                from: row.from,
                to: row.to,
            },
            form: QuadraticForm::disk(
                &ComplexAffine::branch_current(model, idx),
                aux.i_branch[idx],
            ),
        });
    }
    for j in 0..n {
        entries.push(Constraint {
            kind: ConstraintKind::INodeAux,
            owner: Owner::Bus(j + 1),
            form: QuadraticForm::disk(&ComplexAffine::nodal_current(model, j), aux.i_node[j]),
        });
    }
    let count = entries.len();
    ConstraintSet {
        dim: 2 * n,
        entries,
        aux_count: count,
    }
}

/// `Ṽ` block followed by the security block.
pub fn combine(aux: ConstraintSet, security: ConstraintSet) -> ConstraintSet {
    debug_assert_eq!(aux.dim, security.dim);
    let aux_count = aux.entries.len();
    let mut entries = aux.entries;
    entries.extend(security.entries);
    ConstraintSet {
        dim: aux.dim,
        entries,
        aux_count,
    }
}

pub fn eval_constraints(cs: &ConstraintSet, v: &DVector<Complex64>) -> Margins {
    let x = to_rect(v);
    let values: Vec<f64> = cs.entries.iter().map(|c| c.form.eval_rect(&x)).collect();
    let (argmin, min) = values
        .iter()
        .enumerate()
        .fold((None, f64::INFINITY), |(ai, am), (i, &m)| {
            if m < am {
                (Some(i), m)
            } else {
                (ai, am)
            }
        });
    Margins {
        values,
        min,
        argmin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, BranchSpec};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_line() -> GridModel {
        build_grid(&[BranchSpec::line(0, 1, c(1.0, 0.0), 0.0)], 1, c(1.0, 0.0)).unwrap()
    }

    fn v1(x: Complex64) -> DVector<Complex64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn vlow_values() {
        let m = unit_line();
        let spec = SecuritySpec::uniform(&m, 0.95, 1.05, 0.6);
        let cs = security_forms(&m, &spec);
        assert_eq!(cs.entries[0].kind, ConstraintKind::VLow);
        let val = cs.entries[0].form.eval(&v1(c(1.0, 0.0)));
        assert!((val - 0.0975).abs() < 1e-14);
        let on_bound = v1(Complex64::from_polar(0.95, 0.3));
        assert!(cs.entries[0].form.eval(&on_bound).abs() < 1e-14);
        let margins = eval_constraints(&cs, &on_bound);
        assert!(margins.min.abs() < 1e-14);
        assert!(!margins.strictly_inside(DEFAULT_MEMBERSHIP_TOL));
    }

    #[test]
    fn example_bounds_accepted() {
        let m = unit_line();
        let spec = SecuritySpec::uniform(&m, 0.95, 1.05, 0.6);
        assert!(spec.validate(&m).is_ok());
    }

    #[test]
    fn node_aux_values() {
        let m = unit_line();
        let spec = SecuritySpec::uniform(&m, 0.9, 1.1, 0.6);
        let aux = AuxBounds::new(&spec, 1.0, &[1.0], 0.4).unwrap();
        assert_eq!(aux.i_branch, vec![0.6, 0.6]);
        let cs = aux_forms(&m, &aux);
        let node = cs
            .entries
            .iter()
            .find(|e| e.kind == ConstraintKind::INodeAux)
            .unwrap();
        assert!((node.form.eval(&v1(c(1.0, 0.0))) - 0.16).abs() < 1e-14);
        assert!((node.form.eval(&v1(c(0.5, 0.0))) + 0.09).abs() < 1e-14);
    }

    #[test]
    fn empty_set_has_infinite_margin() {
        let m = eval_constraints(&ConstraintSet::empty(2), &v1(c(1.0, 0.0)));
        assert_eq!(m.min, f64::INFINITY);
        assert!(m.argmin.is_none());
    }

    #[test]
    fn aux_rejects_bad_beta() {
        let m = unit_line();
        let spec = SecuritySpec::uniform(&m, 0.9, 1.1, 0.6);
        assert!(AuxBounds::new(&spec, 0.0, &[1.0], 0.4).is_err());
        assert!(AuxBounds::new(&spec, 1.5, &[1.0], 0.4).is_err());
        assert!(AuxBounds::new(&spec, 1.0, &[1.0], -0.4).is_err());
    }

    #[test]
    fn security_file_forms() {
        let m = build_grid(
            &[
                BranchSpec::line(0, 1, c(1.0, -2.0), 0.0),
                BranchSpec::line(1, 2, c(1.0, -2.0), 0.0),
            ],
            2,
            c(1.0, 0.0),
        )
        .unwrap();
        let f = SecurityFile::from_json_str(
            r#"{"vmin":0.9,"vmax":[1.1,1.2],
                "imax":[{"from":0,"to":1,"value":0.5},{"from":2,"to":1,"value":0.7},
                        {"from":1,"to":2,"value":0.8}]}"#,
        )
        .unwrap();
        let spec = f.to_spec(&m).unwrap();
        assert_eq!(spec.vmin, vec![0.9, 0.9]);
        assert_eq!(spec.vmax, vec![1.1, 1.2]);
        // rows: 0->1, 1->0, 1->2, 2->1
        assert_eq!(spec.imax, vec![0.5, 0.5, 0.8, 0.7]);

        let bad = SecurityFile::from_json_str(r#"{"vmin":0.9,"vmax":1.1,"imax":1,"x":1}"#);
        assert!(bad.is_err());
        let inverted = SecurityFile::from_json_str(r#"{"vmin":1.2,"vmax":1.1,"imax":1}"#)
            .unwrap()
            .to_spec(&m);
        assert!(inverted.is_err());
    }
}
