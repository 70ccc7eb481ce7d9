//! Network data for a single-phase grid with one slack bus and `N` PQ buses.
//!
//! Bus `0` is the slack bus; PQ buses are numbered `1..=N` in input files and
//! stored at vector position `j - 1`. Branches follow the π-model: a series
//! admittance with half of the total shunt susceptance at each end, optionally
//! behind an ideal transformer on the sending side.

use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold on the smallest singular value of `Y_LL`.
pub const SINGULARITY_TOL: f64 = 1e-9;

/// Dense matrices are used throughout; larger grids are rejected up front.
pub const MAX_PQ_BUSES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("bus {bus} is not connected to the slack bus")]
    DisconnectedNetwork { bus: usize },
    #[error("Y_LL is singular (smallest singular value {sigma_min:e}, largest {sigma_max:e})")]
    SingularYLL { sigma_min: f64, sigma_max: f64 },
    #[error("duplicate branch between buses {from} and {to}")]
    DuplicateBranch { from: usize, to: usize },
    #[error("branch {index}: {reason}")]
    InvalidBranch { index: usize, reason: String },
    #[error("grid must have between 1 and {MAX_PQ_BUSES} PQ buses, got {0}")]
    BadBusCount(usize),
    #[error("slack voltage must be finite and nonzero")]
    InvalidSlackVoltage,
    #[error("unknown branch {from}->{to}")]
    UnknownBranch { from: usize, to: usize },
    #[error("malformed grid file: {0}")]
    Parse(String),
}

/// Rectangular complex number as it appears in input and report files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl ComplexValue {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

impl From<ComplexValue> for Complex64 {
    fn from(c: ComplexValue) -> Self {
        Complex64::new(c.re, c.im)
    }
}

impl From<Complex64> for ComplexValue {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub from: usize,
    pub to: usize,
    pub y_series: ComplexValue,
    /// Total line charging susceptance; half is placed at each end.
    #[serde(default)]
    pub b_shunt: f64,
    /// Ideal transformer ratio on the `from` side (`from` voltage is divided by it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<f64>,
}

impl BranchSpec {
    pub fn line(from: usize, to: usize, y_series: Complex64, b_shunt: f64) -> Self {
        Self {
            from,
            to,
            y_series: y_series.into(),
            b_shunt,
            tap: None,
        }
    }
}

/// On-disk grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub n_pq: usize,
    pub slack_voltage: ComplexValue,
    pub branches: Vec<BranchSpec>,
}

impl GridFile {
    pub fn from_json_str(s: &str) -> Result<Self, GridError> {
        serde_json::from_str(s).map_err(|e| GridError::Parse(e.to_string()))
    }

    pub fn build(&self) -> Result<GridModel, GridError> {
        build_grid(&self.branches, self.n_pq, self.slack_voltage.into())
    }
}

/// Coefficients of one directed branch current `i_jk = a_jk v0 + c_jk^T v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRow {
    pub from: usize,
    pub to: usize,
    pub a: Complex64,
    pub c: DVector<Complex64>,
}

#[derive(Debug, Clone)]
pub struct GridModel {
    n_pq: usize,
    v0: Complex64,
    y: DMatrix<Complex64>,
    y_ll: DMatrix<Complex64>,
    y_l0: DVector<Complex64>,
    y_ll_inv: DMatrix<Complex64>,
    w: DVector<Complex64>,
    branch_rows: Vec<BranchRow>,
    branches: Vec<BranchSpec>,
}

/// Current contributions `(p, q)` such that the current leaving `from`
/// is `p_from v_from + q_from v_to` and the one leaving `to` is
/// `p_to v_to + q_to v_from`.
struct PiStamp {
    self_from: Complex64,
    mutual_from: Complex64,
    self_to: Complex64,
    mutual_to: Complex64,
}

fn pi_stamp(b: &BranchSpec) -> PiStamp {
    let y: Complex64 = b.y_series.into();
    let half_shunt = Complex64::new(0.0, b.b_shunt / 2.0);
    let tau = b.tap.unwrap_or(1.0);
    PiStamp {
        self_from: y / (tau * tau) + half_shunt,
        mutual_from: -y / tau,
        self_to: y + half_shunt,
        mutual_to: -y / tau,
    }
}

fn validate_branch(index: usize, b: &BranchSpec, n_pq: usize) -> Result<(), GridError> {
    let invalid = |reason: &str| {
        Err(GridError::InvalidBranch {
            index,
            reason: reason.to_string(),
        })
    };
    if b.from > n_pq || b.to > n_pq {
        return invalid("bus index out of range");
    }
    if b.from == b.to {
        return invalid("from and to buses coincide");
    }
    if !b.y_series.is_finite() || (b.y_series.re == 0.0 && b.y_series.im == 0.0) {
        return invalid("series admittance must be finite and nonzero");
    }
    if !b.b_shunt.is_finite() || b.b_shunt < 0.0 {
        return invalid("shunt susceptance must be finite and nonnegative");
    }
    if let Some(t) = b.tap {
        if !t.is_finite() || t <= 0.0 {
            return invalid("tap ratio must be finite and positive");
        }
    }
    Ok(())
}

fn check_connected(branches: &[BranchSpec], n_pq: usize) -> Result<(), GridError> {
    let mut adj = vec![Vec::new(); n_pq + 1];
    for b in branches {
        adj[b.from].push(b.to);
        adj[b.to].push(b.from);
    }
    let mut seen = vec![false; n_pq + 1];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &k in &adj[u] {
            if !seen[k] {
                seen[k] = true;
                queue.push_back(k);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(bus) => Err(GridError::DisconnectedNetwork { bus }),
        None => Ok(()),
    }
}

pub fn build_grid(
    branches: &[BranchSpec],
    n_pq: usize,
    v0: Complex64,
) -> Result<GridModel, GridError> {
    if n_pq == 0 || n_pq > MAX_PQ_BUSES {
        return Err(GridError::BadBusCount(n_pq));
    }
    if !(v0.re.is_finite() && v0.im.is_finite()) || v0.norm() == 0.0 {
        return Err(GridError::InvalidSlackVoltage);
    }
    let mut pairs = HashSet::new();
    for (i, b) in branches.iter().enumerate() {
        validate_branch(i, b, n_pq)?;
        let key = (b.from.min(b.to), b.from.max(b.to));
        if !pairs.insert(key) {
            return Err(GridError::DuplicateBranch {
                from: b.from,
                to: b.to,
            });
        }
    }
    check_connected(branches, n_pq)?;

    let nb = n_pq + 1;
    let zero = Complex64::new(0.0, 0.0);
    let mut y = DMatrix::from_element(nb, nb, zero);
    let mut branch_rows = Vec::with_capacity(2 * branches.len());
    for b in branches {
        let st = pi_stamp(b);
        let (f, t) = (b.from, b.to);
        y[(f, f)] += st.self_from;
        y[(f, t)] += st.mutual_from;
        y[(t, t)] += st.self_to;
        y[(t, f)] += st.mutual_to;
        branch_rows.push(directed_row(f, t, st.self_from, st.mutual_from, n_pq));
        branch_rows.push(directed_row(t, f, st.self_to, st.mutual_to, n_pq));
    }

    let y_ll = y.view((1, 1), (n_pq, n_pq)).into_owned();
    let y_l0 = y.view((1, 0), (n_pq, 1)).column(0).into_owned();

    let sv = y_ll.clone().singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    if !(sigma_min > SINGULARITY_TOL * sigma_max) {
        return Err(GridError::SingularYLL {
            sigma_min,
            sigma_max,
        });
    }
    let y_ll_inv = y_ll
        .clone()
        .try_inverse()
        .ok_or(GridError::SingularYLL {
            sigma_min,
            sigma_max,
        })?;
    let w = -(&y_ll_inv * &y_l0) * v0;

    Ok(GridModel {
        n_pq,
        v0,
        y,
        y_ll,
        y_l0,
        y_ll_inv,
        w,
        branch_rows,
        branches: branches.to_vec(),
    })
}

fn directed_row(
    from: usize,
    to: usize,
    self_coeff: Complex64,
    mutual_coeff: Complex64,
    n_pq: usize,
) -> BranchRow {
    let mut a = Complex64::new(0.0, 0.0);
    let mut c = DVector::from_element(n_pq, Complex64::new(0.0, 0.0));
    for (bus, coeff) in [(from, self_coeff), (to, mutual_coeff)] {
        if bus == 0 {
            a += coeff;
        } else {
            c[bus - 1] += coeff;
        }
    }
    BranchRow { from, to, a, c }
}

impl GridModel {
    /// Number of PQ buses `N`.
    pub fn n_pq(&self) -> usize {
        self.n_pq
    }

    pub fn slack_voltage(&self) -> Complex64 {
        self.v0
    }

    /// Full `(N+1)×(N+1)` admittance matrix, slack bus first.
    pub fn y(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    pub fn y_ll(&self) -> &DMatrix<Complex64> {
        &self.y_ll
    }

    pub fn y_l0(&self) -> &DVector<Complex64> {
        &self.y_l0
    }

    pub fn y_ll_inv(&self) -> &DMatrix<Complex64> {
        &self.y_ll_inv
    }

    /// Zero-load voltages.
    pub fn w(&self) -> &DVector<Complex64> {
        &self.w
    }

    /// Directed branch rows in `E` order: for each input branch, `from→to` then `to→from`.
    pub fn branch_rows(&self) -> &[BranchRow] {
        &self.branch_rows
    }

    pub fn branches(&self) -> &[BranchSpec] {
        &self.branches
    }

    pub fn to_file(&self) -> GridFile {
        GridFile {
            n_pq: self.n_pq,
            slack_voltage: self.v0.into(),
            branches: self.branches.clone(),
        }
    }

    pub fn branch_current_coeffs(
        &self,
        from: usize,
        to: usize,
    ) -> Result<(Complex64, &DVector<Complex64>), GridError> {
        self.branch_rows
            .iter()
            .find(|r| r.from == from && r.to == to)
            .map(|r| (r.a, &r.c))
            .ok_or(GridError::UnknownBranch { from, to })
    }

    /// Nodal current injections at the PQ buses, `i = Y_LL (v - w)`.
    pub fn nodal_currents(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        &self.y_ll * (v - &self.w)
    }

    pub fn branch_current(&self, row: &BranchRow, v: &DVector<Complex64>) -> Complex64 {
        row.a * self.v0 + row.c.dot(v)
    }

    /// PQ-bus neighbours of each PQ bus (indices `0..N`), from the `Y_LL` pattern.
    pub fn pq_neighbours(&self) -> Vec<Vec<usize>> {
        (0..self.n_pq)
            .map(|j| {
                (0..self.n_pq)
                    .filter(|&k| k != j && self.y_ll[(j, k)].norm() > 0.0)
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus(y: Complex64, b: f64) -> GridModel {
        build_grid(&[BranchSpec::line(0, 1, y, b)], 1, c(1.0, 0.0)).unwrap()
    }

    #[test]
    fn shunt_free_line_has_unit_zero_load_voltage() {
        let m = two_bus(c(1.0, -1.0), 0.0);
        assert!(close(m.w()[0], c(1.0, 0.0), 1e-14));
    }

    #[test]
    fn example_line_admittance() {
        let m = two_bus(c(5.0, -3.6), 0.0);
        assert!(close(m.y_ll()[(0, 0)], c(5.0, -3.6), 1e-14));
        assert!(close(m.w()[0], c(1.0, 0.0), 1e-14));
    }

    #[test]
    fn shunt_shifts_zero_load_voltage() {
        let m = two_bus(c(1.0, 0.0), 0.2);
        assert!(close(m.y_ll()[(0, 0)], c(1.0, 0.1), 1e-14));
        let expected = c(1.0, 0.0) / c(1.0, 0.1);
        assert!(close(m.w()[0], expected, 1e-14));
        assert!(close(m.w()[0], c(0.990099, -0.0990099), 1e-6));
    }

    #[test]
    fn branch_coefficients_two_bus() {
        let m = two_bus(c(1.0, 0.0), 0.0);
        let (a, cv) = m.branch_current_coeffs(0, 1).unwrap();
        assert!(close(a, c(1.0, 0.0), 1e-15));
        assert!(close(cv[0], c(-1.0, 0.0), 1e-15));
        let (a, cv) = m.branch_current_coeffs(1, 0).unwrap();
        assert!(close(a, c(-1.0, 0.0), 1e-15));
        assert!(close(cv[0], c(1.0, 0.0), 1e-15));

        let m = two_bus(c(1.0, 0.0), 0.2);
        let (a, cv) = m.branch_current_coeffs(0, 1).unwrap();
        assert!(close(a, c(1.0, 0.1), 1e-15));
        assert!(close(cv[0], c(-1.0, 0.0), 1e-15));
    }

    #[test]
    fn unknown_branch() {
        let m = two_bus(c(1.0, 0.0), 0.0);
        assert_eq!(
            m.branch_current_coeffs(1, 1).unwrap_err(),
            GridError::UnknownBranch { from: 1, to: 1 }
        );
    }

    #[test]
    fn rejects_disconnected_and_duplicate() {
        let err = build_grid(
            &[BranchSpec::line(0, 1, c(1.0, 0.0), 0.0)],
            2,
            c(1.0, 0.0),
        )
        .unwrap_err();
        assert_eq!(err, GridError::DisconnectedNetwork { bus: 2 });

        let err = build_grid(
            &[
                BranchSpec::line(0, 1, c(1.0, 0.0), 0.0),
                BranchSpec::line(1, 0, c(2.0, 0.0), 0.0),
            ],
            1,
            c(1.0, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::DuplicateBranch { .. }));
    }

    #[test]
    fn rejects_singular_yll() {
        // det Y_LL = y01*y02 + y01*y12 + y02*y12 = 1 - 0.5 - 0.5 = 0
        let err = build_grid(
            &[
                BranchSpec::line(0, 1, c(1.0, 0.0), 0.0),
                BranchSpec::line(0, 2, c(1.0, 0.0), 0.0),
                BranchSpec::line(1, 2, c(-0.5, 0.0), 0.0),
            ],
            2,
            c(1.0, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::SingularYLL { .. }));
    }

    #[test]
    fn rejects_bad_branch_fields() {
        for b in [
            BranchSpec::line(1, 1, c(1.0, 0.0), 0.0),
            BranchSpec::line(0, 3, c(1.0, 0.0), 0.0),
            BranchSpec::line(0, 1, c(0.0, 0.0), 0.0),
            BranchSpec::line(0, 1, c(1.0, 0.0), -0.1),
        ] {
            let err = build_grid(&[b], 1, c(1.0, 0.0)).unwrap_err();
            assert!(matches!(err, GridError::InvalidBranch { .. }), "{err:?}");
        }
    }

    #[test]
    fn grid_file_rejects_unknown_fields() {
        let ok = r#"{"n_pq":1,"slack_voltage":{"re":1,"im":0},
            "branches":[{"from":0,"to":1,"y_series":{"re":1,"im":-1},"b_shunt":0}]}"#;
        assert!(GridFile::from_json_str(ok).unwrap().build().is_ok());
        let bad = r#"{"n_pq":1,"slack_voltage":{"re":1,"im":0},"extra":3,
            "branches":[{"from":0,"to":1,"y_series":{"re":1,"im":-1},"b_shunt":0}]}"#;
        assert!(matches!(
            GridFile::from_json_str(bad),
            Err(GridError::Parse(_))
        ));
    }

    #[test]
    fn off_nominal_tap_is_accepted() {
        let mut b = BranchSpec::line(0, 1, c(2.0, -4.0), 0.0);
        b.tap = Some(1.05);
        let m = build_grid(&[b, BranchSpec::line(1, 2, c(1.0, -3.0), 0.1)], 2, c(1.0, 0.0))
            .unwrap();
        let i = m.nodal_currents(m.w());
        assert!(i.iter().all(|x| x.norm() < 1e-12));
    }
}
