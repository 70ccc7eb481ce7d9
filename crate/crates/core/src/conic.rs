//! Conic feasibility problems over nonnegative, second-order and PSD cones.
//!
//! A problem has the form
//!
//! ```text
//! minimize   cᵀx
//! subject to E x = f
//!            G x + h ∈ K = K_1 × … × K_p
//! ```
//!
//! PSD blocks are stored as scaled upper triangles (columnwise, off-diagonal
//! entries multiplied by √2) so that the Euclidean inner product of two
//! stored blocks equals the trace inner product of the matrices.
//!
//! Solving is delegated to Clarabel. Infeasibility is reported only together
//! with a Farkas certificate `(μ, z)`, `z ∈ K*`, with `Eᵀμ + Gᵀz = 0` and
//! `hᵀz - fᵀμ < 0`, which [`verify_infeasibility_certificate`] re-checks with
//! plain arithmetic before anything downstream may rely on it.

use std::fmt::Write as _;
use std::sync::Once;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

// Pulls in the system OpenBLAS/LAPACK needed by Clarabel's PSD cone.
use openblas_src as _;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("inconsistent problem data: {0}")]
    Dimension(String),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("malformed problem dump at line {line}: {reason}")]
    Dump { line: usize, reason: String },
}

/// Upper bound on any single dimension accepted from a dump file.
pub const MAX_DUMP_DIM: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    NonNegative(usize),
    SecondOrder(usize),
    /// Side length of the PSD matrix.
    Psd(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::NonNegative(n) | Cone::SecondOrder(n) => n,
            Cone::Psd(side) => side * (side + 1) / 2,
        }
    }

    /// Largest `t` such that `u - t·e` stays in the (self-dual) cone, where
    /// `e` is the cone's identity element. Negative means outside.
    pub fn margin(&self, u: &[f64]) -> f64 {
        match *self {
            Cone::NonNegative(_) => u.iter().copied().fold(f64::INFINITY, f64::min),
            Cone::SecondOrder(_) => {
                if u.is_empty() {
                    return f64::INFINITY;
                }
                let tail: f64 = u[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
                u[0] - tail
            }
            Cone::Psd(side) => {
                if side == 0 {
                    return f64::INFINITY;
                }
                let m = smat(side, u);
                SymmetricEigen::new(m).eigenvalues.min()
            }
        }
    }
}

/// Position of entry `(i, j)`, `i ≤ j`, inside a stored PSD block.
pub fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

pub fn svec_scale(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        std::f64::consts::SQRT_2
    }
}

pub fn smat(side: usize, u: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(side, side, |i, j| u[svec_index(i, j)] / svec_scale(i, j))
}

pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let side = m.nrows();
    let mut out = vec![0.0; side * (side + 1) / 2];
    for j in 0..side {
        for i in 0..=j {
            out[svec_index(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]) * svec_scale(i, j);
        }
    }
    out
}

/// Triplet-form sparse matrix with merged duplicates after [`SparseMatrix::compress`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    /// Sort column-major, merge duplicates and drop explicit zeros.
    pub fn compress(&mut self) {
        self.entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != 0.0);
        self.entries = merged;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn tr_mul_vec(&self, z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(r, c, v) in &self.entries {
            y[c] += v * z[r];
        }
        y
    }

    fn to_csc(&self, scale: f64) -> CscMatrix<f64> {
        let mut m = self.clone();
        m.compress();
        let mut colptr = vec![0usize; m.ncols + 1];
        for &(_, c, _) in &m.entries {
            colptr[c + 1] += 1;
        }
        for c in 0..m.ncols {
            colptr[c + 1] += colptr[c];
        }
        let rowval = m.entries.iter().map(|e| e.0).collect();
        let nzval = m.entries.iter().map(|e| e.2 * scale).collect();
        CscMatrix::new(m.nrows, m.ncols, colptr, rowval, nzval)
    }
}

/// Affine scalar expression `Σ coeff·x_col + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(col: usize) -> Self {
        Self {
            terms: vec![(col, 1.0)],
            constant: 0.0,
        }
    }

    pub fn from_dense(constant: f64, row: &[f64]) -> Self {
        Self {
            terms: row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
            constant,
        }
    }

    pub fn scaled(mut self, k: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= k;
        }
        self.constant *= k;
        self
    }

    pub fn plus(mut self, other: &AffineExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProblem {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub eq_matrix: SparseMatrix,
    pub eq_rhs: Vec<f64>,
    pub cone_matrix: SparseMatrix,
    pub cone_offset: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProblem {
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            objective: vec![0.0; n_vars],
            eq_matrix: SparseMatrix::new(0, n_vars),
            eq_rhs: Vec::new(),
            cone_matrix: SparseMatrix::new(0, n_vars),
            cone_offset: Vec::new(),
            cones: Vec::new(),
        }
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn n_cone_rows(&self) -> usize {
        self.cone_offset.len()
    }

    /// Adds `expr = 0`.
    pub fn add_equality(&mut self, expr: &AffineExpr) {
        let row = self.eq_rhs.len();
        for &(c, v) in &expr.terms {
            self.eq_matrix.entries.push((row, c, v));
        }
        self.eq_rhs.push(-expr.constant);
        self.eq_matrix.nrows += 1;
    }

    /// Adds `(rows[0], …, rows[d-1]) ∈ cone`.
    pub fn add_cone(&mut self, cone: Cone, rows: &[AffineExpr]) {
        assert_eq!(cone.dim(), rows.len(), "cone dimension mismatch");
        for expr in rows {
            let row = self.cone_offset.len();
            for &(c, v) in &expr.terms {
                self.cone_matrix.entries.push((row, c, v));
            }
            self.cone_offset.push(expr.constant);
            self.cone_matrix.nrows += 1;
        }
        self.cones.push(cone);
    }

    /// Adds a symmetric matrix expression `M ⪰ 0`; `entry(i, j)` is read for `i ≤ j`.
    pub fn add_psd<F>(&mut self, side: usize, mut entry: F)
    where
        F: FnMut(usize, usize) -> AffineExpr,
    {
        let mut rows = vec![AffineExpr::default(); side * (side + 1) / 2];
        for j in 0..side {
            for i in 0..=j {
                rows[svec_index(i, j)] = entry(i, j).scaled(svec_scale(i, j));
            }
        }
        self.add_cone(Cone::Psd(side), &rows);
    }

    pub fn compress(&mut self) {
        self.eq_matrix.compress();
        self.cone_matrix.compress();
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let dim = |m: String| Err(ConicError::Dimension(m));
        if self.objective.len() != self.n_vars {
            return dim("objective length differs from variable count".into());
        }
        if self.eq_matrix.ncols != self.n_vars || self.cone_matrix.ncols != self.n_vars {
            return dim("matrix column count differs from variable count".into());
        }
        if self.eq_matrix.nrows != self.eq_rhs.len() {
            return dim("equality rows differ from right-hand side length".into());
        }
        if self.cone_matrix.nrows != self.cone_offset.len() {
            return dim("cone rows differ from offset length".into());
        }
        let total: usize = self.cones.iter().map(Cone::dim).sum();
        if total != self.cone_offset.len() {
            return dim(format!(
                "cone dimensions sum to {total}, but there are {} cone rows",
                self.cone_offset.len()
            ));
        }
        for m in [&self.eq_matrix, &self.cone_matrix] {
            for &(r, c, v) in &m.entries {
                if r >= m.nrows || c >= m.ncols {
                    return dim(format!("entry ({r}, {c}) out of bounds"));
                }
                if !v.is_finite() {
                    return Err(ConicError::NonFinite("constraint matrix"));
                }
            }
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !finite(&self.objective) {
            return Err(ConicError::NonFinite("objective"));
        }
        if !finite(&self.eq_rhs) || !finite(&self.cone_offset) {
            return Err(ConicError::NonFinite("right-hand side"));
        }
        Ok(())
    }

    fn cone_slices<'a>(&'a self, u: &'a [f64]) -> impl Iterator<Item = (Cone, &'a [f64])> + 'a {
        let mut start = 0;
        self.cones.iter().map(move |&cone| {
            let d = cone.dim();
            let s = &u[start..start + d];
            start += d;
            (cone, s)
        })
    }

    /// Constraint residuals of a candidate point.
    pub fn check_point(&self, x: &[f64]) -> PointCheck {
        let ex = self.eq_matrix.mul_vec(x);
        let eq_residual = ex
            .iter()
            .zip(&self.eq_rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let gx = self.cone_matrix.mul_vec(x);
        let u: Vec<f64> = gx.iter().zip(&self.cone_offset).map(|(a, b)| a + b).collect();
        let cone_margins: Vec<f64> = self.cone_slices(&u).map(|(c, s)| c.margin(s)).collect();
        let min_cone_margin = cone_margins.iter().copied().fold(f64::INFINITY, f64::min);
        PointCheck {
            eq_residual,
            min_cone_margin,
            cone_margins,
        }
    }

    fn scale_of_data(&self) -> f64 {
        let mut s: f64 = 1.0;
        for m in [&self.eq_matrix, &self.cone_matrix] {
            for e in &m.entries {
                s = s.max(e.2.abs());
            }
        }
        for v in self.eq_rhs.iter().chain(&self.cone_offset) {
            s = s.max(v.abs());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCheck {
    pub eq_residual: f64,
    pub min_cone_margin: f64,
    pub cone_margins: Vec<f64>,
}

impl PointCheck {
    pub fn feasible(&self, tol: f64) -> bool {
        self.eq_residual <= tol && self.min_cone_margin >= -tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicOptions {
    pub feas_tol: f64,
    pub cert_tol: f64,
    pub max_iter: u32,
}

impl Default for ConicOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            cert_tol: 1e-7,
            max_iter: 200,
        }
    }
}

/// Farkas multipliers: `μ` for the equalities, `z ∈ K*` for the cone rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub eq_multipliers: Vec<f64>,
    pub cone_multipliers: Vec<f64>,
}

impl Certificate {
    pub fn norm(&self) -> f64 {
        self.eq_multipliers
            .iter()
            .chain(&self.cone_multipliers)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian bytes of all multipliers.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.eq_multipliers.iter().chain(&self.cone_multipliers) {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Result of re-checking a certificate, normalised so that `hᵀz - fᵀμ = -1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    pub farkas_value: f64,
    pub stationarity_residual: f64,
    pub dual_cone_margin: f64,
    /// Infeasibility holds at least on `{x : ‖x‖₁ < certified_radius}`.
    pub certified_radius: f64,
    pub passed: bool,
}

pub fn check_certificate(
    problem: &ConicProblem,
    cert: &Certificate,
    cert_tol: f64,
) -> CertificateCheck {
    let failed = CertificateCheck {
        farkas_value: f64::NAN,
        stationarity_residual: f64::INFINITY,
        dual_cone_margin: f64::NEG_INFINITY,
        certified_radius: 0.0,
        passed: false,
    };
    if cert.eq_multipliers.len() != problem.n_eq()
        || cert.cone_multipliers.len() != problem.n_cone_rows()
        || problem.validate().is_err()
    {
        return failed;
    }
    let all_finite = cert
        .eq_multipliers
        .iter()
        .chain(&cert.cone_multipliers)
        .all(|x| x.is_finite());
    if !all_finite {
        return failed;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let raw = dot(&problem.cone_offset, &cert.cone_multipliers)
        - dot(&problem.eq_rhs, &cert.eq_multipliers);
    if !(raw < 0.0) {
        return CertificateCheck {
            farkas_value: raw,
            ..failed
        };
    }
    let k = 1.0 / raw.abs();
    let mu: Vec<f64> = cert.eq_multipliers.iter().map(|x| x * k).collect();
    let z: Vec<f64> = cert.cone_multipliers.iter().map(|x| x * k).collect();

    let dual_cone_margin = problem
        .cone_slices(&z)
        .map(|(c, s)| c.margin(s))
        .fold(f64::INFINITY, f64::min);

    // Project z onto K* so the radius bound below is exact arithmetic on a
    // genuine dual-cone element.
    let z_proj = project_onto_cone(problem, &z);
    let shift = dot(&problem.cone_offset, &z_proj) - dot(&problem.eq_rhs, &mu);
    let et_mu = problem.eq_matrix.tr_mul_vec(&mu);
    let gt_z = problem.cone_matrix.tr_mul_vec(&z_proj);
    let stationarity_residual = et_mu
        .iter()
        .zip(&gt_z)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    let certified_radius = if shift < 0.0 {
        if stationarity_residual == 0.0 {
            f64::INFINITY
        } else {
            -shift / stationarity_residual
        }
    } else {
        0.0
    };
    let passed = stationarity_residual <= cert_tol && dual_cone_margin >= -cert_tol && shift < 0.0;
    CertificateCheck {
        farkas_value: -1.0,
        stationarity_residual,
        dual_cone_margin,
        certified_radius,
        passed,
    }
}

pub fn verify_infeasibility_certificate(
    problem: &ConicProblem,
    cert: &Certificate,
    cert_tol: f64,
) -> bool {
    check_certificate(problem, cert, cert_tol).passed
}

fn project_onto_cone(problem: &ConicProblem, z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for (cone, s) in problem.cone_slices(z) {
        match cone {
            Cone::NonNegative(_) => out.extend(s.iter().map(|x| x.max(0.0))),
            Cone::SecondOrder(_) => {
                if s.is_empty() {
                    continue;
                }
                let t = s[0];
                let tail: f64 = s[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
                if tail <= t {
                    out.extend_from_slice(s);
                } else if tail <= -t {
                    out.extend(std::iter::repeat(0.0).take(s.len()));
                } else {
                    let a = 0.5 * (t + tail);
                    out.push(a);
                    out.extend(s[1..].iter().map(|x| a * x / tail));
                }
            }
            Cone::Psd(side) => {
                let eig = SymmetricEigen::new(smat(side, s));
                if eig.eigenvalues.min() >= 0.0 {
                    out.extend_from_slice(s);
                    continue;
                }
                let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
                let m = &eig.eigenvectors * d * eig.eigenvectors.transpose();
                out.extend(svec(&m));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Feasible { x: Vec<f64>, objective: f64 },
    Infeasible(Certificate),
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SolveOutcome {
    fn unknown(reason: impl Into<String>) -> Self {
        Self {
            status: SolveStatus::Unknown(reason.into()),
            iterations: 0,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self.status, SolveStatus::Infeasible(_))
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self.status, SolveStatus::Feasible { .. })
    }
}

/// Repairs near-certificates: after normalising the Farkas value, alternates
/// projection of `z` onto `K*` with a minimum-change least-squares correction
/// of `(μ, z)` that drives `Eᵀμ + Gᵀz` to zero.
pub fn refine_certificate(problem: &ConicProblem, cert: &Certificate) -> Certificate {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let raw = dot(&problem.cone_offset, &cert.cone_multipliers) - dot(&problem.eq_rhs, &cert.eq_multipliers);
    let k = if raw < 0.0 && raw.is_finite() { 1.0 / -raw } else { 1.0 };
    let mut mu: Vec<f64> = cert.eq_multipliers.iter().map(|x| x * k).collect();
    let mut z: Vec<f64> = cert.cone_multipliers.iter().map(|x| x * k).collect();
    for _ in 0..REFINE_ROUNDS {
        z = project_onto_cone(problem, &z);
        least_change_stationarity(problem, &mut mu, &mut z);
    }
    Certificate {
        eq_multipliers: mu,
        cone_multipliers: z,
    }
}

const REFINE_ROUNDS: usize = 4;

/// Above this many variables the normal matrix is not formed.
const DENSE_REFINE_MAX_VARS: usize = 4000;

fn least_change_stationarity(problem: &ConicProblem, mu: &mut [f64], z: &mut [f64]) {
    if problem.n_vars <= DENSE_REFINE_MAX_VARS && dense_least_change(problem, mu, z) {
        return;
    }
    cgls_least_change(problem, mu, z);
}

/// Minimum-norm correction through a Cholesky factorisation of `EᵀE + GᵀG`.
fn dense_least_change(problem: &ConicProblem, mu: &mut [f64], z: &mut [f64]) -> bool {
    let n = problem.n_vars;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for mat in [&problem.eq_matrix, &problem.cone_matrix] {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); mat.nrows];
        for &(r, c, v) in &mat.entries {
            rows[r].push((c, v));
        }
        for row in &rows {
            for &(a, va) in row {
                for &(b, vb) in row {
                    m[(a, b)] += va * vb;
                }
            }
        }
    }
    let ridge = 1e-14 * (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max).max(1e-300);
    for i in 0..n {
        m[(i, i)] += ridge;
    }
    let Some(chol) = m.cholesky() else { return false };
    for _ in 0..3 {
        let ea = problem.eq_matrix.tr_mul_vec(mu);
        let gb = problem.cone_matrix.tr_mul_vec(z);
        let r = DVector::from_iterator(n, ea.iter().zip(&gb).map(|(x, y)| -(x + y)));
        let w = chol.solve(&r);
        if !w.iter().all(|x| x.is_finite()) {
            return false;
        }
        for (m, d) in mu.iter_mut().zip(problem.eq_matrix.mul_vec(w.as_slice())) {
            *m += d;
        }
        for (zi, d) in z.iter_mut().zip(problem.cone_matrix.mul_vec(w.as_slice())) {
            *zi += d;
        }
    }
    true
}

/// CGLS on `Eᵀδμ + Gᵀδz = -(Eᵀμ + Gᵀz)` from zero, which yields the
/// minimum-norm correction.
fn cgls_least_change(problem: &ConicProblem, mu: &mut [f64], z: &mut [f64]) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (e, g) = (&problem.eq_matrix, &problem.cone_matrix);
    let apply = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let ea = e.tr_mul_vec(a);
        let gb = g.tr_mul_vec(b);
        ea.iter().zip(&gb).map(|(x, y)| x + y).collect()
    };
    let apply_t = |w: &[f64]| -> (Vec<f64>, Vec<f64>) { (e.mul_vec(w), g.mul_vec(w)) };
    let mut r: Vec<f64> = apply(mu, z).iter().map(|x| -x).collect();
    let (mut s_mu, mut s_z) = apply_t(&r);
    let (mut p_mu, mut p_z) = (s_mu.clone(), s_z.clone());
    let mut gamma = dot(&s_mu, &s_mu) + dot(&s_z, &s_z);
    let stop = 1e-32 * gamma;
    for _ in 0..(4 * problem.n_vars).clamp(50, 4000) {
        if gamma <= stop || gamma == 0.0 {
            break;
        }
        let q = apply(&p_mu, &p_z);
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for (m, pi) in mu.iter_mut().zip(&p_mu) {
            *m += alpha * pi;
        }
        for (zi, pi) in z.iter_mut().zip(&p_z) {
            *zi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        (s_mu, s_z) = apply_t(&r);
        let next = dot(&s_mu, &s_mu) + dot(&s_z, &s_z);
        let beta = next / gamma;
        gamma = next;
        for (pi, si) in p_mu.iter_mut().zip(&s_mu) {
            *pi = si + beta * *pi;
        }
        for (pi, si) in p_z.iter_mut().zip(&s_z) {
            *pi = si + beta * *pi;
        }
    }
}

static BLAS_THREADS: Once = Once::new();

extern "C" {
    fn openblas_set_num_threads(n: std::os::raw::c_int);
}

fn single_threaded_blas() {
    // Parallelism happens across independent solves; nested BLAS threads
    // only oversubscribe the machine.
    BLAS_THREADS.call_once(|| unsafe { openblas_set_num_threads(1) });
}

pub fn solve(problem: &ConicProblem, opts: &ConicOptions) -> SolveOutcome {
    if let Err(e) = problem.validate() {
        return SolveOutcome::unknown(format!("invalid problem: {e}"));
    }
    single_threaded_blas();

    let n = problem.n_vars;
    let m_eq = problem.n_eq();
    // Clarabel form: A x + s = b, s ∈ K, with E x = f as a zero cone and
    // s = G x + h for the remaining rows.
    let mut a = SparseMatrix::new(m_eq + problem.n_cone_rows(), n);
    a.entries.extend(problem.eq_matrix.entries.iter().copied());
    a.entries.extend(
        problem
            .cone_matrix
            .entries
            .iter()
            .map(|&(r, c, v)| (r + m_eq, c, -v)),
    );
    let a = a.to_csc(1.0);
    let mut b = problem.eq_rhs.clone();
    b.extend_from_slice(&problem.cone_offset);

    let mut cones: Vec<SupportedConeT<f64>> = Vec::with_capacity(problem.cones.len() + 1);
    if m_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(m_eq));
    }
    for c in &problem.cones {
        match *c {
            Cone::NonNegative(0) | Cone::SecondOrder(0) | Cone::Psd(0) => {}
            Cone::NonNegative(d) => cones.push(SupportedConeT::NonnegativeConeT(d)),
            Cone::SecondOrder(1) => cones.push(SupportedConeT::NonnegativeConeT(1)),
            Cone::SecondOrder(d) => cones.push(SupportedConeT::SecondOrderConeT(d)),
            Cone::Psd(1) => cones.push(SupportedConeT::NonnegativeConeT(1)),
            Cone::Psd(side) => cones.push(SupportedConeT::PSDTriangleConeT(side)),
        }
    }

    let mut outcome = SolveOutcome::unknown(String::new());
    for &reg in &STATIC_REGULARIZATION {
        outcome = solve_attempt(problem, opts, &a, &b, &cones, reg);
        if !matches!(outcome.status, SolveStatus::Unknown(_)) {
            break;
        }
    }
    outcome
}

/// Static KKT regularisation per attempt; later entries are retries after a
/// run that ended without a usable answer.
const STATIC_REGULARIZATION: [f64; 2] = [1e-8, 1e-7];

fn solve_attempt(
    problem: &ConicProblem,
    opts: &ConicOptions,
    a: &CscMatrix<f64>,
    b: &[f64],
    cones: &[SupportedConeT<f64>],
    static_reg: f64,
) -> SolveOutcome {
    let n = problem.n_vars;
    let m_eq = problem.n_eq();
    let settings = DefaultSettings::<f64> {
        max_iter: opts.max_iter,
        tol_feas: opts.feas_tol,
        tol_gap_abs: opts.feas_tol,
        tol_gap_rel: opts.feas_tol,
        tol_infeas_abs: opts.feas_tol,
        tol_infeas_rel: opts.feas_tol,
        chordal_decomposition_enable: false,
        presolve_enable: false,
        max_threads: 1,
        direct_solve_method: "faer".into(),
        static_regularization_constant: static_reg,
        verbose: false,
        ..DefaultSettings::default()
    };
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut solver = match DefaultSolver::new(&p, &problem.objective, a, b, cones, settings) {
        Ok(s) => s,
        Err(e) => return SolveOutcome::unknown(format!("solver setup failed: {e:?}")),
    };
    solver.solve();
    let sol = &solver.solution;
    let base = SolveOutcome {
        status: SolveStatus::Unknown(String::new()),
        iterations: sol.iterations,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
    };
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let x = sol.x.clone();
            let check = problem.check_point(&x);
            let tol = opts.feas_tol.sqrt().min(1e-5) * problem.scale_of_data();
            if check.feasible(tol) {
                let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
                SolveStatus::Feasible { x, objective }
            } else {
                SolveStatus::Unknown(format!(
                    "solver point misses constraints (equality {:e}, cone {:e})",
                    check.eq_residual, check.min_cone_margin
                ))
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            match certificate_from_iterate(problem, &sol.z, m_eq, opts.cert_tol) {
                Ok(cert) => SolveStatus::Infeasible(cert),
                Err(check) => SolveStatus::Unknown(format!(
                    "infeasibility certificate rejected (stationarity {:e}, cone margin {:e})",
                    check.stationarity_residual, check.dual_cone_margin
                )),
            }
        }
        // A stalled run often ends on a dual ray; it only counts once verified.
        SolverStatus::NumericalError | SolverStatus::InsufficientProgress | SolverStatus::MaxIterations => {
            match certificate_from_iterate(problem, &sol.z, m_eq, opts.cert_tol) {
                Ok(cert) => SolveStatus::Infeasible(cert),
                Err(_) => SolveStatus::Unknown(format!("solver status {:?}", sol.status)),
            }
        }
        other => SolveStatus::Unknown(format!("solver status {other:?}")),
    };
    SolveOutcome { status, ..base }
}

/// Reads Farkas multipliers off the solver's dual iterate, refining them
/// when the raw vector does not verify.
fn certificate_from_iterate(
    problem: &ConicProblem,
    z: &[f64],
    m_eq: usize,
    cert_tol: f64,
) -> Result<Certificate, CertificateCheck> {
    let cert = Certificate {
        eq_multipliers: z[..m_eq].iter().map(|x| -x).collect(),
        cone_multipliers: z[m_eq..].to_vec(),
    };
    let check = check_certificate(problem, &cert, cert_tol);
    if check.passed {
        return Ok(cert);
    }
    let refined = refine_certificate(problem, &cert);
    if check_certificate(problem, &refined, cert_tol).passed {
        Ok(refined)
    } else {
        Err(check)
    }
}

impl ConicProblem {
    /// Text dump, one nonzero per line as `block row col value`.
    ///
    /// Header lines give `vars`, `eqs` and the cone list; blocks are
    /// `c` (objective, row 0), `E`/`f` (equality matrix / right-hand side,
    /// col 0), `G`/`h` (cone matrix / offset, col 0). Cone rows are numbered
    /// globally in cone order.
    pub fn to_dump(&self) -> String {
        let mut p = self.clone();
        p.compress();
        let mut out = String::from("conic-dump 1\n");
        let _ = writeln!(out, "vars {}", p.n_vars);
        let _ = writeln!(out, "eqs {}", p.n_eq());
        for c in &p.cones {
            let _ = match *c {
                Cone::NonNegative(d) => writeln!(out, "cone nonneg {d}"),
                Cone::SecondOrder(d) => writeln!(out, "cone soc {d}"),
                Cone::Psd(s) => writeln!(out, "cone psd {s}"),
            };
        }
        for (j, v) in p.objective.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(out, "c 0 {j} {v:e}");
            }
        }
        for &(r, c, v) in &p.eq_matrix.entries {
            let _ = writeln!(out, "E {r} {c} {v:e}");
        }
        for (r, v) in p.eq_rhs.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(out, "f {r} 0 {v:e}");
            }
        }
        for &(r, c, v) in &p.cone_matrix.entries {
            let _ = writeln!(out, "G {r} {c} {v:e}");
        }
        for (r, v) in p.cone_offset.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(out, "h {r} 0 {v:e}");
            }
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self, ConicError> {
        let err = |line: usize, reason: &str| ConicError::Dump {
            line,
            reason: reason.to_string(),
        };
        let parse_dim = |tok: Option<&str>, line: usize| -> Result<usize, ConicError> {
            let v: usize = tok
                .ok_or_else(|| err(line, "missing integer"))?
                .parse()
                .map_err(|_| err(line, "invalid integer"))?;
            if v > MAX_DUMP_DIM {
                return Err(err(line, "dimension too large"));
            }
            Ok(v)
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, "conic-dump 1")) => {}
            _ => return Err(err(1, "missing 'conic-dump 1' header")),
        }
        let mut n_vars = None;
        let mut n_eq = None;
        let mut cones = Vec::new();
        let mut body = Vec::new();
        for (ln, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("vars") if body.is_empty() => n_vars = Some(parse_dim(toks.next(), ln)?),
                Some("eqs") if body.is_empty() => n_eq = Some(parse_dim(toks.next(), ln)?),
                Some("cone") if body.is_empty() => {
                    let kind = toks.next();
                    let d = parse_dim(toks.next(), ln)?;
                    cones.push(match kind {
                        Some("nonneg") => Cone::NonNegative(d),
                        Some("soc") => Cone::SecondOrder(d),
                        Some("psd") if d <= 2048 => Cone::Psd(d),
                        Some("psd") => return Err(err(ln, "psd side too large")),
                        _ => return Err(err(ln, "unknown cone kind")),
                    });
                }
                Some(_) => body.push((ln, line)),
                None => {}
            }
            if toks.next().is_some() && body.last().map(|b| b.0) != Some(ln) {
                return Err(err(ln, "trailing tokens"));
            }
        }
        let n_vars = n_vars.ok_or_else(|| err(1, "missing 'vars' line"))?;
        let n_eq = n_eq.ok_or_else(|| err(1, "missing 'eqs' line"))?;
        let n_cone: usize = cones.iter().map(Cone::dim).sum();
        if n_cone > MAX_DUMP_DIM {
            return Err(err(1, "cone rows exceed limit"));
        }
        let mut p = ConicProblem::new(n_vars);
        p.eq_matrix.nrows = n_eq;
        p.eq_rhs = vec![0.0; n_eq];
        p.cone_matrix.nrows = n_cone;
        p.cone_offset = vec![0.0; n_cone];
        p.cones = cones;
        for (ln, line) in body {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(err(ln, "expected 'block row col value'"));
            }
            let r: usize = toks[1].parse().map_err(|_| err(ln, "invalid row"))?;
            let c: usize = toks[2].parse().map_err(|_| err(ln, "invalid column"))?;
            let v: f64 = toks[3].parse().map_err(|_| err(ln, "invalid value"))?;
            if !v.is_finite() {
                return Err(err(ln, "non-finite value"));
            }
            let (rows, cols) = match toks[0] {
                "c" => (1, n_vars),
                "E" => (n_eq, n_vars),
                "G" => (n_cone, n_vars),
                "f" => (n_eq, 1),
                "h" => (n_cone, 1),
                _ => return Err(err(ln, "unknown block")),
            };
            if r >= rows || c >= cols {
                return Err(err(ln, "index out of range"));
            }
            match toks[0] {
                "c" => p.objective[c] += v,
                "E" => p.eq_matrix.entries.push((r, c, v)),
                "G" => p.cone_matrix.entries.push((r, c, v)),
                "f" => p.eq_rhs[r] += v,
                _ => p.cone_offset[r] += v,
            }
        }
        p.compress();
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> AffineExpr {
        AffineExpr::var(0)
    }

    #[test]
    fn lp_feasible_objective() {
        let mut p = ConicProblem::new(1);
        p.objective = vec![1.0];
        p.add_cone(Cone::NonNegative(1), &[x().plus(&AffineExpr::constant(-1.0))]);
        let out = solve(&p, &ConicOptions::default());
        match out.status {
            SolveStatus::Feasible { objective, .. } => assert!((objective - 1.0).abs() < 1e-6),
            s => panic!("unexpected {s:?}"),
        }
    }

    fn farkas_pair() -> ConicProblem {
        let mut p = ConicProblem::new(1);
        p.add_cone(
            Cone::NonNegative(2),
            &[x().plus(&AffineExpr::constant(-1.0)), x().scaled(-1.0)],
        );
        p
    }

    #[test]
    fn lp_infeasible_with_certificate() {
        let p = farkas_pair();
        let out = solve(&p, &ConicOptions::default());
        let SolveStatus::Infeasible(cert) = out.status else {
            panic!("expected infeasible, got {:?}", out.status)
        };
        assert!(verify_infeasibility_certificate(&p, &cert, 1e-7));
        assert!(cert.cone_multipliers.iter().all(|z| *z > 0.0));
    }

    #[test]
    fn certificate_rejections() {
        let p = farkas_pair();
        let exact = Certificate {
            eq_multipliers: vec![],
            cone_multipliers: vec![1.0, 1.0],
        };
        assert!(verify_infeasibility_certificate(&p, &exact, 1e-7));
        let zero = Certificate {
            eq_multipliers: vec![],
            cone_multipliers: vec![0.0, 0.0],
        };
        assert!(!verify_infeasibility_certificate(&p, &zero, 1e-7));
        let flipped = Certificate {
            eq_multipliers: vec![],
            cone_multipliers: vec![1.0, -1.0],
        };
        assert!(!verify_infeasibility_certificate(&p, &flipped, 1e-7));
        let short = Certificate {
            eq_multipliers: vec![],
            cone_multipliers: vec![1.0],
        };
        assert!(!verify_infeasibility_certificate(&p, &short, 1e-7));
    }

    #[test]
    fn psd_with_negative_diagonal_is_infeasible() {
        let mut p = ConicProblem::new(1);
        p.add_psd(2, |i, j| match (i, j) {
            (0, 0) => AffineExpr::constant(1.0),
            (1, 1) => AffineExpr::constant(-1.0),
            _ => x(),
        });
        let out = solve(&p, &ConicOptions::default());
        let SolveStatus::Infeasible(cert) = out.status else {
            panic!("expected infeasible, got {:?}", out.status)
        };
        let chk = check_certificate(&p, &cert, 1e-7);
        assert!(chk.passed);
        assert!(chk.certified_radius > 1e6);
    }

    #[test]
    fn equality_certificate() {
        // x = 1 and x = 2
        let mut p = ConicProblem::new(1);
        p.add_equality(&x().plus(&AffineExpr::constant(-1.0)));
        p.add_equality(&x().plus(&AffineExpr::constant(-2.0)));
        let out = solve(&p, &ConicOptions::default());
        match &out.status {
            SolveStatus::Infeasible(cert) => assert!(verify_infeasibility_certificate(&p, cert, 1e-7)),
            // Clarabel may not resolve inconsistent equalities; never a false Feasible.
            SolveStatus::Unknown(_) => {}
            s => panic!("unexpected {s:?}"),
        }
        let exact = Certificate {
            eq_multipliers: vec![-1.0, 1.0],
            cone_multipliers: vec![],
        };
        assert!(verify_infeasibility_certificate(&p, &exact, 1e-7));
    }

    #[test]
    fn soc_infeasible() {
        // ‖(x, 1)‖ ≤ 0.5
        let mut p = ConicProblem::new(1);
        p.add_cone(
            Cone::SecondOrder(3),
            &[AffineExpr::constant(0.5), x(), AffineExpr::constant(1.0)],
        );
        let out = solve(&p, &ConicOptions::default());
        let SolveStatus::Infeasible(cert) = out.status else {
            panic!("expected infeasible, got {:?}", out.status)
        };
        assert!(verify_infeasibility_certificate(&p, &cert, 1e-7));
    }

    #[test]
    fn svec_roundtrip_and_margins() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.3, 0.1, -0.3, 3.0]);
        let s = svec(&m);
        assert!((smat(3, &s) - &m).amax() < 1e-15);
        let eig = SymmetricEigen::new(m).eigenvalues.min();
        assert!((Cone::Psd(3).margin(&s) - eig).abs() < 1e-12);
        assert_eq!(Cone::SecondOrder(3).margin(&[5.0, 3.0, 4.0]), 0.0);
    }

    #[test]
    fn dump_roundtrip() {
        let mut p = farkas_pair();
        p.add_equality(&x().scaled(2.0).plus(&AffineExpr::constant(-0.25)));
        p.objective = vec![3.5];
        p.add_psd(2, |i, j| if i == j { x() } else { AffineExpr::constant(0.3) });
        let text = p.to_dump();
        let q = ConicProblem::from_dump(&text).unwrap();
        let mut pc = p.clone();
        pc.compress();
        assert_eq!(pc, q);
    }

    #[test]
    fn dump_rejects_garbage() {
        assert!(ConicProblem::from_dump("").is_err());
        assert!(ConicProblem::from_dump("conic-dump 1\nvars 1\neqs 0\nG 0 0 1\n").is_err());
        assert!(ConicProblem::from_dump("conic-dump 1\nvars 99999999999\neqs 0\n").is_err());
        assert!(ConicProblem::from_dump("conic-dump 1\nvars 1\neqs 1\nE 0 0 nan\n").is_err());
    }
}
