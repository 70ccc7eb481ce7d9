//! Boundary programs `P0(ℓ)` and their sparse moment relaxations.
//!
//! `P0(ℓ)` asks for a voltage on the `ℓ`-th boundary piece of `V` (all other
//! constraints satisfied) whose power image lies in the uncertainty set.
//! Infeasibility of its moment relaxation at some order proves there is none.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chordal::{correlative_sparsity, CliqueStructure};
use crate::conic::{self, AffineExpr, Certificate, ConicOptions, ConicProblem, SolveStatus};
use crate::constraints::{ComplexAffine, ConstraintKind, ConstraintSet, Owner, QuadraticForm};
use crate::grid::GridModel;
use crate::load_flow::to_rect;
use crate::poly::{monomial_basis, Monomial, PolynomialProgram, SparsePolynomial};
use crate::uncertainty::{HalfPlane, PowerRegion, UncertaintySet};

pub const DEFAULT_ORDER: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("constraint index {ell} outside 1..={len}")]
    InvalidEll { ell: usize, len: usize },
    #[error("uncertainty set covers {got} buses, grid has {expected} PQ buses")]
    Dimension { expected: usize, got: usize },
    #[error("relaxation order {omega} is below the required {required}")]
    OrderTooLow { omega: u32, required: u32 },
}

/// `(Re F_j, Im F_j)` as quadratic forms in `x = (Re v, Im v)`.
pub fn power_forms(model: &GridModel, j: usize) -> (QuadraticForm, QuadraticForm) {
    let n = model.n_pq();
    let i = ComplexAffine::nodal_current(model, j);
    let (cr, gr) = i.real_part();
    let (ci, gi) = i.imag_part();
    let e = |k: usize| {
        let mut d = DVector::zeros(2 * n);
        d[k] = 1.0;
        d
    };
    let (vr, vi) = (e(j), e(n + j));
    // v·conj(i) = (Re v Re i + Im v Im i) + j(Im v Re i − Re v Im i)
    let re = QuadraticForm::product(0.0, &vr, cr, &gr).add(&QuadraticForm::product(0.0, &vi, ci, &gi));
    let im = QuadraticForm::product(0.0, &vi, cr, &gr)
        .add(&QuadraticForm::product(0.0, &vr, ci, &gi).scale(-1.0));
    (re, im)
}

/// Splits half-planes into inequalities and equalities, turning each pair
/// of opposite half-planes with touching offsets into one equality.
fn split_half_planes(hs: &[HalfPlane]) -> (Vec<HalfPlane>, Vec<HalfPlane>) {
    let unit = |h: &HalfPlane| {
        let r = h.alpha.hypot(h.beta);
        HalfPlane::new(h.alpha / r, h.beta / r, h.gamma / r)
    };
    let mut used = vec![false; hs.len()];
    let mut eqs = Vec::new();
    for a in 0..hs.len() {
        if used[a] {
            continue;
        }
        for b in (a + 1)..hs.len() {
            if used[b] {
                continue;
            }
            let (ua, ub) = (unit(&hs[a]), unit(&hs[b]));
            let opposite = (ua.alpha + ub.alpha).abs() <= 1e-12 && (ua.beta + ub.beta).abs() <= 1e-12;
            if opposite && (ua.gamma + ub.gamma).abs() <= 1e-12 {
                used[a] = true;
                used[b] = true;
                eqs.push(ua);
                break;
            }
        }
    }
    let ineqs = hs.iter().zip(&used).filter(|(_, u)| !**u).map(|(h, _)| *h).collect();
    (ineqs, eqs)
}

/// `ell` is 1-based into `constraint_set`.
pub fn formulate_p0(
    model: &GridModel,
    constraint_set: &ConstraintSet,
    ell: usize,
    uncertainty: &UncertaintySet,
) -> Result<PolynomialProgram, MomentError> {
    let n = model.n_pq();
    let len = constraint_set.len();
    if ell == 0 || ell > len {
        return Err(MomentError::InvalidEll { ell, len });
    }
    if uncertainty.n_buses() != n {
        return Err(MomentError::Dimension {
            expected: n,
            got: uncertainty.n_buses(),
        });
    }
    let m = 2 * n;
    let mut prog = PolynomialProgram::new(m, SparsePolynomial::linear(0.0, &vec![1.0; m]));
    for (k, c) in constraint_set.entries.iter().enumerate() {
        let f = SparsePolynomial::from_quadratic(&c.form);
        if k + 1 == ell {
            prog.equalities.push(f);
        } else {
            prog.inequalities.push(f);
        }
    }
    for (j, region) in uncertainty.regions.iter().enumerate() {
        let (re, im) = power_forms(model, j);
        let (pre, pim) = (SparsePolynomial::from_quadratic(&re), SparsePolynomial::from_quadratic(&im));
        let affine = |h: &HalfPlane| {
            pre.scale(h.alpha)
                .add(&pim.scale(h.beta))
                .add(&SparsePolynomial::constant(m, -h.gamma))
        };
        match region {
            PowerRegion::Point(p) => {
                let s = Complex64::from(*p);
                prog.equalities.push(pre.add(&SparsePolynomial::constant(m, -s.re)));
                prog.equalities.push(pim.add(&SparsePolynomial::constant(m, -s.im)));
            }
            PowerRegion::HalfPlanes(hs) => {
                let (ineqs, eqs) = split_half_planes(hs);
                for h in &ineqs {
                    prog.inequalities.push(affine(h).scale(-1.0));
                }
                for h in &eqs {
                    prog.equalities.push(affine(h));
                }
            }
        }
    }
    Ok(prog)
}

fn half_degree(f: &SparsePolynomial) -> u32 {
    f.degree().div_ceil(2)
}

/// Smallest admissible relaxation order for `program`.
pub fn min_order(program: &PolynomialProgram) -> u32 {
    program
        .inequalities
        .iter()
        .chain(&program.equalities)
        .chain(std::iter::once(&program.objective))
        .map(half_degree)
        .max()
        .unwrap_or(0)
        .max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSdp {
    pub omega: u32,
    /// Lifted variables `y_α`, in monomial order; `monomials[0]` is `1`.
    pub monomials: Vec<Monomial>,
    pub moment_sides: Vec<usize>,
    pub localizing_sides: Vec<usize>,
    pub equality_rows: usize,
    pub problem: ConicProblem,
}

impl MomentSdp {
    pub fn n_vars(&self) -> usize {
        self.monomials.len()
    }
}

/// Lifts `f·m` into `Σ c·y_(α+m)`.
fn lift(f: &SparsePolynomial, m: &Monomial, index: &HashMap<Monomial, usize>) -> AffineExpr {
    AffineExpr {
        terms: f
            .terms()
            .map(|(a, c)| (index[&a.mul(m)], c))
            .collect(),
        constant: 0.0,
    }
}

/// Positive rescaling to unit largest coefficient; feasibility is unchanged.
fn normalized(f: &SparsePolynomial) -> SparsePolynomial {
    let m = f.max_abs_coeff();
    if m > 0.0 {
        f.scale(1.0 / m)
    } else {
        f.clone()
    }
}

pub fn build_moment_sdp(
    program: &PolynomialProgram,
    cliques: &CliqueStructure,
    omega: u32,
) -> Result<MomentSdp, MomentError> {
    let required = min_order(program);
    if omega < required {
        return Err(MomentError::OrderTooLow { omega, required });
    }
    let mut all = BTreeSet::new();
    for c in &cliques.cliques {
        all.extend(monomial_basis(c, 2 * omega));
    }
    for (m, _) in program.objective.terms() {
        all.insert(m.clone());
    }
    let monomials: Vec<Monomial> = all.into_iter().collect();
    let index: HashMap<Monomial, usize> =
        monomials.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();

    let mut p = ConicProblem::new(monomials.len());
    for (m, c) in program.objective.terms() {
        p.objective[index[m]] += c;
    }
    p.add_equality(&AffineExpr::var(0).plus(&AffineExpr::constant(-1.0)));

    let one = SparsePolynomial::constant(program.nvars, 1.0);
    let mut moment_sides = Vec::new();
    for c in &cliques.cliques {
        let basis = monomial_basis(c, omega);
        p.add_psd(basis.len(), |i, j| lift(&one, &basis[i].mul(&basis[j]), &index));
        moment_sides.push(basis.len());
    }
    let mut localizing_sides = Vec::new();
    for (f, &r) in program.inequalities.iter().zip(&cliques.theta_ineq) {
        let f = &normalized(f);
        let basis = monomial_basis(&cliques.cliques[r], omega - half_degree(f));
        p.add_psd(basis.len(), |i, j| lift(f, &basis[i].mul(&basis[j]), &index));
        localizing_sides.push(basis.len());
    }
    // An equality's localizing matrix must vanish, i.e. L(f·x^α) = 0 for
    // every α of degree up to 2(ω − ⌈deg f / 2⌉).
    let mut equality_rows = 0;
    for (f, &r) in program.equalities.iter().zip(&cliques.theta_eq) {
        let f = &normalized(f);
        for m in monomial_basis(&cliques.cliques[r], 2 * (omega - half_degree(f))) {
            p.add_equality(&lift(f, &m, &index));
            equality_rows += 1;
        }
    }
    p.compress();
    Ok(MomentSdp {
        omega,
        monomials,
        moment_sides,
        localizing_sides,
        equality_rows,
        problem: p,
    })
}

/// `y_α = x^α` for every lifted monomial.
pub fn lift_point(sdp: &MomentSdp, x: &[f64]) -> Vec<f64> {
    sdp.monomials.iter().map(|m| m.eval(x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Status {
    Infeasible,
    NotProven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P0Record {
    /// 1-based position in the constraint set.
    pub ell: usize,
    pub kind: ConstraintKind,
    pub owner: Owner,
    pub status: P0Status,
    /// Why the boundary piece was not excluded (`feasible`, solver diagnostics, …).
    pub reason: Option<String>,
    pub certificate_norm: Option<f64>,
    pub certificate_digest: Option<String>,
    /// The Farkas multipliers themselves, when [`P0Options::keep_certificates`] is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P0Options {
    pub omega: u32,
    pub conic: ConicOptions,
    pub keep_certificates: bool,
}

impl Default for P0Options {
    fn default() -> Self {
        Self {
            omega: DEFAULT_ORDER,
            conic: ConicOptions::default(),
            keep_certificates: false,
        }
    }
}

pub fn check_p0_single(
    model: &GridModel,
    constraint_set: &ConstraintSet,
    ell: usize,
    uncertainty: &UncertaintySet,
    opts: &P0Options,
) -> P0Record {
    let start = Instant::now();
    let c = &constraint_set.entries[ell - 1];
    let mut rec = P0Record {
        ell,
        kind: c.kind,
        owner: c.owner,
        status: P0Status::NotProven,
        reason: None,
        certificate_norm: None,
        certificate_digest: None,
        certificate: None,
        wall_time_s: 0.0,
    };
    let built = formulate_p0(model, constraint_set, ell, uncertainty).and_then(|prog| {
        let cliques = correlative_sparsity(&prog);
        build_moment_sdp(&prog, &cliques, opts.omega)
    });
    match built {
        Err(e) => rec.reason = Some(e.to_string()),
        Ok(sdp) => match conic::solve(&sdp.problem, &opts.conic).status {
            SolveStatus::Infeasible(cert) => {
                if conic::verify_infeasibility_certificate(&sdp.problem, &cert, opts.conic.cert_tol) {
                    rec.status = P0Status::Infeasible;
                    rec.certificate_norm = Some(cert.norm());
                    rec.certificate_digest = Some(cert.digest());
                    if opts.keep_certificates {
                        rec.certificate = Some(cert);
                    }
                } else {
                    rec.reason = Some("certificate rejected".into());
                }
            }
            SolveStatus::Feasible { .. } => rec.reason = Some("relaxation feasible".into()),
            SolveStatus::Unknown(r) => rec.reason = Some(r),
        },
    }
    rec.wall_time_s = start.elapsed().as_secs_f64();
    rec
}

/// One record per constraint, computed concurrently, returned in `ℓ` order.
pub fn check_p0_infeasible(
    model: &GridModel,
    constraint_set: &ConstraintSet,
    uncertainty: &UncertaintySet,
    opts: &P0Options,
) -> Vec<P0Record> {
    (1..=constraint_set.len())
        .into_par_iter()
        .map(|ell| check_p0_single(model, constraint_set, ell, uncertainty, opts))
        .collect()
}

/// Rectangular coordinates of a complex voltage, for [`lift_point`].
pub fn rect_point(v: &DVector<Complex64>) -> Vec<f64> {
    to_rect(v).as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{AuxBounds, SecuritySpec};
    use crate::grid::{build_grid, BranchSpec};
    use crate::vset::assemble_v;

    fn two_bus() -> GridModel {
        build_grid(
            &[BranchSpec::line(0, 1, Complex64::new(1.0, 0.0), 0.0)],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap()
    }

    fn calibrated_v(m: &GridModel) -> ConstraintSet {
        let sec = SecuritySpec::uniform(m, 0.9, 1.1, 1.0);
        assemble_v(m, &sec, &AuxBounds::new(&sec, 1.0, &[1.0], 0.4).unwrap())
    }

    #[test]
    fn power_forms_match_load_flow() {
        let m = build_grid(
            &[
                BranchSpec::line(0, 1, Complex64::new(2.0, -5.0), 0.1),
                BranchSpec::line(1, 2, Complex64::new(1.0, -3.0), 0.0),
            ],
            2,
            Complex64::new(1.02, 0.01),
        )
        .unwrap();
        let v = DVector::from_vec(vec![Complex64::new(0.97, -0.03), Complex64::new(0.95, -0.05)]);
        let s = crate::load_flow::eval_f(&m, &v);
        for j in 0..2 {
            let (re, im) = power_forms(&m, j);
            assert!((re.eval(&v) - s[j].re).abs() < 1e-12);
            assert!((im.eval(&v) - s[j].im).abs() < 1e-12);
        }
    }

    #[test]
    fn p0_structure() {
        let m = two_bus();
        let v = calibrated_v(&m);
        let u = UncertaintySet::singleton(&DVector::from_element(1, Complex64::new(0.0, 0.0)));
        let prog = formulate_p0(&m, &v, 4, &u).unwrap();
        assert_eq!(prog.equalities.len(), 3);
        assert_eq!(prog.inequalities.len(), 6);
        assert!(prog.inequalities.iter().chain(&prog.equalities).all(|f| f.degree() <= 2));
        // With a purely real admittance Im F = -Im v is linear; Re F stays quadratic.
        let (re, _) = power_forms(&m, 0);
        assert_eq!(SparsePolynomial::from_quadratic(&re).degree(), 2);
        let bx = UncertaintySet::new(vec![PowerRegion::rect(-0.1, 0.0, -0.1, 0.0)]);
        let prog = formulate_p0(&m, &v, 4, &bx).unwrap();
        assert_eq!(prog.inequalities.len(), 10);
        assert!(formulate_p0(&m, &v, 0, &u).is_err());
        assert!(formulate_p0(&m, &v, 8, &u).is_err());
        // A segment region becomes one equality plus two inequalities.
        let seg = UncertaintySet::new(vec![PowerRegion::rect(-0.1, 0.0, 0.0, 0.0)]);
        let prog = formulate_p0(&m, &v, 4, &seg).unwrap();
        assert_eq!((prog.inequalities.len(), prog.equalities.len()), (8, 2));
    }

    #[test]
    fn block_sizes() {
        let m = two_bus();
        let v = calibrated_v(&m);
        let u = UncertaintySet::singleton(&DVector::from_element(1, Complex64::new(0.0, 0.0)));
        let prog = formulate_p0(&m, &v, 1, &u).unwrap();
        let cs = correlative_sparsity(&prog);
        assert_eq!(cs.cliques, vec![vec![0, 1]]);
        let sdp = build_moment_sdp(&prog, &cs, 2).unwrap();
        assert_eq!(sdp.moment_sides, vec![6]);
        assert!(sdp.localizing_sides.iter().all(|&s| s == 3));
        let sdp1 = build_moment_sdp(&prog, &cs, 1).unwrap();
        assert!(sdp1.localizing_sides.iter().all(|&s| s == 1));
        assert!(matches!(
            build_moment_sdp(&prog, &cs, 0),
            Err(MomentError::OrderTooLow { .. })
        ));
    }

    #[test]
    fn scalar_negative_program_infeasible() {
        // −1 − x² ≥ 0
        let mut prog = PolynomialProgram::new(1, SparsePolynomial::linear(0.0, &[1.0]));
        let mut f = SparsePolynomial::constant(1, -1.0);
        f.add_term(Monomial::from_pairs(vec![(0, 2)]), -1.0);
        prog.inequalities.push(f);
        let cs = correlative_sparsity(&prog);
        let sdp = build_moment_sdp(&prog, &cs, 1).unwrap();
        assert_eq!(sdp.moment_sides, vec![2]);
        assert_eq!(sdp.localizing_sides, vec![1]);
        assert!(conic::solve(&sdp.problem, &ConicOptions::default()).is_infeasible());
    }

    #[test]
    fn lifting() {
        let m = two_bus();
        let v = calibrated_v(&m);
        let u = UncertaintySet::new(vec![PowerRegion::rect(-0.3, 0.0, -0.3, 0.3)]);
        let prog = formulate_p0(&m, &v, 4, &u).unwrap();
        let sdp = build_moment_sdp(&prog, &correlative_sparsity(&prog), 2).unwrap();
        let y0 = lift_point(&sdp, &[0.0, 0.0]);
        assert_eq!(y0[0], 1.0);
        assert!(y0[1..].iter().all(|&y| y == 0.0));
        // On the VLow boundary, v = 0.9·e^{0.2j} keeps |v − 1| < 0.4 and maps
        // to s = |v|² − v inside the box.
        let vb = Complex64::from_polar(0.9, 0.2);
        let s = vb * (vb - 1.0).conj();
        assert!(u.contains(&DVector::from_element(1, s)), "{s}");
        let x = [vb.re, vb.im];
        assert!(prog.violation(&x) < 1e-12);
        let y = lift_point(&sdp, &x);
        assert!(sdp.problem.check_point(&y).feasible(1e-8));
        // Outside the branch cap: a localizing block turns indefinite.
        let y = lift_point(&sdp, &[3.0, 0.0]);
        assert!(sdp.problem.check_point(&y).min_cone_margin < 0.0);
    }

    #[test]
    fn singleton_zero_is_excluded() {
        let m = two_bus();
        let v = calibrated_v(&m);
        let u = UncertaintySet::singleton(&DVector::from_element(1, Complex64::new(0.0, 0.0)));
        let recs = check_p0_infeasible(&m, &v, &u, &P0Options::default());
        assert_eq!(recs.len(), 7);
        for r in &recs {
            assert_eq!(r.status, P0Status::Infeasible, "{r:?}");
        }
    }

    #[test]
    fn nose_box_not_excluded() {
        let m = two_bus();
        let v = calibrated_v(&m);
        let u = UncertaintySet::new(vec![PowerRegion::rect(-0.3, 0.0, 0.0, 0.0)]);
        let recs = check_p0_infeasible(&m, &v, &u, &P0Options::default());
        assert!(recs.iter().any(|r| r.status == P0Status::NotProven));
        let low = P0Options { omega: 0, ..Default::default() };
        let r = check_p0_single(&m, &v, 1, &u, &low);
        assert_eq!(r.status, P0Status::NotProven);
        assert!(r.reason.unwrap().contains("order"));
    }
}
