//! Grid generators and an independent certificate checker shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use gridcert::conic::{Certificate, Cone, ConicProblem};
use gridcert::grid::{build_grid, BranchSpec, GridModel};
use gridcert::uncertainty::{HalfPlane, PowerRegion};
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

/// Random feeder with `n` PQ buses: a random spanning tree, plus one extra
/// line closing a triangle when `meshed`. No PQ bus gets more than two PQ
/// neighbours, which keeps every correlative-sparsity clique at three buses
/// or fewer.
pub fn random_grid<R: Rng>(rng: &mut R, n: usize, meshed: bool) -> GridModel {
    loop {
        if let Some(edges) = bounded_degree_edges(rng, n, meshed) {
            let branches: Vec<BranchSpec> = edges
                .into_iter()
                .map(|(a, b)| {
                    let z = Complex64::new(rng.gen_range(0.02..0.1), rng.gen_range(0.05..0.2));
                    BranchSpec::line(a, b, z.inv(), 0.0)
                })
                .collect();
            return build_grid(&branches, n, Complex64::new(1.0, 0.0)).expect("generated grid is valid");
        }
    }
}

const MAX_PQ_NEIGHBOURS: usize = 2;

fn bounded_degree_edges<R: Rng>(rng: &mut R, n: usize, meshed: bool) -> Option<BTreeSet<(usize, usize)>> {
    let mut edges = BTreeSet::new();
    for k in 1..=n {
        let parents: Vec<usize> = (0..k).filter(|&j| has_room(&edges, j)).collect();
        edges.insert((parents[rng.gen_range(0..parents.len())], k));
    }
    if meshed && n >= 2 {
        let mut chords = BTreeSet::new();
        for c in 0..=n {
            let nb = neighbours(&edges, c);
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    if has_room(&edges, a) && has_room(&edges, b) {
                        chords.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        let chords: Vec<_> = chords.into_iter().collect();
        if chords.is_empty() {
            return None;
        }
        edges.insert(chords[rng.gen_range(0..chords.len())]);
    }
    Some(edges)
}

fn neighbours(edges: &BTreeSet<(usize, usize)>, c: usize) -> Vec<usize> {
    edges
        .iter()
        .filter_map(|&(a, b)| if a == c { Some(b) } else if b == c { Some(a) } else { None })
        .collect()
}

fn pq_degree(edges: &BTreeSet<(usize, usize)>, j: usize) -> usize {
    neighbours(edges, j).into_iter().filter(|&k| k > 0).count()
}

/// The slack bus carries no variables, so it may take any number of lines.
fn has_room(edges: &BTreeSet<(usize, usize)>, j: usize) -> bool {
    j == 0 || pq_degree(edges, j) < MAX_PQ_NEIGHBOURS
}

/// Chain feeder `0 - 1 - … - n`.
pub fn radial_chain<R: Rng>(rng: &mut R, n: usize) -> GridModel {
    let branches: Vec<BranchSpec> = (0..n)
        .map(|k| {
            let z = Complex64::new(rng.gen_range(0.005..0.02), rng.gen_range(0.01..0.04));
            BranchSpec::line(k, k + 1, z.inv(), 0.0)
        })
        .collect();
    build_grid(&branches, n, Complex64::new(1.0, 0.0)).expect("generated grid is valid")
}

/// Slack bus and one PQ bus joined by admittance `y`.
pub fn two_bus(y: Complex64, v0: Complex64) -> GridModel {
    build_grid(&[BranchSpec::line(0, 1, y, 0.0)], 1, v0).expect("two-bus grid is valid")
}

/// Load region around zero: either a box `[-a, 0] × [-b, b]` or a triangle
/// with vertices `0`, `-a ± j·b`.
pub fn small_region<R: Rng>(rng: &mut R, max_a: f64, max_b: f64) -> PowerRegion {
    let a = rng.gen_range(0.2 * max_a..max_a);
    let b = rng.gen_range(0.0..max_b);
    if rng.gen_bool(0.5) {
        PowerRegion::rect(-a, 0.0, -b, b)
    } else {
        PowerRegion::HalfPlanes(vec![
            HalfPlane::new(1.0, 0.0, 0.0),
            HalfPlane::new(-b, -a, 0.0),
            HalfPlane::new(-b, a, 0.0),
            HalfPlane::new(-1.0, 0.0, a),
        ])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FarkasAudit {
    pub stationarity: f64,
    pub cone_margin: f64,
    /// No feasible point exists with `‖x‖₁` below this.
    pub radius: f64,
}

impl FarkasAudit {
    pub fn passed(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.cone_margin >= -tol && self.radius > 0.0
    }
}

/// Smallest eigenvalue of the symmetric matrix stored column-wise as the
/// upper triangle, off-diagonal entries scaled by √2.
fn packed_min_eigenvalue(side: usize, u: &[f64]) -> f64 {
    let mut m = DMatrix::zeros(side, side);
    let mut k = 0;
    for j in 0..side {
        for i in 0..=j {
            let val = if i == j { u[k] } else { u[k] / 2f64.sqrt() };
            m[(i, j)] = val;
            m[(j, i)] = val;
            k += 1;
        }
    }
    SymmetricEigen::new(m).eigenvalues.min()
}

/// Re-derives the Farkas alternative directly from the problem data.
///
/// For `Ex = f`, `Gx + h ∈ K`, multipliers with `hᵀz − fᵀμ = −1` and
/// `z ∈ K*` give `rᵀx = 1 + zᵀ(Gx + h) ≥ 1` for every feasible `x`, where
/// `r = Eᵀμ + Gᵀz`. Hence feasible points satisfy `‖x‖₁ ≥ 1 / ‖r‖∞`.
/// A slightly negative cone margin `δ` weakens this to
/// `(1 − δ·‖Gx+h‖) / ‖r‖∞`, which the caller bounds through the tolerance.
pub fn audit_farkas(problem: &ConicProblem, cert: &Certificate) -> Option<FarkasAudit> {
    let mu = &cert.eq_multipliers;
    let z = &cert.cone_multipliers;
    if mu.len() != problem.eq_rhs.len() || z.len() != problem.cone_offset.len() {
        return None;
    }
    let value: f64 = problem.cone_offset.iter().zip(z).map(|(h, z)| h * z).sum::<f64>()
        - problem.eq_rhs.iter().zip(mu).map(|(f, m)| f * m).sum::<f64>();
    if !(value < 0.0) || !value.is_finite() {
        return None;
    }
    let k = -1.0 / value;
    let mut r = vec![0.0; problem.n_vars];
    for &(row, col, v) in &problem.eq_matrix.entries {
        r[col] += v * mu[row] * k;
    }
    for &(row, col, v) in &problem.cone_matrix.entries {
        r[col] += v * z[row] * k;
    }
    let stationarity = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));

    let mut cone_margin = f64::INFINITY;
    let mut at = 0;
    for cone in &problem.cones {
        let d = cone.dim();
        let block: Vec<f64> = z[at..at + d].iter().map(|x| x * k).collect();
        at += d;
        let margin = match *cone {
            Cone::NonNegative(_) => block.iter().copied().fold(f64::INFINITY, f64::min),
            Cone::SecondOrder(0) => f64::INFINITY,
            Cone::SecondOrder(_) => block[0] - block[1..].iter().map(|x| x * x).sum::<f64>().sqrt(),
            Cone::Psd(0) => f64::INFINITY,
            Cone::Psd(side) => packed_min_eigenvalue(side, &block),
        };
        cone_margin = cone_margin.min(margin);
    }
    let radius = if stationarity == 0.0 { f64::INFINITY } else { 1.0 / stationarity };
    Some(FarkasAudit {
        stationarity,
        cone_margin,
        radius,
    })
}
