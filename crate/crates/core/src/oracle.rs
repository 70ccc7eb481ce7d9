//! Brute-force cross-checks that never touch the convex machinery.
//!
//! Everything here works directly on the load-flow equations: multi-start
//! Newton enumeration, path continuation, exact quadratic root finding along
//! rays and pseudo-arclength tracking of solution branches.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{aux_forms, eval_constraints, AuxBounds, ConstraintKind, ConstraintSet, Owner};
use crate::grid::{ComplexValue, GridModel};
use crate::load_flow::{
    continuation_trace, eval_f, from_rect, is_nonsingular, jacobian, min_singular_value,
    solve_load_flow, to_rect, ContinuationOptions, LoadFlowError, NewtonOptions, PowerPath,
};
use crate::uncertainty::{random_convex_combination, UncertaintySet};

/// Margins below this count as violations.
pub const VIOLATION_TOL: f64 = -1e-8;
/// Solutions closer than this are the same solution.
pub const CLUSTER_TOL: f64 = 1e-6;

fn cvec(v: &DVector<Complex64>) -> Vec<ComplexValue> {
    v.iter().map(|&z| z.into()).collect()
}

fn push_unique(sols: &mut Vec<DVector<Complex64>>, v: DVector<Complex64>) {
    let dup = sols
        .iter()
        .any(|u| (u - &v).iter().map(|d| d.norm()).fold(0.0, f64::max) < CLUSTER_TOL);
    if !dup {
        sols.push(v);
    }
}

fn newton_strict() -> NewtonOptions {
    NewtonOptions {
        max_iter: 40,
        residual_tol: 1e-11,
        step_damping: true,
    }
}

/// Closed-form solutions of the single-PQ-bus load flow.
///
/// With `A = conj(Y)`, `c = conj(Y·w)` and `r = |v|²`, the equation
/// `s = A r − c v` gives `v = (A r − s)/c` and the real quadratic
/// `|A|² r² − (2 Re(conj(A) s) + |c|²) r + |s|² = 0`.
pub fn single_bus_solutions(model: &GridModel, s: Complex64) -> Vec<Complex64> {
    assert_eq!(model.n_pq(), 1, "closed form needs exactly one PQ bus");
    let y = model.y_ll()[(0, 0)];
    let a = y.conj();
    let c = (y * model.w()[0]).conj();
    if c.norm() == 0.0 {
        return Vec::new();
    }
    let qa = a.norm_sqr();
    let qb = -(2.0 * (a.conj() * s).re + c.norm_sqr());
    let qc = s.norm_sqr();
    let disc = qb * qb - 4.0 * qa * qc;
    let scale = qb * qb + (4.0 * qa * qc).abs();
    let roots: Vec<f64> = if disc.abs() <= 1e-14 * scale {
        vec![-qb / (2.0 * qa)]
    } else if disc < 0.0 {
        vec![]
    } else {
        let sq = disc.sqrt();
        // Numerically stable pair.
        let q = -0.5 * (qb + qb.signum() * sq);
        let mut r = vec![q / qa];
        if q != 0.0 {
            r.push(qc / q);
        } else {
            r.push(0.0);
        }
        r
    };
    let mut out: Vec<Complex64> = Vec::new();
    for r in roots.into_iter().filter(|r| *r >= -1e-14) {
        let v = (a * r.max(0.0) - s) / c;
        if !out.iter().any(|u| (u - v).norm() < CLUSTER_TOL) {
            out.push(v);
        }
    }
    out
}

/// Extra undamped Newton steps keeping the best iterate. Near a double root
/// Newton is only linearly convergent, and the standard stopping rule leaves
/// errors of order `sqrt(residual)`.
fn polish(model: &GridModel, s: &DVector<Complex64>, v: DVector<Complex64>) -> DVector<Complex64> {
    let target = to_rect(s);
    let resid = |x: &DVector<f64>| to_rect(&eval_f(model, &from_rect(x))) - &target;
    let mut x = to_rect(&v);
    let mut best = (resid(&x).amax(), x.clone());
    let mut stale = 0;
    for _ in 0..60 {
        let r = resid(&x);
        let Some(dx) = jacobian(model, &from_rect(&x)).lu().solve(&r) else {
            break;
        };
        x -= dx;
        let nr = resid(&x).amax();
        if !nr.is_finite() {
            break;
        }
        if nr < best.0 {
            best = (nr, x.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if nr == 0.0 || stale >= 3 {
            break;
        }
    }
    from_rect(&best.1)
}

/// Multi-start Newton from the given rectangular starting points.
pub fn multistart_solutions(
    model: &GridModel,
    s: &DVector<Complex64>,
    starts: &[DVector<Complex64>],
) -> Vec<DVector<Complex64>> {
    let opts = newton_strict();
    let found: Vec<DVector<Complex64>> = starts
        .par_iter()
        .filter_map(|v0| solve_load_flow(model, s, v0, &opts).ok().map(|sol| sol.v))
        .collect();
    // Most starts land on the same few roots; polish one representative each.
    let mut raw = Vec::new();
    for v in found {
        push_unique(&mut raw, v);
    }
    let mut sols = Vec::new();
    for v in raw {
        push_unique(&mut sols, polish(model, s, v));
    }
    sols
}

/// Starts per real coordinate on `[-1.5, 1.5]`: dense for one bus, coarser
/// for two since the grid is taken per complex variable.
fn start_grid(n: usize) -> Vec<DVector<Complex64>> {
    let per = if n == 1 { 50 } else { 8 };
    let axis: Vec<f64> = (0..per).map(|k| -1.5 + 3.0 * k as f64 / (per - 1) as f64).collect();
    let points: Vec<Complex64> = axis
        .iter()
        .flat_map(|&re| axis.iter().map(move |&im| Complex64::new(re, im)))
        .collect();
    let mut out: Vec<Vec<Complex64>> = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                points.iter().map(move |&p| {
                    let mut v = prefix.clone();
                    v.push(p);
                    v
                })
            })
            .collect();
    }
    out.into_iter().map(DVector::from_vec).collect()
}

/// All load-flow solutions for grids with at most two PQ buses.
pub fn enumerate_solutions_small(model: &GridModel, s: &DVector<Complex64>) -> Vec<DVector<Complex64>> {
    let n = model.n_pq();
    assert!(n <= 2, "exhaustive enumeration is limited to two PQ buses");
    let mut starts = start_grid(n);
    starts.push(model.w().clone());
    let mut sols = multistart_solutions(model, s, &starts);
    if n == 1 {
        // Merge closed-form roots: they catch double roots Newton converges to slowly.
        for v in single_bus_solutions(model, s[0]) {
            push_unique(&mut sols, DVector::from_element(1, v));
        }
    }
    sols.sort_by(|a, b| {
        let key = |v: &DVector<Complex64>| v.iter().map(|z| z.norm()).sum::<f64>();
        key(b).total_cmp(&key(a))
    });
    sols
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViolationKind {
    Margin {
        ell: usize,
        kind: ConstraintKind,
        owner: Owner,
        margin: f64,
    },
    Singular {
        min_singular_value: f64,
    },
    PathLost {
        t_last_good: Option<f64>,
        t_failed: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: usize,
    pub t: f64,
    pub s: Vec<ComplexValue>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceOptions {
    pub n_paths: usize,
    pub n_steps: usize,
    /// Random waypoints after the initial injection.
    pub waypoints: usize,
    pub seed: u64,
    pub sigma_tol: f64,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self {
            n_paths: 200,
            n_steps: 100,
            waypoints: 3,
            seed: 0,
            sigma_tol: crate::load_flow::DEFAULT_SIGMA_TOL,
        }
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64 + 1);
    rng
}

/// Random point of the set, biased towards vertices so corners get visited.
fn random_injection<R: Rng>(verts: &[Vec<Complex64>], rng: &mut R) -> DVector<Complex64> {
    DVector::from_iterator(
        verts.len(),
        verts.iter().map(|vs| {
            if rng.gen_bool(0.3) {
                vs[rng.gen_range(0..vs.len())]
            } else {
                random_convex_combination(vs, rng)
            }
        }),
    )
}

fn random_path(
    s0: &DVector<Complex64>,
    verts: &[Vec<Complex64>],
    opts: &BruteForceOptions,
    p: usize,
) -> PowerPath {
    let mut rng = path_rng(opts.seed, p);
    let mut wps = vec![s0.clone()];
    for _ in 0..opts.waypoints {
        wps.push(random_injection(verts, &mut rng));
    }
    PowerPath::new(wps)
}

/// Injection path number `p` of [`brute_force_admissibility`], regenerated
/// from the seed so that individual trajectories can be replayed.
pub fn brute_force_path(
    model: &GridModel,
    v_initial: &DVector<Complex64>,
    uncertainty: &UncertaintySet,
    opts: &BruteForceOptions,
    p: usize,
) -> PowerPath {
    let verts: Vec<Vec<Complex64>> = uncertainty.regions.iter().map(|r| r.vertices()).collect();
    random_path(&eval_f(model, v_initial), &verts, opts, p)
}

/// Random piecewise-linear injection paths starting at `F(v_initial)`,
/// followed by continuation. The first violation on each path is reported.
pub fn brute_force_admissibility(
    model: &GridModel,
    security: &ConstraintSet,
    v_initial: &DVector<Complex64>,
    uncertainty: &UncertaintySet,
    opts: &BruteForceOptions,
) -> Vec<Violation> {
    let verts: Vec<Vec<Complex64>> = uncertainty.regions.iter().map(|r| r.vertices()).collect();
    let s0 = eval_f(model, v_initial);
    let copts = ContinuationOptions {
        n_steps: opts.n_steps,
        ..ContinuationOptions::default()
    };
    let per_path: Vec<Option<Violation>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|p| {
            let path = random_path(&s0, &verts, opts, p);
            match continuation_trace(model, &path, v_initial, &copts) {
                Err(LoadFlowError::PathLost { t_last_good, t_failed }) => Some(Violation {
                    path: p,
                    t: t_failed,
                    s: cvec(&path.at(t_failed)),
                    kind: ViolationKind::PathLost { t_last_good, t_failed },
                }),
                Err(e) => panic!("continuation failed unexpectedly: {e}"),
                Ok(trace) => trace.iter().find_map(|pt| {
                    let m = eval_constraints(security, &pt.v);
                    if m.min < VIOLATION_TOL {
                        let i = m.argmin.expect("non-empty constraint set");
                        let c = &security.entries[i];
                        return Some(Violation {
                            path: p,
                            t: pt.t,
                            s: cvec(&pt.s),
                            kind: ViolationKind::Margin {
                                ell: i + 1,
                                kind: c.kind,
                                owner: c.owner,
                                margin: m.min,
                            },
                        });
                    }
                    let ns = is_nonsingular(model, &pt.v, opts.sigma_tol);
                    (!ns.nonsingular).then(|| Violation {
                        path: p,
                        t: pt.t,
                        s: cvec(&pt.s),
                        kind: ViolationKind::Singular {
                            min_singular_value: ns.min_singular_value,
                        },
                    })
                }),
            }
        })
        .collect();
    per_path.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryHit {
    pub ell: usize,
    pub v: Vec<ComplexValue>,
    pub s: Vec<ComplexValue>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryProbeOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Restrict to one constraint (1-based).
    pub focus: Option<usize>,
    /// Slack allowed on the other constraints.
    pub tol: f64,
}

impl Default for BoundaryProbeOptions {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            seed: 0,
            focus: None,
            tol: 1e-9,
        }
    }
}

/// Points of `∂V` found along rays from `center` whose image lies in the set.
///
/// Constraints are quadratic, so each ray meets each boundary piece at the
/// roots of a scalar quadratic. Coordinate axes are tried before random
/// directions, which matters for lower-dimensional uncertainty sets.
pub fn boundary_probe(
    model: &GridModel,
    constraint_set: &ConstraintSet,
    uncertainty: &UncertaintySet,
    center: &DVector<Complex64>,
    opts: &BoundaryProbeOptions,
) -> Vec<BoundaryHit> {
    let dim = constraint_set.dim;
    let c = to_rect(center);
    let ells: Vec<usize> = match opts.focus {
        Some(l) => vec![l - 1],
        None => (0..constraint_set.len()).collect(),
    };
    let hits: Vec<Vec<BoundaryHit>> = (0..opts.n_samples)
        .into_par_iter()
        .map(|k| {
            let d = if k < 2 * dim {
                let mut d = DVector::zeros(dim);
                d[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
                d
            } else {
                let mut rng = path_rng(opts.seed, k);
                let d = DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
                let n = d.norm();
                if n == 0.0 {
                    return Vec::new();
                }
                d / n
            };
            let mut out = Vec::new();
            for &l in &ells {
                let f = &constraint_set.entries[l].form;
                let qa = d.dot(&(&f.quadratic * &d));
                let qb = f.linear.dot(&d) + 2.0 * c.dot(&(&f.quadratic * &d));
                let qc = f.eval_rect(&c);
                let roots: Vec<f64> = if qa.abs() < 1e-14 {
                    if qb.abs() < 1e-14 {
                        vec![]
                    } else {
                        vec![-qc / qb]
                    }
                } else {
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc < 0.0 {
                        vec![]
                    } else {
                        let q = -0.5 * (qb + qb.signum() * disc.sqrt());
                        let mut r = vec![q / qa];
                        if q != 0.0 {
                            r.push(qc / q);
                        }
                        r
                    }
                };
                for t in roots {
                    let x = &c + &d * t;
                    let v = from_rect(&x);
                    let m = eval_constraints(constraint_set, &v);
                    let inside = m
                        .values
                        .iter()
                        .enumerate()
                        .all(|(i, &val)| i == l || val >= -opts.tol);
                    if !inside {
                        continue;
                    }
                    let s = eval_f(model, &v);
                    if uncertainty.contains(&s) {
                        out.push(BoundaryHit {
                            ell: l + 1,
                            v: cvec(&v),
                            s: cvec(&s),
                        });
                    }
                }
            }
            out
        })
        .collect();
    hits.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub trial: usize,
    pub s: Vec<ComplexValue>,
    pub first: Vec<ComplexValue>,
    pub second: Vec<ComplexValue>,
}

/// Uniform-ish samples of `Ṽ`: nodal current offsets drawn from the
/// polydisk `|u_j| ≤ i_node_j`, mapped through `Y_LL⁻¹`, and kept when every
/// branch cap also holds.
pub fn sample_aux_set<R: Rng>(
    model: &GridModel,
    aux: &AuxBounds,
    n: usize,
    rng: &mut R,
) -> Vec<DVector<Complex64>> {
    let cs = aux_forms(model, aux);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let u = DVector::from_iterator(
            model.n_pq(),
            aux.i_node.iter().map(|&r| {
                let rad = r * rng.gen::<f64>().sqrt();
                Complex64::from_polar(rad, rng.gen::<f64>() * std::f64::consts::TAU)
            }),
        );
        let v = model.w() + model.y_ll_inv() * u;
        if eval_constraints(&cs, &v).min > 0.0 {
            out.push(v);
        }
    }
    out
}

/// Searches for two distinct load-flow solutions inside `Ṽ` with the same injection.
pub fn uniqueness_probe(model: &GridModel, aux: &AuxBounds, trials: usize, seed: u64) -> Vec<Collision> {
    let cs = aux_forms(model, aux);
    let n = model.n_pq();
    let mut out = Vec::new();
    for trial in 0..trials {
        let mut rng = path_rng(seed, trial);
        let Some(v) = sample_aux_set(model, aux, 1, &mut rng).pop() else {
            continue;
        };
        let s = eval_f(model, &v);
        let sols = if n <= 2 {
            enumerate_solutions_small(model, &s)
        } else {
            let mut starts: Vec<DVector<Complex64>> = (0..400)
                .map(|_| {
                    DVector::from_fn(n, |_, _| {
                        Complex64::new(rng.gen::<f64>() * 3.0 - 1.5, rng.gen::<f64>() * 3.0 - 1.5)
                    })
                })
                .collect();
            starts.extend(sample_aux_set(model, aux, 50, &mut rng));
            starts.push(v.clone());
            multistart_solutions(model, &s, &starts)
        };
        let inside: Vec<&DVector<Complex64>> = sols
            .iter()
            .filter(|u| eval_constraints(&cs, u).min > 0.0)
            .collect();
        if inside.len() > 1 {
            out.push(Collision {
                trial,
                s: cvec(&s),
                first: cvec(inside[0]),
                second: cvec(inside[1]),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularPoint {
    pub v: DVector<Complex64>,
    pub s: DVector<Complex64>,
    /// Position along the injection ray `s = t·direction`.
    pub t: f64,
    pub min_singular_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArclengthOptions {
    pub step: f64,
    pub max_steps: usize,
    pub bisections: usize,
}

impl Default for ArclengthOptions {
    fn default() -> Self {
        Self {
            step: 0.01,
            max_steps: 5000,
            bisections: 60,
        }
    }
}

/// `[J(x) | −d]` and the residual `F(x) − t·d` of the branch `F(v) = t·d`.
fn branch_system(model: &GridModel, z: &DVector<f64>, d: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = d.len();
    let x = z.rows(0, m).into_owned();
    let t = z[m];
    let v = from_rect(&x);
    let r = to_rect(&eval_f(model, &v)) - d * t;
    let mut a = DMatrix::zeros(m, m + 1);
    a.view_mut((0, 0), (m, m)).copy_from(&jacobian(model, &v));
    a.set_column(m, &(-d));
    (r, a)
}

fn tangent(a: &DMatrix<f64>, prev: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    let mut k = DMatrix::zeros(m + 1, m + 1);
    k.view_mut((0, 0), (m, m + 1)).copy_from(a);
    k.set_row(m, &prev.transpose());
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let tau = k.lu().solve(&rhs)?;
    let n = tau.norm();
    (n > 0.0).then(|| tau / n)
}

fn correct(
    model: &GridModel,
    z_pred: &DVector<f64>,
    tau: &DVector<f64>,
    d: &DVector<f64>,
) -> Option<DVector<f64>> {
    let m = d.len();
    let mut z = z_pred.clone();
    for _ in 0..30 {
        let (r, a) = branch_system(model, &z, d);
        let mut full_r = DVector::zeros(m + 1);
        full_r.rows_mut(0, m).copy_from(&r);
        full_r[m] = tau.dot(&(&z - z_pred));
        if full_r.amax() < 1e-12 {
            return Some(z);
        }
        let mut k = DMatrix::zeros(m + 1, m + 1);
        k.view_mut((0, 0), (m, m + 1)).copy_from(&a);
        k.set_row(m, &tau.transpose());
        let dz = k.lu().solve(&full_r)?;
        z -= dz;
    }
    let (r, _) = branch_system(model, &z, d);
    (r.amax() < 1e-10).then_some(z)
}

fn det_sign(model: &GridModel, z: &DVector<f64>, m: usize) -> f64 {
    let v = from_rect(&z.rows(0, m).into_owned());
    jacobian(model, &v).determinant().signum()
}

/// Follows the solution branch of `F(v) = t·direction` from `(w, 0)` by
/// pseudo-arclength continuation and bisects on the sign of `det J` at the
/// first fold.
pub fn locate_singular_point(
    model: &GridModel,
    direction: &DVector<Complex64>,
    opts: &ArclengthOptions,
) -> Option<SingularPoint> {
    let m = 2 * model.n_pq();
    let d = to_rect(direction);
    let mut z = DVector::zeros(m + 1);
    z.rows_mut(0, m).copy_from(&to_rect(model.w()));
    let mut seed = DVector::zeros(m + 1);
    seed[m] = 1.0;
    let (_, a) = branch_system(model, &z, &d);
    let mut tau = tangent(&a, &seed)?;
    if tau[m] < 0.0 {
        tau = -tau;
    }
    let mut sign = det_sign(model, &z, m);
    for _ in 0..opts.max_steps {
        let z_next = correct(model, &(&z + &tau * opts.step), &tau, &d)?;
        let next_sign = det_sign(model, &z_next, m);
        if next_sign != sign {
            // Bisect along the chord, re-projecting onto the branch each time.
            let (mut lo, mut hi) = (z.clone(), z_next);
            for _ in 0..opts.bisections {
                let mid_pred = (&lo + &hi) * 0.5;
                let chord = &hi - &lo;
                let cn = chord.norm();
                if cn < 1e-14 {
                    break;
                }
                let mid = correct(model, &mid_pred, &(chord / cn), &d)?;
                if det_sign(model, &mid, m) == sign {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let best = if min_singular_value(model, &from_rect(&lo.rows(0, m).into_owned()))
                < min_singular_value(model, &from_rect(&hi.rows(0, m).into_owned()))
            {
                lo
            } else {
                hi
            };
            let v = from_rect(&best.rows(0, m).into_owned());
            return Some(SingularPoint {
                s: eval_f(model, &v),
                t: best[m],
                min_singular_value: min_singular_value(model, &v),
                v,
            });
        }
        let (_, a) = branch_system(model, &z_next, &d);
        let mut next_tau = tangent(&a, &tau)?;
        if next_tau.dot(&tau) < 0.0 {
            next_tau = -next_tau;
        }
        z = z_next;
        tau = next_tau;
        sign = next_sign;
    }
    None
}
