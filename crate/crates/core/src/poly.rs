//! Sparse real multivariate polynomials.

use std::cmp::Ordering;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;

use crate::constraints::QuadraticForm;

/// Monomial `x^α` stored as `(variable, exponent)` pairs sorted by variable,
/// all exponents positive.
///
/// Ordering is by total degree, then graded-lexicographic inside a degree
/// with the larger monomial first, so `1 < x0 < x1 < x0² < x0·x1 < x1²`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial(Vec<(u32, u32)>);

impl Monomial {
    pub fn one() -> Self {
        Self(Vec::new())
    }

    pub fn var(i: usize) -> Self {
        Self(vec![(i as u32, 1)])
    }

    pub fn from_pairs(mut pairs: Vec<(u32, u32)>) -> Self {
        pairs.retain(|p| p.1 > 0);
        pairs.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::with_capacity(pairs.len());
        for (v, e) in pairs {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += e,
                _ => out.push((v, e)),
            }
        }
        Self(out)
    }

    pub fn from_dense(exps: &[u32]) -> Self {
        Self(
            exps.iter()
                .enumerate()
                .filter(|(_, e)| **e > 0)
                .map(|(i, e)| (i as u32, *e))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|p| p.1).sum()
    }

    pub fn variables(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|p| p.0 as usize)
    }

    pub fn mul(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
                out.push(a[i]);
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                out.push(b[j]);
                j += 1;
            } else {
                out.push((a[i].0, a[i].1 + b[j].1));
                i += 1;
                j += 1;
            }
        }
        Self(out)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|&(v, e)| x[v as usize].powi(e as i32)).product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| {
            let (a, b) = (&self.0, &other.0);
            let (mut i, mut j) = (0, 0);
            loop {
                match (a.get(i), b.get(j)) {
                    (None, None) => return Ordering::Equal,
                    (Some(_), None) => return Ordering::Less,
                    (None, Some(_)) => return Ordering::Greater,
                    (Some(&(va, ea)), Some(&(vb, eb))) => {
                        if va != vb {
                            return va.cmp(&vb);
                        }
                        if ea != eb {
                            return eb.cmp(&ea);
                        }
                        i += 1;
                        j += 1;
                    }
                }
            }
        })
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials over `vars` of total degree at most `d`, in [`Monomial`] order.
pub fn monomial_basis(vars: &[usize], d: u32) -> Vec<Monomial> {
    let mut out = vec![Monomial::one()];
    let mut frontier = vec![Monomial::one()];
    for _ in 0..d {
        let mut next = BTreeSet::new();
        for m in &frontier {
            for &v in vars {
                next.insert(m.mul(&Monomial::var(v)));
            }
        }
        frontier = next.into_iter().collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsePolynomial {
    pub nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl SparsePolynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert!(m.variables().all(|v| v < self.nvars));
        match self.terms.entry(m) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                if c != 0.0 {
                    e.insert(c);
                }
            }
        }
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Self::zero(nvars);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    pub fn linear(constant: f64, row: &[f64]) -> Self {
        let mut p = Self::constant(row.len(), constant);
        for (i, &c) in row.iter().enumerate() {
            p.add_term(Monomial::var(i), c);
        }
        p
    }

    pub fn from_quadratic(q: &QuadraticForm) -> Self {
        let n = q.dim();
        let mut p = Self::linear(q.constant, q.linear.as_slice());
        for i in 0..n {
            p.add_term(Monomial::from_pairs(vec![(i as u32, 2)]), q.quadratic[(i, i)]);
            for j in (i + 1)..n {
                let c = q.quadratic[(i, j)] + q.quadratic[(j, i)];
                p.add_term(Monomial::from_pairs(vec![(i as u32, 1), (j as u32, 1)]), c);
            }
        }
        p
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Variables appearing in some term.
    pub fn support(&self) -> BTreeSet<usize> {
        self.terms.keys().flat_map(|m| m.variables().collect::<Vec<_>>()).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.eval(x)).sum()
    }

    pub fn eval_vec(&self, x: &DVector<f64>) -> f64 {
        self.eval(x.as_slice())
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::from_terms(self.nvars, self.terms.iter().map(|(m, c)| (m.clone(), c * k)))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut p = self.clone();
        for (m, c) in other.terms() {
            p.add_term(m.clone(), c);
        }
        p
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut p = Self::zero(self.nvars.max(other.nvars));
        for (a, ca) in self.terms() {
            for (b, cb) in other.terms() {
                p.add_term(a.mul(b), ca * cb);
            }
        }
        p
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }
}

/// `objective` subject to `inequalities ≥ 0` and `equalities = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialProgram {
    pub nvars: usize,
    pub objective: SparsePolynomial,
    pub inequalities: Vec<SparsePolynomial>,
    pub equalities: Vec<SparsePolynomial>,
}

impl PolynomialProgram {
    pub fn new(nvars: usize, objective: SparsePolynomial) -> Self {
        Self {
            nvars,
            objective,
            inequalities: Vec::new(),
            equalities: Vec::new(),
        }
    }

    /// Worst constraint violation at `x` (zero when feasible).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let ineq = self
            .inequalities
            .iter()
            .map(|f| (-f.eval(x)).max(0.0))
            .fold(0.0, f64::max);
        let eq = self
            .equalities
            .iter()
            .map(|f| f.eval(x).abs())
            .fold(0.0, f64::max);
        ineq.max(eq)
    }

    pub fn max_constraint_degree(&self) -> u32 {
        self.inequalities
            .iter()
            .chain(&self.equalities)
            .map(SparsePolynomial::degree)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_order_and_size() {
        let b = monomial_basis(&[0, 1], 2);
        let expect = [
            Monomial::one(),
            Monomial::var(0),
            Monomial::var(1),
            Monomial::from_pairs(vec![(0, 2)]),
            Monomial::from_pairs(vec![(0, 1), (1, 1)]),
            Monomial::from_pairs(vec![(1, 2)]),
        ];
        assert_eq!(b, expect);
        assert_eq!(monomial_basis(&[0, 1, 2, 3], 2).len(), 15);
        assert_eq!(monomial_basis(&[3, 5, 7], 3).len(), 20);
    }

    #[test]
    fn arithmetic() {
        let x = SparsePolynomial::linear(0.0, &[1.0, 0.0]);
        let y = SparsePolynomial::linear(0.0, &[0.0, 1.0]);
        let p = x.add(&y).mul(&x.add(&y.scale(-1.0)));
        assert_eq!(p.n_terms(), 2);
        assert_eq!(p.degree(), 2);
        assert!((p.eval(&[3.0, 2.0]) - 5.0).abs() < 1e-15);
        let q = p.add(&p.scale(-1.0));
        assert!(q.is_zero());
        assert_eq!(p.support(), BTreeSet::from([0, 1]));
    }

    proptest! {
        #[test]
        fn order_is_total_and_consistent(a in prop::collection::vec(0u32..3, 4), b in prop::collection::vec(0u32..3, 4)) {
            let ma = Monomial::from_dense(&a);
            let mb = Monomial::from_dense(&b);
            prop_assert_eq!(ma.cmp(&mb), mb.cmp(&ma).reverse());
            prop_assert_eq!(ma.cmp(&mb) == Ordering::Equal, a == b);
            let x = [0.7, -1.1, 0.3, 2.0];
            prop_assert!((ma.mul(&mb).eval(&x) - ma.eval(&x) * mb.eval(&x)).abs() < 1e-9);
        }

        #[test]
        fn quadratic_conversion_matches(c in -2.0f64..2.0, l in prop::collection::vec(-2.0f64..2.0, 3), q in prop::collection::vec(-2.0f64..2.0, 9), x in prop::collection::vec(-2.0f64..2.0, 3)) {
            let mut form = QuadraticForm::zero(3);
            form.constant = c;
            form.linear = DVector::from_vec(l);
            let m = nalgebra::DMatrix::from_vec(3, 3, q);
            form.quadratic = (&m + m.transpose()) * 0.5;
            let xv = DVector::from_vec(x);
            let p = SparsePolynomial::from_quadratic(&form);
            prop_assert!((p.eval_vec(&xv) - form.eval_rect(&xv)).abs() < 1e-9);
        }
    }
}
