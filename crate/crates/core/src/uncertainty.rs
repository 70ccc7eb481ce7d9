//! Per-bus power-injection uncertainty: singletons and convex polygons.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ComplexValue;

pub const CONTAINS_TOL: f64 = 1e-9;

/// Box used to decide emptiness of possibly unbounded polygons.
const FAR: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("region of PQ bus {bus} is empty")]
    EmptyRegion { bus: usize },
    #[error("region of PQ bus {bus} is unbounded")]
    UnboundedRegion { bus: usize },
    #[error("half-plane {index} of PQ bus {bus} has a zero normal")]
    ZeroNormal { bus: usize, index: usize },
    #[error("region of PQ bus {bus} has non-finite data")]
    NonFinite { bus: usize },
    #[error("uncertainty set covers {got} buses, grid has {expected} PQ buses")]
    BusCount { expected: usize, got: usize },
    #[error("kappa must be finite and non-negative, got {0}")]
    BadKappa(f64),
    #[error("invalid uncertainty file: {0}")]
    Parse(String),
}

/// `alpha·Re(s) + beta·Im(s) ≤ gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct HalfPlane {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl From<[f64; 3]> for HalfPlane {
    fn from(a: [f64; 3]) -> Self {
        Self {
            alpha: a[0],
            beta: a[1],
            gamma: a[2],
        }
    }
}

impl From<HalfPlane> for [f64; 3] {
    fn from(h: HalfPlane) -> Self {
        [h.alpha, h.beta, h.gamma]
    }
}

impl HalfPlane {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// Signed distance of `s` outside the half-plane (negative inside).
    pub fn excess(&self, s: Complex64) -> f64 {
        (self.alpha * s.re + self.beta * s.im - self.gamma) / self.alpha.hypot(self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PowerRegion {
    Point(ComplexValue),
    HalfPlanes(Vec<HalfPlane>),
}

impl PowerRegion {
    pub fn singleton(s: Complex64) -> Self {
        Self::Point(s.into())
    }

    /// Axis-aligned box `[re_lo, re_hi] × [im_lo, im_hi]`.
    pub fn rect(re_lo: f64, re_hi: f64, im_lo: f64, im_hi: f64) -> Self {
        Self::HalfPlanes(vec![
            HalfPlane::new(1.0, 0.0, re_hi),
            HalfPlane::new(-1.0, 0.0, -re_lo),
            HalfPlane::new(0.0, 1.0, im_hi),
            HalfPlane::new(0.0, -1.0, -im_lo),
        ])
    }

    pub fn contains(&self, s: Complex64) -> bool {
        match self {
            Self::Point(p) => (s - Complex64::from(*p)).norm() <= CONTAINS_TOL,
            Self::HalfPlanes(hs) => hs.iter().all(|h| h.excess(s) <= CONTAINS_TOL),
        }
    }

    /// Vertices in counter-clockwise order (one point for a singleton).
    /// Only meaningful for validated regions.
    pub fn vertices(&self) -> Vec<Complex64> {
        match self {
            Self::Point(p) => vec![(*p).into()],
            Self::HalfPlanes(hs) => polygon_vertices(hs),
        }
    }

    pub fn validate(&self, bus: usize) -> Result<(), UncertaintyError> {
        match self {
            Self::Point(p) => {
                if p.is_finite() {
                    Ok(())
                } else {
                    Err(UncertaintyError::NonFinite { bus })
                }
            }
            Self::HalfPlanes(hs) => {
                for (index, h) in hs.iter().enumerate() {
                    if !(h.alpha.is_finite() && h.beta.is_finite() && h.gamma.is_finite()) {
                        return Err(UncertaintyError::NonFinite { bus });
                    }
                    if h.alpha == 0.0 && h.beta == 0.0 {
                        return Err(UncertaintyError::ZeroNormal { bus, index });
                    }
                }
                let mut boxed = hs.clone();
                boxed.extend_from_slice(&[
                    HalfPlane::new(1.0, 0.0, FAR),
                    HalfPlane::new(-1.0, 0.0, FAR),
                    HalfPlane::new(0.0, 1.0, FAR),
                    HalfPlane::new(0.0, -1.0, FAR),
                ]);
                if polygon_vertices(&boxed).is_empty() {
                    return Err(UncertaintyError::EmptyRegion { bus });
                }
                if has_recession_direction(hs) {
                    return Err(UncertaintyError::UnboundedRegion { bus });
                }
                Ok(())
            }
        }
    }

    fn scaled_gamma(&self, kappa: f64) -> Self {
        match self {
            Self::Point(p) => Self::Point(*p),
            Self::HalfPlanes(hs) => Self::HalfPlanes(
                hs.iter()
                    .map(|h| HalfPlane::new(h.alpha, h.beta, h.gamma * kappa))
                    .collect(),
            ),
        }
    }
}

/// Some nonzero `d` with `alpha·d_re + beta·d_im ≤ 0` for every half-plane.
///
/// A nonzero 2-D polyhedral cone other than the plane has an extreme ray on
/// one of its bounding lines, so testing both directions along every
/// boundary line is exhaustive.
fn has_recession_direction(hs: &[HalfPlane]) -> bool {
    if hs.is_empty() {
        return true;
    }
    hs.iter().any(|h| {
        let norm = h.alpha.hypot(h.beta);
        let d = Complex64::new(-h.beta / norm, h.alpha / norm);
        [d, -d].into_iter().all(|d| {
            hs.iter()
                .all(|k| (k.alpha * d.re + k.beta * d.im) / k.alpha.hypot(k.beta) <= 1e-12)
        })
    })
}

fn polygon_vertices(hs: &[HalfPlane]) -> Vec<Complex64> {
    let mut pts: Vec<Complex64> = Vec::new();
    for i in 0..hs.len() {
        for j in (i + 1)..hs.len() {
            let (a, b) = (hs[i], hs[j]);
            let det = a.alpha * b.beta - a.beta * b.alpha;
            let scale = a.alpha.hypot(a.beta) * b.alpha.hypot(b.beta);
            if det.abs() <= 1e-14 * scale {
                continue;
            }
            let p = Complex64::new(
                (a.gamma * b.beta - a.beta * b.gamma) / det,
                (a.alpha * b.gamma - a.gamma * b.alpha) / det,
            );
            let tol = CONTAINS_TOL * (1.0 + p.norm());
            if hs.iter().all(|h| h.excess(p) <= tol)
                && !pts.iter().any(|q| (q - p).norm() <= tol)
            {
                pts.push(p);
            }
        }
    }
    if pts.len() > 2 {
        let c = pts.iter().sum::<Complex64>() / pts.len() as f64;
        pts.sort_by(|p, q| (p - c).arg().total_cmp(&(q - c).arg()));
    }
    pts
}

/// Cartesian product of per-PQ-bus regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub regions: Vec<PowerRegion>,
}

impl UncertaintySet {
    pub fn new(regions: Vec<PowerRegion>) -> Self {
        Self { regions }
    }

    pub fn singleton(s: &DVector<Complex64>) -> Self {
        Self::new(s.iter().map(|&x| PowerRegion::singleton(x)).collect())
    }

    pub fn n_buses(&self) -> usize {
        self.regions.len()
    }

    /// Nonempty and bounded regions imply a convex, hence path-connected, product.
    pub fn validate(&self, n_pq: usize) -> Result<(), UncertaintyError> {
        if self.regions.len() != n_pq {
            return Err(UncertaintyError::BusCount {
                expected: n_pq,
                got: self.regions.len(),
            });
        }
        for (j, r) in self.regions.iter().enumerate() {
            r.validate(j + 1)?;
        }
        Ok(())
    }

    pub fn contains(&self, s: &DVector<Complex64>) -> bool {
        s.len() == self.regions.len() && self.regions.iter().zip(s.iter()).all(|(r, &x)| r.contains(x))
    }

    /// `n` injections from a validated set. The first samples walk through
    /// every region's vertices; the rest are random convex combinations of
    /// them, so every sample lies in the set.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<Complex64>> {
        let verts: Vec<Vec<Complex64>> = self.regions.iter().map(PowerRegion::vertices).collect();
        let cover = verts.iter().map(Vec::len).max().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                DVector::from_iterator(
                    verts.len(),
                    verts.iter().map(|vs| {
                        if k < cover {
                            vs[k % vs.len()]
                        } else {
                            random_convex_combination(vs, &mut rng)
                        }
                    }),
                )
            })
            .collect()
    }
}

pub(crate) fn random_convex_combination<R: Rng>(vs: &[Complex64], rng: &mut R) -> Complex64 {
    if vs.len() == 1 {
        return vs[0];
    }
    let weights: Vec<f64> = vs
        .iter()
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let total: f64 = weights.iter().sum();
    vs.iter().zip(&weights).map(|(v, w)| v * (w / total)).sum()
}

/// An uncertainty set, optionally parameterised by a scale `κ` that
/// multiplies every half-plane offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyFile {
    pub buses: Vec<PowerRegion>,
    #[serde(default)]
    pub kappa_template: bool,
}

impl UncertaintyFile {
    pub fn from_json_str(s: &str) -> Result<Self, UncertaintyError> {
        serde_json::from_str(s).map_err(|e| UncertaintyError::Parse(e.to_string()))
    }

    /// The concrete set; a template is instantiated at `κ = 1`.
    pub fn to_set(&self) -> UncertaintySet {
        UncertaintySet::new(self.buses.clone())
    }

    pub fn template(&self) -> KappaTemplate {
        KappaTemplate {
            regions: self.buses.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaTemplate {
    pub regions: Vec<PowerRegion>,
}

impl KappaTemplate {
    pub fn at(&self, kappa: f64) -> Result<UncertaintySet, UncertaintyError> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(UncertaintyError::BadKappa(kappa));
        }
        Ok(UncertaintySet::new(
            self.regions.iter().map(|r| r.scaled_gamma(kappa)).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn triangle(kappa: f64) -> PowerRegion {
        PowerRegion::HalfPlanes(vec![
            HalfPlane::new(-1.0, 0.0, kappa),
            HalfPlane::new(0.0, -1.0, kappa),
            HalfPlane::new(1.0, 1.0, 0.0),
        ])
    }

    #[test]
    fn validation_cases() {
        let s = UncertaintySet::new(vec![PowerRegion::singleton(c(0.1, 0.0))]);
        assert!(s.validate(1).is_ok());
        assert!(triangle(0.3).validate(1).is_ok());
        let empty =
            PowerRegion::HalfPlanes(vec![HalfPlane::new(1.0, 0.0, -1.0), HalfPlane::new(-1.0, 0.0, -1.0)]);
        assert_eq!(empty.validate(1), Err(UncertaintyError::EmptyRegion { bus: 1 }));
        let strip = PowerRegion::HalfPlanes(vec![HalfPlane::new(1.0, 0.0, 1.0), HalfPlane::new(-1.0, 0.0, 1.0)]);
        assert_eq!(strip.validate(2), Err(UncertaintyError::UnboundedRegion { bus: 2 }));
        let zero = PowerRegion::HalfPlanes(vec![HalfPlane::new(0.0, 0.0, 1.0)]);
        assert!(matches!(zero.validate(1), Err(UncertaintyError::ZeroNormal { .. })));
        assert!(matches!(s.validate(2), Err(UncertaintyError::BusCount { .. })));
        // A segment is a degenerate but valid polygon.
        assert!(PowerRegion::rect(-0.3, 0.0, 0.0, 0.0).validate(1).is_ok());
    }

    #[test]
    fn containment() {
        let b = PowerRegion::rect(-0.2, 0.0, -0.2, 0.0);
        assert!(b.contains(c(-0.1, -0.1)));
        assert!(b.contains(c(-0.2, 0.0)));
        assert!(!b.contains(c(0.001, 0.0)));
        let p = PowerRegion::singleton(c(-0.1, 0.05));
        assert!(p.contains(c(-0.1, 0.05)));
        assert!(!p.contains(c(-0.1 + 1e-3, 0.05)));
    }

    #[test]
    fn box_vertices_and_samples() {
        let set = UncertaintySet::new(vec![PowerRegion::rect(-0.2, 0.0, -0.1, 0.0)]);
        let vs = set.regions[0].vertices();
        assert_eq!(vs.len(), 4);
        let samples = set.sample(50, 7);
        for corner in &vs {
            assert!(samples.iter().any(|s| (s[0] - corner).norm() < 1e-12));
        }
        assert!(samples.iter().all(|s| set.contains(s)));
        assert_eq!(samples, set.sample(50, 7));
        assert_ne!(samples, set.sample(50, 8));
    }

    #[test]
    fn singleton_samples_repeat_point() {
        let s = DVector::from_vec(vec![c(0.1, -0.2), c(0.0, 0.3)]);
        let set = UncertaintySet::singleton(&s);
        assert!(set.sample(5, 1).iter().all(|x| *x == s));
    }

    #[test]
    fn template_scales_offsets() {
        let f = UncertaintyFile::from_json_str(
            r#"{"buses":[{"half_planes":[[1,0,0],[-1,0,1],[0,1,0],[0,-1,0]]}],"kappa_template":true}"#,
        )
        .unwrap();
        assert!(f.kappa_template);
        let set = f.template().at(0.09).unwrap();
        assert!(set.contains(&DVector::from_element(1, c(-0.09, 0.0))));
        assert!(!set.contains(&DVector::from_element(1, c(-0.1, 0.0))));
        assert!(f.template().at(-1.0).is_err());
    }

    #[test]
    fn file_forms() {
        let f = UncertaintyFile::from_json_str(r#"{"buses":[{"point":{"re":0.1,"im":0}}]}"#).unwrap();
        assert_eq!(f.to_set().regions[0], PowerRegion::singleton(c(0.1, 0.0)));
        assert!(UncertaintyFile::from_json_str(r#"{"buses":[{"circle":1}]}"#).is_err());
        assert!(UncertaintyFile::from_json_str(r#"{"buses":[],"extra":1}"#).is_err());
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(UncertaintyFile::from_json_str(&text).unwrap(), f);
    }
}
