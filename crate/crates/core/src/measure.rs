//! Finitely supported probability measures on `R^d`.
//!
//! A [`Support`] is a fixed, shared list of distinct atoms. Measures, controls
//! and functions restricted to the atoms are all vectors aligned with a
//! support, which is identified by a process-unique id. Atoms carrying zero
//! weight stay in storage so that support decrease can be observed along a
//! simulated path.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{MvmError, Result};

/// Tolerance on `sum(weights) == 1` accepted by [`AtomicMeasure::new`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

static NEXT_SUPPORT_ID: AtomicU64 = AtomicU64::new(1);

/// A list of pairwise distinct points in `R^dim`, stored row-major.
#[derive(Debug, PartialEq)]
pub struct Support {
    id: u64,
    dim: usize,
    coords: Vec<f64>,
}

impl Support {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Arc<Self>> {
        if dim == 0 {
            return Err(MvmError::InvalidMeasure("dimension must be positive".into()));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(MvmError::InvalidMeasure(format!(
                "{} coordinates do not form a nonempty list of {dim}-dimensional points",
                coords.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(MvmError::InvalidMeasure(format!("non-finite coordinate {c}")));
        }
        let len = coords.len() / dim;
        for i in 0..len {
            for j in 0..i {
                if coords[i * dim..(i + 1) * dim] == coords[j * dim..(j + 1) * dim] {
                    return Err(MvmError::InvalidMeasure(format!("atoms {j} and {i} coincide")));
                }
            }
        }
        Ok(Arc::new(Self {
            id: NEXT_SUPPORT_ID.fetch_add(1, Ordering::Relaxed),
            dim,
            coords,
        }))
    }

    /// One-dimensional support from a list of reals.
    pub fn line(points: &[f64]) -> Result<Arc<Self>> {
        Self::new(1, points.to_vec())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// First coordinate of every atom; the natural "identity" vector for `d = 1`.
    pub fn first_coords(&self) -> Vec<f64> {
        self.points().map(|x| x[0]).collect()
    }

    /// Values of `phi` at every atom.
    pub fn evaluate(&self, phi: &ScalarField) -> Result<Vec<f64>> {
        self.points()
            .enumerate()
            .map(|(i, x)| {
                let v = phi.eval(x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(MvmError::Evaluation {
                        label: phi.label().to_string(),
                        atom: i,
                        value: v,
                    })
                }
            })
            .collect()
    }
}

type FieldFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A real function on `R^d` with advisory growth metadata.
#[derive(Clone)]
pub struct ScalarField {
    eval: Arc<FieldFn>,
    growth_exponent: f64,
    label: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("label", &self.label)
            .field("growth_exponent", &self.growth_exponent)
            .finish()
    }
}

impl ScalarField {
    pub fn new<F>(label: impl Into<String>, growth_exponent: f64, eval: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(eval),
            growth_exponent,
            label: label.into(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `r` in `|phi(x)| <= c (1 + |x|^r)`; metadata only.
    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    /// `x -> x_1`.
    pub fn identity() -> Self {
        Self::new("id", 1.0, |x| x[0])
    }

    /// `x -> x_1^2`.
    pub fn square() -> Self {
        Self::new("sq", 2.0, |x| x[0] * x[0])
    }

    pub fn power(k: u32) -> Self {
        Self::new(format!("x^{k}"), k as f64, move |x| x[0].powi(k as i32))
    }

    pub fn tanh() -> Self {
        Self::new("tanh", 0.0, |x| x[0].tanh())
    }

    pub fn abs() -> Self {
        Self::new("abs", 1.0, |x| x.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), 0.0, move |_| c)
    }

    pub fn scaled(&self, a: f64) -> Self {
        let inner = self.eval.clone();
        Self::new(format!("{a}*{}", self.label), self.growth_exponent, move |x| {
            a * inner(x)
        })
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &ScalarField, b: f64) -> Self {
        let (f, g) = (self.eval.clone(), other.eval.clone());
        Self::new(
            format!("{a}*{}+{b}*{}", self.label, other.label),
            self.growth_exponent.max(other.growth_exponent),
            move |x| a * f(x) + b * g(x),
        )
    }

    pub fn shifted(&self, c: f64) -> Self {
        let f = self.eval.clone();
        Self::new(format!("{}+{c}", self.label), self.growth_exponent, move |x| f(x) + c)
    }

    pub fn product(&self, other: &ScalarField) -> Self {
        let (f, g) = (self.eval.clone(), other.eval.clone());
        Self::new(
            format!("{}*{}", self.label, other.label),
            self.growth_exponent + other.growth_exponent,
            move |x| f(x) * g(x),
        )
    }
}

/// A control `rho` through its values on the atoms of one support.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    values: Vec<f64>,
    support_id: u64,
}

impl ControlVector {
    pub fn new(support: &Support, values: Vec<f64>) -> Result<Self> {
        if values.len() != support.len() {
            return Err(MvmError::Alignment {
                expected: support.len(),
                got: values.len(),
                support_id: support.id(),
                got_id: support.id(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MvmError::Evaluation {
                label: "control".into(),
                atom: i,
                value: values[i],
            });
        }
        Ok(Self {
            values,
            support_id: support.id(),
        })
    }

    pub fn from_field(support: &Support, rho: &ScalarField) -> Result<Self> {
        Self::new(support, support.evaluate(rho)?)
    }

    pub fn constant(support: &Support, c: f64) -> Self {
        Self {
            values: vec![c; support.len()],
            support_id: support.id(),
        }
    }

    pub(crate) fn from_raw(values: Vec<f64>, support_id: u64) -> Self {
        Self { values, support_id }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support_id(&self) -> u64 {
        self.support_id
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| a * v).collect(),
            support_id: self.support_id,
        }
    }
}

/// Anything that can be read off as a vector of values on a measure's atoms.
pub trait Observable {
    fn values_on(&self, mu: &AtomicMeasure) -> Result<Vec<f64>>;
}

impl Observable for ScalarField {
    fn values_on(&self, mu: &AtomicMeasure) -> Result<Vec<f64>> {
        mu.support().evaluate(self)
    }
}

impl Observable for ControlVector {
    fn values_on(&self, mu: &AtomicMeasure) -> Result<Vec<f64>> {
        mu.check_aligned(self)?;
        Ok(self.values.clone())
    }
}

impl Observable for [f64] {
    fn values_on(&self, mu: &AtomicMeasure) -> Result<Vec<f64>> {
        if self.len() != mu.len() {
            return Err(MvmError::Alignment {
                expected: mu.len(),
                got: self.len(),
                support_id: mu.support().id(),
                got_id: mu.support().id(),
            });
        }
        Ok(self.to_vec())
    }
}

impl Observable for Vec<f64> {
    fn values_on(&self, mu: &AtomicMeasure) -> Result<Vec<f64>> {
        self.as_slice().values_on(mu)
    }
}

/// A probability measure `sum_i p_i delta_{x_i}` on a shared support.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    support: Arc<Support>,
    weights: Vec<f64>,
}

impl AtomicMeasure {
    pub fn new(support: Arc<Support>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(MvmError::InvalidMeasure(format!(
                "{} weights for {} atoms",
                weights.len(),
                support.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(MvmError::InvalidMeasure(format!("invalid weight {w}")));
        }
        let total = pairwise_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MvmError::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { support, weights })
    }

    /// One-dimensional measure built on a fresh support.
    pub fn from_line(points: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(Support::line(points)?, weights.to_vec())
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(Support::new(point.len(), point.to_vec())?, vec![1.0])
    }

    /// Skips validation; used by simulators that renormalise every step.
    pub(crate) fn from_parts_unchecked(support: Arc<Support>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(support.len(), weights.len());
        Self { support, weights }
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_dirac(&self) -> bool {
        self.weights.iter().filter(|w| **w > 0.0).count() == 1
    }

    /// Same support, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.support.clone(), weights)
    }

    pub fn check_aligned(&self, rho: &ControlVector) -> Result<()> {
        if rho.support_id() != self.support.id() || rho.values().len() != self.len() {
            return Err(MvmError::Alignment {
                expected: self.len(),
                got: rho.values().len(),
                support_id: self.support.id(),
                got_id: rho.support_id(),
            });
        }
        Ok(())
    }

    /// `sum_i p_i v_i` for values aligned with the atoms.
    pub fn dot(&self, values: &[f64]) -> f64 {
        dot(&self.weights, values)
    }

    pub fn mean(&self) -> f64 {
        mean_of(&self.weights, &self.support.first_coords())
    }

    pub fn variance(&self) -> f64 {
        let x = self.support.first_coords();
        covariance_of(&self.weights, &x, &x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mean_of(weights: &[f64], values: &[f64]) -> f64 {
    dot(weights, values)
}

/// Centered form of `mu(phi psi) - mu(phi) mu(psi)`; exactly zero on Diracs.
pub(crate) fn covariance_of(weights: &[f64], phi: &[f64], psi: &[f64]) -> f64 {
    let m_phi = dot(weights, phi);
    let m_psi = dot(weights, psi);
    weights
        .iter()
        .zip(phi.iter().zip(psi))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (a, b))| w * (a - m_phi) * (b - m_psi))
        .sum()
}

/// Fixed-order pairwise summation; the result does not depend on scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `mu(phi) = sum_i p_i phi(x_i)`.
pub fn integrate(mu: &AtomicMeasure, phi: &ScalarField) -> Result<f64> {
    Ok(mu.dot(&mu.support().evaluate(phi)?))
}

/// `Cov_mu(phi, psi) = mu(phi psi) - mu(phi) mu(psi)`.
pub fn covariance<A, B>(mu: &AtomicMeasure, phi: &A, psi: &B) -> Result<f64>
where
    A: Observable + ?Sized,
    B: Observable + ?Sized,
{
    let a = phi.values_on(mu)?;
    let b = psi.values_on(mu)?;
    Ok(covariance_of(mu.weights(), &a, &b))
}

/// Support order: every charged atom of `mu` is a charged atom of `nu`.
pub fn dominates(mu: &AtomicMeasure, nu: &AtomicMeasure) -> bool {
    if mu.dim() != nu.dim() {
        return false;
    }
    mu.support()
        .points()
        .zip(mu.weights())
        .filter(|(_, w)| **w > 0.0)
        .all(|(x, _)| nu.support().points().zip(nu.weights()).any(|(y, w)| *w > 0.0 && x == y))
}

/// `W_1` on the line as the `L^1` distance between quantile functions.
pub fn wasserstein1(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Result<f64> {
    for m in [mu, nu] {
        if m.dim() != 1 {
            return Err(MvmError::UnsupportedDimension(m.dim()));
        }
    }
    let sorted = |m: &AtomicMeasure| {
        let mut atoms: Vec<(f64, f64)> = m
            .support()
            .first_coords()
            .into_iter()
            .zip(m.weights().iter().copied())
            .filter(|(_, w)| *w > 0.0)
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    };
    let (a, b) = (sorted(mu), sorted(nu));
    // The quantile L^1 distance equals the integral of |F_mu - F_nu| on the line.
    let mut grid: Vec<f64> = a.iter().chain(&b).map(|(x, _)| *x).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut total = 0.0;
    for k in 0..grid.len() - 1 {
        while i < a.len() && a[i].0 <= grid[k] {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 <= grid[k] {
            fb += b[j].1;
            j += 1;
        }
        total += (fa - fb).abs() * (grid[k + 1] - grid[k]);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point(a: f64, b: f64, pa: f64) -> AtomicMeasure {
        AtomicMeasure::from_line(&[a, b], &[pa, 1.0 - pa]).unwrap()
    }

    #[test]
    fn integrate_examples() {
        let id = ScalarField::identity();
        assert_eq!(integrate(&two_point(0.0, 2.0, 0.5), &id).unwrap(), 1.0);
        let d = AtomicMeasure::dirac(&[0.3]).unwrap();
        assert_eq!(integrate(&d, &ScalarField::tanh()).unwrap(), 0.3f64.tanh());
        let mu = two_point(0.0, 4.0, 0.25);
        // 0.25 * 0 + 0.75 * 4
        assert_eq!(integrate(&mu, &id).unwrap(), 3.0);
    }

    #[test]
    fn integrate_reports_offending_atom() {
        let mu = two_point(0.0, 1.0, 0.5);
        let bad = ScalarField::new("inv", 0.0, |x| 1.0 / x[0]);
        match integrate(&mu, &bad) {
            Err(MvmError::Evaluation { atom, .. }) => assert_eq!(atom, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn covariance_examples() {
        let id = ScalarField::identity();
        assert_eq!(covariance(&two_point(-1.0, 1.0, 0.5), &id, &id).unwrap(), 1.0);
        let d = AtomicMeasure::dirac(&[2.0]).unwrap();
        assert_eq!(covariance(&d, &id, &ScalarField::square()).unwrap(), 0.0);
        // mu(x^2) - mu(x)^2 = 12 - 9
        let mu = two_point(0.0, 4.0, 0.25);
        assert!((covariance(&mu, &id, &id).unwrap() - 3.0).abs() < 1e-15);
        assert!((mu.variance() - 3.0).abs() < 1e-15);
        assert_eq!(mu.mean(), 3.0);
    }

    #[test]
    fn covariance_rejects_foreign_control() {
        let mu = two_point(0.0, 1.0, 0.5);
        let other = Support::line(&[0.0, 1.0]).unwrap();
        let rho = ControlVector::new(&other, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            covariance(&mu, &rho, &ScalarField::identity()),
            Err(MvmError::Alignment { .. })
        ));
    }

    #[test]
    fn dominates_examples() {
        let d0 = AtomicMeasure::dirac(&[0.0]).unwrap();
        let m = two_point(0.0, 1.0, 0.5);
        assert!(dominates(&d0, &m));
        assert!(!dominates(&m, &d0));
        assert!(dominates(&m, &m));
        let zero_weight = two_point(0.0, 5.0, 1.0);
        assert!(dominates(&zero_weight, &d0));
    }

    #[test]
    fn wasserstein_examples() {
        let d0 = AtomicMeasure::dirac(&[0.0]).unwrap();
        let d1 = AtomicMeasure::dirac(&[1.0]).unwrap();
        assert_eq!(wasserstein1(&d0, &d1).unwrap(), 1.0);
        let m = two_point(0.0, 1.0, 0.5);
        assert_eq!(wasserstein1(&m, &m).unwrap(), 0.0);
        // quantile functions differ by 1 on (1/2, 1]
        assert_eq!(wasserstein1(&m, &d0).unwrap(), 0.5);
        let planar = AtomicMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(
            wasserstein1(&planar, &planar),
            Err(MvmError::UnsupportedDimension(2))
        ));
    }

    #[test]
    fn constructor_invariants() {
        assert!(AtomicMeasure::from_line(&[0.0, 0.0], &[0.5, 0.5]).is_err());
        assert!(AtomicMeasure::from_line(&[0.0, 1.0], &[0.5, 0.6]).is_err());
        assert!(AtomicMeasure::from_line(&[0.0, 1.0], &[1.5, -0.5]).is_err());
        assert!(AtomicMeasure::from_line(&[0.0], &[0.5, 0.5]).is_err());
        assert!(AtomicMeasure::from_line(&[], &[]).is_err());
    }

    fn arb_measure(max_atoms: usize) -> impl Strategy<Value = AtomicMeasure> {
        prop::collection::btree_set(-40i32..40, 1..max_atoms).prop_flat_map(|pts| {
            let n = pts.len();
            (Just(pts), prop::collection::vec(0.01f64..1.0, n)).prop_map(|(pts, raw)| {
                let total: f64 = raw.iter().sum();
                let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
                let rest: f64 = w[1..].iter().sum();
                w[0] = 1.0 - rest;
                let pts: Vec<f64> = pts.into_iter().map(|p| p as f64 / 8.0).collect();
                AtomicMeasure::from_line(&pts, &w).unwrap()
            })
        })
    }

    fn battery() -> Vec<ScalarField> {
        vec![
            ScalarField::identity(),
            ScalarField::square(),
            ScalarField::tanh(),
            ScalarField::new("sin", 0.0, |x| x[0].sin()),
        ]
    }

    proptest! {
        #[test]
        fn integrate_is_linear(mu in arb_measure(8), a in -3.0f64..3.0, b in -3.0f64..3.0,
                               i in 0usize..4, j in 0usize..4) {
            let fs = battery();
            let combo = fs[i].linear_combination(a, &fs[j], b);
            let lhs = integrate(&mu, &combo).unwrap();
            let rhs = a * integrate(&mu, &fs[i]).unwrap() + b * integrate(&mu, &fs[j]).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn covariance_symmetric_bilinear_shift_invariant(mu in arb_measure(8), a in -2.0f64..2.0,
                c in -5.0f64..5.0, i in 0usize..4, j in 0usize..4, k in 0usize..4) {
            let fs = battery();
            let (f, g, h) = (&fs[i], &fs[j], &fs[k]);
            let fg = covariance(&mu, f, g).unwrap();
            prop_assert!((fg - covariance(&mu, g, f).unwrap()).abs() <= 1e-12);
            let lin = covariance(&mu, &f.linear_combination(a, h, 1.0), g).unwrap();
            let expect = a * fg + covariance(&mu, h, g).unwrap();
            prop_assert!((lin - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            prop_assert!(covariance(&mu, f, f).unwrap() >= -1e-12);
            prop_assert!((covariance(&mu, &f.shifted(c), g).unwrap() - fg).abs() <= 1e-12);
        }

        #[test]
        fn dominates_is_a_preorder(a in arb_measure(6), b in arb_measure(6), c in arb_measure(6)) {
            prop_assert!(dominates(&a, &a));
            if dominates(&a, &b) && dominates(&b, &c) {
                prop_assert!(dominates(&a, &c));
            }
            if dominates(&a, &b) && dominates(&b, &a) {
                let charged = |m: &AtomicMeasure| {
                    let mut v: Vec<f64> = m.support().first_coords().into_iter()
                        .zip(m.weights()).filter(|(_, w)| **w > 0.0).map(|(x, _)| x).collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                prop_assert_eq!(charged(&a), charged(&b));
            }
        }

        #[test]
        fn wasserstein_triangle(a in arb_measure(6), b in arb_measure(6), c in arb_measure(6)) {
            let ab = wasserstein1(&a, &b).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-10);
            prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() <= 1e-12);
        }
    }
}
