//! Cylinder functions `f(mu) = g(mu(phi_1), ..., mu(phi_n))` and their linear
//! functional derivatives.
//!
//! The derivative versions returned here are the canonical cylinder ones:
//! `df/dmu(x) = sum_k d_k g * phi_k(x)` and
//! `d2f/dmu2(x, y) = sum_{kl} d_kl g * phi_k(x) phi_l(y)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{MvmError, Result};
use crate::measure::{AtomicMeasure, ControlVector, ScalarField};

/// Default composite Simpson panel count for FTC checks.
pub const DEFAULT_QUAD_PANELS: usize = 256;

type Outer = dyn Fn(&[f64]) -> f64 + Send + Sync;
type OuterGrad = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
/// Row-major `n x n` Hessian.
type OuterHess = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub struct CylinderFunction {
    inner: Vec<ScalarField>,
    outer: Arc<Outer>,
    outer_grad: Arc<OuterGrad>,
    outer_hess: Arc<OuterHess>,
    label: String,
}

impl fmt::Debug for CylinderFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunction")
            .field("label", &self.label)
            .field("inner", &self.inner)
            .finish()
    }
}

impl CylinderFunction {
    pub fn new<F, G, H>(
        label: impl Into<String>,
        inner: Vec<ScalarField>,
        outer: F,
        outer_grad: G,
        outer_hess: H,
    ) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        H: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            inner,
            outer: Arc::new(outer),
            outer_grad: Arc::new(outer_grad),
            outer_hess: Arc::new(outer_hess),
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn inner(&self) -> &[ScalarField] {
        &self.inner
    }

    pub fn arity(&self) -> usize {
        self.inner.len()
    }

    pub fn outer(&self, v: &[f64]) -> f64 {
        (self.outer)(v)
    }

    pub fn outer_grad(&self, v: &[f64]) -> Vec<f64> {
        (self.outer_grad)(v)
    }

    pub fn outer_hess(&self, v: &[f64]) -> Vec<f64> {
        (self.outer_hess)(v)
    }

    /// `mu(phi)`: linear, zero Hessian.
    pub fn linear(phi: ScalarField) -> Self {
        let label = format!("lin({})", phi.label());
        Self::new(label, vec![phi], |v| v[0], |_| vec![1.0], |_| vec![0.0])
    }

    /// `mu(phi)^k`.
    pub fn power_of_integral(phi: ScalarField, k: u32) -> Self {
        let label = format!("({})^{k}", phi.label());
        let kf = k as f64;
        Self::new(
            label,
            vec![phi],
            move |v| v[0].powi(k as i32),
            move |v| vec![if k == 0 { 0.0 } else { kf * v[0].powi(k as i32 - 1) }],
            move |v| {
                vec![if k < 2 {
                    0.0
                } else {
                    kf * (kf - 1.0) * v[0].powi(k as i32 - 2)
                }]
            },
        )
    }

    /// `mu(phi)^2`.
    pub fn mean_sq(phi: ScalarField) -> Self {
        let mut f = Self::power_of_integral(phi, 2);
        f.label = "mean_sq".into();
        f
    }

    /// `-mu(id)^2`.
    pub fn neg_mean_sq() -> Self {
        Self::new(
            "neg_mean_sq",
            vec![ScalarField::identity()],
            |v| -v[0] * v[0],
            |v| vec![-2.0 * v[0]],
            |_| vec![-2.0],
        )
    }

    /// Raw moment `mu(x^k)`.
    pub fn moment(k: u32) -> Self {
        let mut f = Self::linear(ScalarField::power(k));
        f.label = format!("moment_{k}");
        f
    }

    /// `mu(x^2) - mu(x)^2`.
    pub fn variance() -> Self {
        Self::new(
            "var",
            vec![ScalarField::identity(), ScalarField::square()],
            |v| v[1] - v[0] * v[0],
            |v| vec![-2.0 * v[0], 1.0],
            |_| vec![-2.0, 0.0, 0.0, 0.0],
        )
    }

    /// Built-in library addressable from configs.
    pub fn builtin(name: &str) -> Result<Self> {
        let f = match name {
            "mean_sq" => Self::mean_sq(ScalarField::identity()),
            "mean_sq_tanh" => Self::mean_sq(ScalarField::tanh()),
            "neg_mean_sq" => Self::neg_mean_sq(),
            "var" => Self::variance(),
            "mean_cube" => Self::power_of_integral(ScalarField::identity(), 3),
            other => match other.strip_prefix("moment_").map(str::parse::<u32>) {
                Some(Ok(k)) => Self::moment(k),
                _ => return Err(MvmError::InvalidArgument(format!("unknown cylinder function `{name}`"))),
            },
        };
        Ok(f)
    }

    /// Names accepted by [`CylinderFunction::builtin`] (with `moment_k` shown for k = 1..=4).
    pub fn builtin_names() -> Vec<String> {
        let mut names: Vec<String> = ["mean_sq", "mean_sq_tanh", "neg_mean_sq", "var", "mean_cube"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((1..=4).map(|k| format!("moment_{k}")));
        names
    }

    /// `(mu(phi_1), ..., mu(phi_n))` and the matrix `phi_k(x_i)`, row per k.
    fn integrals(&self, mu: &AtomicMeasure) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let table: Vec<Vec<f64>> = self
            .inner
            .iter()
            .map(|phi| mu.support().evaluate(phi))
            .collect::<Result<_>>()?;
        let v = table.iter().map(|row| mu.dot(row)).collect();
        Ok((v, table))
    }
}

pub fn eval_cylinder(f: &CylinderFunction, mu: &AtomicMeasure) -> Result<f64> {
    let (v, _) = f.integrals(mu)?;
    Ok(f.outer(&v))
}

/// `df/dmu(x, mu)`.
pub fn d_mu(f: &CylinderFunction, x: &[f64], mu: &AtomicMeasure) -> Result<f64> {
    let (v, _) = f.integrals(mu)?;
    let g = f.outer_grad(&v);
    Ok(f.inner.iter().zip(&g).map(|(phi, gk)| gk * phi.eval(x)).sum())
}

/// `d2f/dmu2(x, y, mu)`.
pub fn d2_mu(f: &CylinderFunction, x: &[f64], y: &[f64], mu: &AtomicMeasure) -> Result<f64> {
    let (v, _) = f.integrals(mu)?;
    let h = f.outer_hess(&v);
    let n = f.arity();
    let fx: Vec<f64> = f.inner.iter().map(|phi| phi.eval(x)).collect();
    let fy: Vec<f64> = f.inner.iter().map(|phi| phi.eval(y)).collect();
    let mut s = 0.0;
    for k in 0..n {
        for l in 0..n {
            s += h[k * n + l] * fx[k] * fy[l];
        }
    }
    Ok(s)
}

/// `sigma_i = p_i (rho_i - p . rho)`, the diffusion direction on the atoms.
pub fn sigma(weights: &[f64], rho: &[f64]) -> Vec<f64> {
    let m: f64 = weights.iter().zip(rho).map(|(p, r)| p * r).sum();
    weights.iter().zip(rho).map(|(p, r)| p * (r - m)).collect()
}

/// `Lf(mu, rho) = 1/2 sum_{ij} d2f/dmu2(x_i, x_j, mu) sigma_i sigma_j`.
pub fn generator_l(f: &CylinderFunction, mu: &AtomicMeasure, rho: &ControlVector) -> Result<f64> {
    mu.check_aligned(rho)?;
    let (v, table) = f.integrals(mu)?;
    let s = sigma(mu.weights(), rho.values());
    // sum_ij d2f(x_i,x_j) s_i s_j = c^T H c with c_k = sum_i phi_k(x_i) s_i
    let c: Vec<f64> = table
        .iter()
        .map(|row| row.iter().zip(&s).map(|(a, b)| a * b).sum())
        .collect();
    let h = f.outer_hess(&v);
    let n = f.arity();
    let mut q = 0.0;
    for k in 0..n {
        for l in 0..n {
            q += h[k * n + l] * c[k] * c[l];
        }
    }
    Ok(0.5 * q)
}

/// First-derivative pairing `int df/dmu(x, mu) (nu - mu)(dx)` on a shared support.
fn first_variation(f: &CylinderFunction, mu: &AtomicMeasure, diff: &[f64]) -> Result<f64> {
    let (v, table) = f.integrals(mu)?;
    let g = f.outer_grad(&v);
    Ok(table
        .iter()
        .zip(&g)
        .map(|(row, gk)| gk * row.iter().zip(diff).map(|(a, d)| a * d).sum::<f64>())
        .sum())
}

fn second_variation(f: &CylinderFunction, mu: &AtomicMeasure, diff: &[f64]) -> Result<f64> {
    let (v, table) = f.integrals(mu)?;
    let h = f.outer_hess(&v);
    let c: Vec<f64> = table
        .iter()
        .map(|row| row.iter().zip(diff).map(|(a, d)| a * d).sum())
        .collect();
    let n = f.arity();
    let mut q = 0.0;
    for k in 0..n {
        for l in 0..n {
            q += h[k * n + l] * c[k] * c[l];
        }
    }
    Ok(q)
}

/// Composite Simpson rule on `[0, 1]` with an even number of panels.
pub fn simpson<F: FnMut(f64) -> Result<f64>>(mut g: F, panels: usize) -> Result<f64> {
    let m = if panels % 2 == 1 { panels + 1 } else { panels };
    let h = 1.0 / m as f64;
    let mut s = g(0.0)? + g(1.0)?;
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * g(i as f64 * h)?;
    }
    Ok(s * h / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtcOrder {
    First,
    Second,
}

/// Residual of the first- or second-order fundamental theorem of calculus
/// along `t -> t nu + (1 - t) mu`.
pub fn ftc_residual(
    f: &CylinderFunction,
    mu: &AtomicMeasure,
    nu: &AtomicMeasure,
    order: FtcOrder,
    n_quad: usize,
) -> Result<f64> {
    if n_quad < 2 {
        return Err(MvmError::InvalidArgument(format!(
            "quadrature needs at least 2 panels, got {n_quad}"
        )));
    }
    if mu.support().id() != nu.support().id() {
        return Err(MvmError::Alignment {
            expected: mu.len(),
            got: nu.len(),
            support_id: mu.support().id(),
            got_id: nu.support().id(),
        });
    }
    let diff: Vec<f64> = nu.weights().iter().zip(mu.weights()).map(|(b, a)| b - a).collect();
    let mix = |t: f64| {
        let w: Vec<f64> = mu
            .weights()
            .iter()
            .zip(nu.weights())
            .map(|(a, b)| t * b + (1.0 - t) * a)
            .collect();
        AtomicMeasure::from_parts_unchecked(mu.support().clone(), w)
    };
    let delta = eval_cylinder(f, nu)? - eval_cylinder(f, mu)?;
    match order {
        FtcOrder::First => {
            let integral = simpson(|t| first_variation(f, &mix(t), &diff), n_quad)?;
            Ok((delta - integral).abs())
        }
        FtcOrder::Second => {
            // int_0^1 int_0^t g(s) ds dt = int_0^1 (1 - s) g(s) ds
            let lhs = delta - first_variation(f, mu, &diff)?;
            let integral = simpson(|s| Ok((1.0 - s) * second_variation(f, &mix(s), &diff)?), n_quad)?;
            Ok((lhs - integral).abs())
        }
    }
}
