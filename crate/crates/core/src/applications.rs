//! Worked control problems: two closed-form discounted examples, the Root
//! embedding, robust Asian bounds and an asymmetric-information game, plus a
//! small validator that runs each against its closed form.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crate::calculus::sigma;
use crate::error::{MvmError, Result};
use crate::hjb::{build_grid, solve_stationary, symmetric_move, HjbProblem, SimplexGrid, SymmetricMove};
use crate::measure::{covariance_of, AtomicMeasure, ControlVector, ScalarField, Support};
use crate::par;
use crate::sde::CostFunctional;

pub const DEFAULT_SLICE_TOL: f64 = 1e-8;
pub const DEFAULT_SLICE_ITERS: usize = 100_000;

/// `c = mu(phi)^2 + alpha Var_mu(rho_bar - rho) - Cov_mu(phi, rho)^2 / beta`.
pub fn ex91_cost(
    support: &Support,
    phi: &ScalarField,
    rho_bar: &ControlVector,
    alpha: f64,
    beta: f64,
) -> Result<CostFunctional> {
    let phi_v = support.evaluate(phi)?;
    let target = rho_bar.values().to_vec();
    let label = format!("ex91({}, alpha={alpha})", phi.label());
    CostFunctional::new(label, beta, move |mu, rho| {
        let w = mu.weights();
        let m: f64 = w.iter().zip(&phi_v).map(|(p, f)| p * f).sum();
        let gap: Vec<f64> = target.iter().zip(rho.values()).map(|(a, b)| a - b).collect();
        let cov = covariance_of(w, &phi_v, rho.values());
        m * m + alpha * covariance_of(w, &gap, &gap) - cov * cov / beta
    })
}

pub fn ex91_value(mu: &AtomicMeasure, phi: &ScalarField, beta: f64) -> Result<f64> {
    let m = crate::measure::integrate(mu, phi)?;
    Ok(m * m / beta)
}

/// `c = variance_weight Var(mu)^2 - beta M(mu)^2`, `+inf` when `Var_mu(rho) > Var(mu)`.
pub fn variance_constrained_cost(beta: f64, variance_weight: f64) -> Result<CostFunctional> {
    CostFunctional::new(format!("{variance_weight}var^2-beta*mean^2"), beta, move |mu, rho| {
        let w = mu.weights();
        let x = mu.support().first_coords();
        let var = covariance_of(w, &x, &x);
        let spread = covariance_of(w, rho.values(), rho.values());
        if spread > var * (1.0 + 1e-12) + 1e-15 {
            return f64::INFINITY;
        }
        let m: f64 = w.iter().zip(&x).map(|(p, v)| p * v).sum();
        variance_weight * var * var - beta * m * m
    })
}

/// `c = 2 Var(mu)^2 - beta M(mu)^2` with the variance constraint on `rho`.
pub fn ex92_cost(beta: f64) -> Result<CostFunctional> {
    variance_constrained_cost(beta, 2.0)
}

pub fn ex92_value(mu: &AtomicMeasure) -> f64 {
    -mu.mean().powi(2)
}

/// Controls `{id, 0, id/2, 2 id}`.
pub fn ex9_controls(support: &Support) -> Result<Vec<ControlVector>> {
    let id = ControlVector::from_field(support, &ScalarField::identity())?;
    Ok(vec![
        id.clone(),
        ControlVector::constant(support, 0.0),
        id.scaled(0.5),
        id.scaled(2.0),
    ])
}

fn three_point() -> Result<Arc<Support>> {
    Support::line(&[-1.0, 0.0, 1.0])
}

pub fn ex91_problem(m: u32, delta: f64) -> Result<HjbProblem> {
    let s = three_point()?;
    let controls = ex9_controls(&s)?;
    let cost = ex91_cost(&s, &ScalarField::tanh(), &controls[0], 0.5, 1.0)?;
    Ok(HjbProblem::new(build_grid(s, m)?, controls, cost)?.with_delta(delta))
}

pub fn ex92_problem(m: u32, delta: f64) -> Result<HjbProblem> {
    let s = three_point()?;
    let controls = ex9_controls(&s)?;
    Ok(HjbProblem::new(build_grid(s, m)?, controls, ex92_cost(1.0)?)?.with_delta(delta))
}

/// Geometric scale grid `lo, lo r, lo r^2, ...` up to `hi`.
pub fn geometric_scales(lo: f64, hi: f64, ratio: f64) -> Vec<f64> {
    let mut out = vec![lo];
    while *out.last().expect("nonempty") < hi {
        let next = out.last().expect("nonempty") * ratio;
        out.push(next);
    }
    out
}

fn ensure_slice_params(tol: f64, iters: usize, delta: f64) -> Result<()> {
    if !(tol > 0.0) || iters == 0 {
        return Err(MvmError::InvalidArgument(
            "slice tolerance and iteration cap must be positive".into(),
        ));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(MvmError::InvalidArgument(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(())
}

fn variance_at(x: &[f64], p: &[f64]) -> f64 {
    covariance_of(p, x, x)
}

/// Root embedding: minimise `E f(<xi>_tau)` over martingales with
/// `Cov_xi(id, rho)` kept in `(1 - kappa, 1 + kappa)`.
#[derive(Clone)]
pub struct RootProblem {
    pub mu0: AtomicMeasure,
    pub f: ScalarField,
    pub kappa: f64,
    pub q_max: f64,
    pub m: u32,
    pub dq: f64,
    pub delta: f64,
    /// Scales `c` of the control family `{c id}`; empty means derived from the grid.
    pub scales: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl fmt::Debug for RootProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RootProblem")
            .field("f", &self.f.label())
            .field("kappa", &self.kappa)
            .field("q_max", &self.q_max)
            .field("m", &self.m)
            .field("dq", &self.dq)
            .field("delta", &self.delta)
            .finish()
    }
}

impl RootProblem {
    /// Defaults: `q_max = 4 Var(mu)`, `M = 200`, `Delta = 2e-3`, `dq = (1 - kappa)^2 Delta`.
    pub fn new(mu0: AtomicMeasure, f: ScalarField, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(MvmError::InvalidArgument(format!(
                "kappa must lie in (0, 1), got {kappa}"
            )));
        }
        if mu0.dim() != 1 {
            return Err(MvmError::UnsupportedDimension(mu0.dim()));
        }
        let delta = 2e-3;
        let q_max = 4.0 * mu0.variance();
        Ok(Self {
            mu0,
            f,
            kappa,
            q_max,
            m: 200,
            dq: (1.0 - kappa).powi(2) * delta,
            delta,
            scales: Vec::new(),
            tol: 1e-10,
            max_iters: DEFAULT_SLICE_ITERS,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RootSolution {
    pub grid: SimplexGrid,
    pub q: Vec<f64>,
    /// `values[k][j]` = `v(q_k, p_j)`.
    pub values: Vec<Vec<f64>>,
    pub infeasible_nodes: usize,
    pub max_slice_iters: usize,
    pub converged: bool,
}

impl RootSolution {
    /// Value at `q_k` for the slice index nearest `q`.
    pub fn value_at(&self, q: f64, p: &[f64]) -> f64 {
        let dq = if self.q.len() > 1 { self.q[1] - self.q[0] } else { 1.0 };
        let k = ((q / dq).round() as usize).min(self.q.len() - 1);
        self.grid.interpolate(&self.values[k], p)
    }
}

struct RootBranch {
    step: SymmetricMove,
    inc: f64,
    var_plus: f64,
    var_minus: f64,
}

enum RootNode {
    Dirac,
    Unreachable(f64),
    Free(Vec<RootBranch>),
}

pub fn solve_root(prob: &RootProblem) -> Result<RootSolution> {
    ensure_slice_params(prob.tol, prob.max_iters, prob.delta)?;
    if !(prob.dq > 0.0 && prob.q_max >= 0.0) {
        return Err(MvmError::InvalidArgument(
            "dq must be positive and q_max nonnegative".into(),
        ));
    }
    let grid = build_grid(prob.mu0.support().clone(), prob.m)?;
    let x = prob.mu0.support().first_coords();
    let h = prob.delta.sqrt();
    let f = |q: f64| prob.f.eval(&[q]);
    let (lo, hi) = (1.0 - prob.kappa, 1.0 + prob.kappa);

    let scales = if prob.scales.is_empty() {
        let vars: Vec<f64> = (0..grid.len())
            .filter(|j| grid.vertex(*j).is_none())
            .map(|j| variance_at(&x, &grid.point(j)))
            .filter(|v| *v > 0.0)
            .collect();
        let vmin = vars.iter().cloned().fold(f64::INFINITY, f64::min);
        let vmax = vars.iter().cloned().fold(0.0, f64::max);
        // ratio below (1 + kappa) / (1 - kappa) leaves a grid point in every feasible window
        let ratio = (hi / lo).sqrt();
        geometric_scales(lo / vmax * ratio.sqrt(), hi / vmin, ratio)
    } else {
        prob.scales.clone()
    };

    let nodes: Vec<RootNode> = par::map_range(grid.len(), |j| {
        if grid.vertex(j).is_some() {
            return RootNode::Dirac;
        }
        let p = grid.point(j);
        let var = variance_at(&x, &p);
        let branches: Vec<RootBranch> = scales
            .iter()
            .filter(|c| {
                let cov = *c * var;
                cov > lo && cov < hi
            })
            .map(|c| {
                let rho: Vec<f64> = x.iter().map(|v| c * v).collect();
                let z = sigma(&p, &rho);
                let step = symmetric_move(&grid, &p, &z, h);
                let cov = c * var;
                RootBranch {
                    inc: step.lambda * step.lambda * cov * cov * prob.delta,
                    var_plus: variance_at(&x, &step.plus_point),
                    var_minus: variance_at(&x, &step.minus_point),
                    step,
                }
            })
            .collect();
        if branches.is_empty() {
            RootNode::Unreachable(var)
        } else {
            RootNode::Free(branches)
        }
    });
    let infeasible_nodes = nodes.iter().filter(|n| matches!(n, RootNode::Unreachable(_))).count();

    let top = (prob.q_max / prob.dq).ceil() as usize;
    let q: Vec<f64> = (0..=top).map(|k| k as f64 * prob.dq).collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); top + 1];
    let mut max_slice_iters = 0;
    let mut converged = true;

    for k in (0..=top).rev() {
        let qk = q[k];
        let guess: Vec<f64> = match values.get(k + 1) {
            Some(v) if !v.is_empty() => v.clone(),
            _ => (0..grid.len())
                .map(|j| f(qk + variance_at(&x, &grid.point(j))))
                .collect(),
        };
        let mut cur = guess;
        let mut next = vec![0.0; grid.len()];
        let mut iters = 0;
        loop {
            iters += 1;
            let later = &values;
            let current = &cur;
            let read = |s: usize, stencil: &crate::hjb::Stencil, var: f64| -> f64 {
                if s > top {
                    f(s as f64 * prob.dq + var)
                } else if s == k {
                    stencil.apply(current)
                } else {
                    stencil.apply(&later[s])
                }
            };
            par::fill_indexed(&mut next, |j| match &nodes[j] {
                RootNode::Dirac => f(qk),
                RootNode::Unreachable(var) => f(qk + var),
                RootNode::Free(branches) => {
                    let mut best = f64::INFINITY;
                    for b in branches {
                        let target = qk + b.inc;
                        let pos = target / prob.dq;
                        let s = (pos.floor() as usize).max(k);
                        let w = (pos - s as f64).clamp(0.0, 1.0);
                        let plus =
                            (1.0 - w) * read(s, &b.step.plus, b.var_plus) + w * read(s + 1, &b.step.plus, b.var_plus);
                        let minus = (1.0 - w) * read(s, &b.step.minus, b.var_minus)
                            + w * read(s + 1, &b.step.minus, b.var_minus);
                        best = best.min(0.5 * (plus + minus));
                    }
                    best
                }
            });
            let change = next.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut cur, &mut next);
            if change < prob.tol {
                break;
            }
            if iters >= prob.max_iters {
                converged = false;
                break;
            }
        }
        max_slice_iters = max_slice_iters.max(iters);
        values[k] = cur;
    }
    Ok(RootSolution {
        grid,
        q,
        values,
        infeasible_nodes,
        max_slice_iters,
        converged,
    })
}

/// Robust upper bound for an Asian payoff `F(int_0^T S dt)` over martingale beliefs.
#[derive(Clone)]
pub struct AsianProblem {
    pub mu0: AtomicMeasure,
    pub payoff: ScalarField,
    pub horizon: f64,
    pub n_t: usize,
    pub n_a: usize,
    pub m: u32,
    pub delta: f64,
    pub controls: Vec<ControlVector>,
    pub tol: f64,
    pub max_iters: usize,
}

impl fmt::Debug for AsianProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AsianProblem")
            .field("payoff", &self.payoff.label())
            .field("horizon", &self.horizon)
            .field("n_t", &self.n_t)
            .field("n_a", &self.n_a)
            .field("m", &self.m)
            .finish()
    }
}

/// `{c id}` and, with more than two atoms, the scaled indicators.
pub fn jump_controls(support: &Support, scales: &[f64]) -> Result<Vec<ControlVector>> {
    let id = ControlVector::from_field(support, &ScalarField::identity())?;
    let mut out: Vec<ControlVector> = scales.iter().map(|c| id.scaled(*c)).collect();
    if support.len() > 2 {
        for i in 0..support.len() {
            let mut e = vec![0.0; support.len()];
            e[i] = 1.0;
            let e = ControlVector::new(support, e)?;
            out.extend(scales.iter().map(|c| e.scaled(*c)));
        }
    }
    Ok(out)
}

/// Default jump scales; large ones reach the faces in one move.
pub fn default_jump_scales() -> Vec<f64> {
    vec![1.0, 4.0, 16.0, 64.0]
}

impl AsianProblem {
    /// Defaults: `n_t = 50`, `n_a = 101`, `M = 40`, `Delta = 2e-3`.
    pub fn new(mu0: AtomicMeasure, payoff: ScalarField, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MvmError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if mu0.dim() != 1 {
            return Err(MvmError::UnsupportedDimension(mu0.dim()));
        }
        let controls = jump_controls(mu0.support(), &default_jump_scales())?;
        Ok(Self {
            mu0,
            payoff,
            horizon,
            n_t: 50,
            n_a: 101,
            m: 40,
            delta: 2e-3,
            controls,
            tol: DEFAULT_SLICE_TOL,
            max_iters: DEFAULT_SLICE_ITERS,
        })
    }

    /// Average-price axis covering every attainable `int_0^t S ds`.
    pub fn a_range(&self) -> (f64, f64) {
        let x = self.mu0.support().first_coords();
        let xmin = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ((xmin * self.horizon).min(0.0), (xmax * self.horizon).max(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct AsianSolution {
    pub grid: SimplexGrid,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    /// `values[t][ia * nodes + j]`.
    pub values: Vec<Vec<f64>>,
    /// Whether the jump branch strictly beats waiting at `t = 0`, per `(a, node)`.
    pub jump_at_start: Vec<bool>,
    pub max_slice_iters: usize,
    pub converged: bool,
}

impl AsianSolution {
    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn value_at(&self, t_index: usize, a: f64, p: &[f64]) -> f64 {
        let slice = &self.values[t_index];
        let n = self.nodes();
        let (ia, w) = axis_position(&self.a, a);
        let stencil = self.grid.stencil(p);
        let lo = stencil.apply(&slice[ia * n..(ia + 1) * n]);
        if w == 0.0 {
            return lo;
        }
        let hi = stencil.apply(&slice[(ia + 1) * n..(ia + 2) * n]);
        (1.0 - w) * lo + w * hi
    }
}

/// Lower index and weight for linear interpolation on a uniform axis (clamped).
fn axis_position(axis: &[f64], v: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let step = axis[1] - axis[0];
    let pos = ((v - axis[0]) / step).clamp(0.0, (axis.len() - 1) as f64);
    let i = (pos.floor() as usize).min(axis.len() - 2);
    (i, pos - i as f64)
}

struct JumpTable {
    moves: Vec<Vec<SymmetricMove>>,
}

fn jump_table(grid: &SimplexGrid, controls: &[ControlVector], h: f64) -> JumpTable {
    let moves = par::map_range(grid.len(), |j| {
        if grid.vertex(j).is_some() {
            return Vec::new();
        }
        let p = grid.point(j);
        controls
            .iter()
            .filter_map(|rho| {
                let z = sigma(&p, rho.values());
                if z.iter().all(|v| *v == 0.0) {
                    None
                } else {
                    Some(symmetric_move(grid, &p, &z, h))
                }
            })
            .collect()
    });
    JumpTable { moves }
}

pub fn solve_asian(prob: &AsianProblem) -> Result<AsianSolution> {
    ensure_slice_params(prob.tol, prob.max_iters, prob.delta)?;
    if prob.n_t == 0 || prob.n_a < 2 {
        return Err(MvmError::InvalidArgument("need n_t >= 1 and n_a >= 2".into()));
    }
    for rho in &prob.controls {
        prob.mu0.check_aligned(rho)?;
    }
    let grid = build_grid(prob.mu0.support().clone(), prob.m)?;
    let x = prob.mu0.support().first_coords();
    let n = grid.len();
    let dt = prob.horizon / prob.n_t as f64;
    let (a_lo, a_hi) = prob.a_range();
    let a: Vec<f64> = (0..prob.n_a)
        .map(|i| a_lo + (a_hi - a_lo) * i as f64 / (prob.n_a - 1) as f64)
        .collect();
    let times: Vec<f64> = (0..=prob.n_t).map(|k| k as f64 * dt).collect();
    let table = jump_table(&grid, &prob.controls, prob.delta.sqrt());
    let means: Vec<f64> = (0..n)
        .map(|j| grid.point(j).iter().zip(&x).map(|(p, v)| p * v).sum())
        .collect();
    let payoff = |v: f64| prob.payoff.eval(&[v]);
    let total = prob.n_a * n;

    let mut values = vec![Vec::new(); prob.n_t + 1];
    values[prob.n_t] = (0..total).map(|idx| payoff(a[idx / n])).collect();
    let mut max_slice_iters = 0;
    let mut converged = true;
    let mut jump_at_start = vec![false; total];

    for k in (0..prob.n_t).rev() {
        let remaining = prob.horizon - times[k];
        let later = &values[k + 1];
        let wait: Vec<f64> = par::map_range(total, |idx| {
            let (ia, j) = (idx / n, idx % n);
            if let Some(i) = grid.vertex(j) {
                return payoff(a[ia] + x[i] * remaining);
            }
            let (lo, w) = axis_position(&a, a[ia] + means[j] * dt);
            let v0 = later[lo * n + j];
            let v1 = if w > 0.0 { later[(lo + 1) * n + j] } else { v0 };
            (1.0 - w) * v0 + w * v1
        });
        let (cur, iters, ok) = envelope(&wait, n, &table, prob.tol, prob.max_iters, f64::max);
        if k == 0 {
            jump_at_start = par::map_range(total, |idx| {
                let (ia, j) = (idx / n, idx % n);
                let col = &cur[ia * n..(ia + 1) * n];
                best_jump(&table.moves[j], col, f64::max).is_some_and(|v| v > wait[idx] + 1e-12)
            });
        }
        max_slice_iters = max_slice_iters.max(iters);
        converged &= ok;
        values[k] = cur;
    }
    Ok(AsianSolution {
        grid,
        times,
        a,
        values,
        jump_at_start,
        max_slice_iters,
        converged,
    })
}

fn best_jump(moves: &[SymmetricMove], column: &[f64], pick: fn(f64, f64) -> f64) -> Option<f64> {
    moves.iter().map(|mv| mv.average(column)).reduce(pick)
}

/// Fixed point of `v = pick(obstacle, pick_rho avg(v))` column by column, from `v = obstacle`.
fn envelope(
    obstacle: &[f64],
    n: usize,
    table: &JumpTable,
    tol: f64,
    max_iters: usize,
    pick: fn(f64, f64) -> f64,
) -> (Vec<f64>, usize, bool) {
    let mut cur = obstacle.to_vec();
    let mut next = vec![0.0; cur.len()];
    let mut iters = 0;
    loop {
        iters += 1;
        let current = &cur;
        par::fill_indexed(&mut next, |idx| {
            let (col, j) = (idx / n, idx % n);
            let column = &current[col * n..(col + 1) * n];
            match best_jump(&table.moves[j], column, pick) {
                Some(v) => pick(obstacle[idx], v),
                None => obstacle[idx],
            }
        });
        let change = next.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut cur, &mut next);
        if change < tol {
            return (cur, iters, true);
        }
        if iters >= max_iters {
            return (cur, iters, false);
        }
    }
}

type Payoff = dyn Fn(usize, usize, usize, f64) -> f64 + Send + Sync;

/// Zero-sum game with a parameter `theta_i` known to one side.
#[derive(Clone)]
pub struct GameSpec {
    params: Vec<f64>,
    n_u: usize,
    n_v: usize,
    horizon: f64,
    payoff: Arc<Payoff>,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("params", &self.params)
            .field("n_u", &self.n_u)
            .field("n_v", &self.n_v)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl GameSpec {
    /// Payoff `l(i, u, v, t)`.
    pub fn new<F>(params: Vec<f64>, n_u: usize, n_v: usize, horizon: f64, payoff: F) -> Result<Self>
    where
        F: Fn(usize, usize, usize, f64) -> f64 + Send + Sync + 'static,
    {
        if params.is_empty() || n_u == 0 || n_v == 0 {
            return Err(MvmError::InvalidArgument(
                "game needs parameters and both action sets".into(),
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MvmError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            params,
            n_u,
            n_v,
            horizon,
            payoff: Arc::new(payoff),
        })
    }

    /// Time-independent tensor `l[i][u][v]`.
    pub fn constant(params: Vec<f64>, tensor: Vec<Vec<Vec<f64>>>, horizon: f64) -> Result<Self> {
        if tensor.len() != params.len() {
            return Err(MvmError::Dimension {
                expected: params.len(),
                got: tensor.len(),
            });
        }
        let n_u = tensor.first().map_or(0, |m| m.len());
        let n_v = tensor.first().and_then(|m| m.first()).map_or(0, |r| r.len());
        for m in &tensor {
            if m.len() != n_u {
                return Err(MvmError::Dimension {
                    expected: n_u,
                    got: m.len(),
                });
            }
            if let Some(r) = m.iter().find(|r| r.len() != n_v) {
                return Err(MvmError::Dimension {
                    expected: n_v,
                    got: r.len(),
                });
            }
        }
        Self::new(params, n_u, n_v, horizon, move |i, u, v, _| tensor[i][u][v])
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn payoff(&self, i: usize, u: usize, v: usize, t: f64) -> f64 {
        (self.payoff)(i, u, v, t)
    }
}

/// `min_u max_v sum_i p_i l(i, u, v, t)`.
pub fn game_stage_cost(spec: &GameSpec, t: f64, p: &[f64]) -> f64 {
    (0..spec.n_u)
        .map(|u| {
            (0..spec.n_v)
                .map(|v| {
                    p.iter()
                        .enumerate()
                        .map(|(i, w)| w * spec.payoff(i, u, v, t))
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `max_v min_u sum_i p_i l(i, u, v, t)`, never above the stage cost.
pub fn game_lower_stage_cost(spec: &GameSpec, t: f64, p: &[f64]) -> f64 {
    (0..spec.n_v)
        .map(|v| {
            (0..spec.n_u)
                .map(|u| {
                    p.iter()
                        .enumerate()
                        .map(|(i, w)| w * spec.payoff(i, u, v, t))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone)]
pub struct GameGrid {
    pub m: u32,
    pub n_t: usize,
    pub delta: f64,
    pub scales: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GameGrid {
    fn default() -> Self {
        Self {
            m: 40,
            n_t: 50,
            delta: 2e-3,
            scales: default_jump_scales(),
            tol: DEFAULT_SLICE_TOL,
            max_iters: DEFAULT_SLICE_ITERS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameSolution {
    pub grid: SimplexGrid,
    pub times: Vec<f64>,
    /// `values[k][j]` = `v(t_k, p_j)`.
    pub values: Vec<Vec<f64>>,
    /// Stage cost on the nodes, per time slice.
    pub stage: Vec<Vec<f64>>,
    pub max_slice_iters: usize,
    pub converged: bool,
}

pub fn solve_game(spec: &GameSpec, params: &GameGrid) -> Result<GameSolution> {
    ensure_slice_params(params.tol, params.max_iters, params.delta)?;
    if params.n_t == 0 {
        return Err(MvmError::InvalidArgument("need at least one time step".into()));
    }
    let support = Support::line(&spec.params)?;
    let grid = build_grid(support.clone(), params.m)?;
    let controls = jump_controls(&support, &params.scales)?;
    let table = jump_table(&grid, &controls, params.delta.sqrt());
    let n = grid.len();
    let dt = spec.horizon / params.n_t as f64;
    let times: Vec<f64> = (0..=params.n_t).map(|k| k as f64 * dt).collect();
    let mut values = vec![Vec::new(); params.n_t + 1];
    let mut stage = vec![Vec::new(); params.n_t + 1];
    values[params.n_t] = vec![0.0; n];
    stage[params.n_t] = (0..n)
        .map(|j| game_stage_cost(spec, spec.horizon, &grid.point(j)))
        .collect();
    let mut max_slice_iters = 0;
    let mut converged = true;
    for k in (0..params.n_t).rev() {
        let t = times[k];
        let h: Vec<f64> = par::map_range(n, |j| game_stage_cost(spec, t, &grid.point(j)));
        let later = &values[k + 1];
        let wait: Vec<f64> = later.iter().zip(&h).map(|(v, c)| v + c * dt).collect();
        let (cur, iters, ok) = envelope(&wait, n, &table, params.tol, params.max_iters, f64::min);
        max_slice_iters = max_slice_iters.max(iters);
        converged &= ok;
        values[k] = cur;
        stage[k] = h;
    }
    Ok(GameSolution {
        grid,
        times,
        values,
        stage,
        max_slice_iters,
        converged,
    })
}

/// Outcome of a closed-form comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub suite: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub runtime_seconds: f64,
    pub detail: String,
}

pub const SUITES: [&str; 6] = ["ex91", "ex92", "root_id", "asian_convex", "game_convex", "game_concave"];

pub const CLOSED_FORM_TOL: f64 = 0.05;

fn max_gap(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    pairs.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Convex stage cost `|2 p_1 - 1|` from a two-parameter, 2x2 payoff.
pub fn convex_game(horizon: f64) -> Result<GameSpec> {
    GameSpec::constant(
        vec![0.0, 1.0],
        vec![
            vec![vec![1.0, -1.0], vec![2.0, 2.0]],
            vec![vec![-1.0, 1.0], vec![2.0, 2.0]],
        ],
        horizon,
    )
}

/// Concave stage cost `1 + min(p_1, p_2)` from a two-parameter, 2x2 payoff.
pub fn concave_game(horizon: f64) -> Result<GameSpec> {
    GameSpec::constant(
        vec![0.0, 1.0],
        vec![
            vec![vec![2.0, 2.0], vec![1.0, 1.0]],
            vec![vec![1.0, 1.0], vec![2.0, 2.0]],
        ],
        horizon,
    )
}

/// Runs one named suite against its closed form.
pub fn validate_closed_form(suite: &str) -> Result<ValidationReport> {
    let start = Instant::now();
    let (max_error, passed_extra, detail) = match suite {
        "ex91" => {
            let prob = ex91_problem(40, 2e-3)?;
            let sol = solve_stationary(&prob)?;
            let phi = ScalarField::tanh();
            let mut gaps = Vec::with_capacity(sol.values.len());
            for j in 0..prob.grid.len() {
                gaps.push((sol.values[j], ex91_value(&prob.grid.measure(j), &phi, 1.0)?));
            }
            let interior: Vec<usize> = (0..prob.grid.len()).filter(|j| prob.grid.is_interior(*j)).collect();
            let share = interior.iter().filter(|j| sol.policy[**j] == 0).count() as f64 / interior.len() as f64;
            (
                max_gap(gaps.into_iter()),
                true,
                format!(
                    "iterations={} converged={} target_control_share={share:.4}",
                    sol.iterations, sol.converged
                ),
            )
        }
        "ex92" => {
            let prob = ex92_problem(40, 2e-3)?;
            let sol = solve_stationary(&prob)?;
            let err = max_gap((0..prob.grid.len()).map(|j| (sol.values[j], ex92_value(&prob.grid.measure(j)))));
            let interior: Vec<usize> = (0..prob.grid.len()).filter(|j| prob.grid.is_interior(*j)).collect();
            let share = interior.iter().filter(|j| sol.policy[**j] == 0).count() as f64 / interior.len() as f64;
            (
                err,
                share >= 0.9,
                format!(
                    "iterations={} converged={} identity_share={share:.4}",
                    sol.iterations, sol.converged
                ),
            )
        }
        "root_id" => {
            let mu = AtomicMeasure::from_line(&[-1.0, 1.0], &[0.5, 0.5])?;
            let prob = RootProblem::new(mu, ScalarField::identity(), 0.5)?;
            let sol = solve_root(&prob)?;
            let x = prob.mu0.support().first_coords();
            let err = max_gap((0..sol.grid.len()).map(|j| (sol.values[0][j], variance_at(&x, &sol.grid.point(j)))));
            (
                err,
                sol.converged,
                format!(
                    "slices={} infeasible_nodes={} max_slice_iters={}",
                    sol.q.len(),
                    sol.infeasible_nodes,
                    sol.max_slice_iters
                ),
            )
        }
        "asian_convex" => {
            let mu = AtomicMeasure::from_line(&[0.0, 1.0], &[0.5, 0.5])?;
            let prob = AsianProblem::new(mu, ScalarField::square(), 1.0)?;
            let sol = solve_asian(&prob)?;
            let v = sol.value_at(0, 0.0, &[0.5, 0.5]);
            let (ia, _) = axis_position(&sol.a, 0.0);
            let n = sol.nodes();
            let active = (0..n)
                .filter(|j| sol.grid.is_interior(*j))
                .all(|j| sol.jump_at_start[ia * n + j]);
            (
                (v - 0.5).abs(),
                active && sol.converged,
                format!(
                    "v={v:.6} jump_active_at_start={active} max_slice_iters={}",
                    sol.max_slice_iters
                ),
            )
        }
        "game_convex" | "game_concave" => {
            let horizon = 1.0;
            let spec = if suite == "game_convex" {
                convex_game(horizon)?
            } else {
                concave_game(horizon)?
            };
            let sol = solve_game(&spec, &GameGrid::default())?;
            let mut err: f64 = 0.0;
            for (k, t) in sol.times.iter().enumerate() {
                for j in 0..sol.grid.len() {
                    let p = sol.grid.point(j);
                    let oracle = if suite == "game_convex" {
                        (horizon - t) * (2.0 * p[0] - 1.0).abs()
                    } else {
                        (horizon - t) * 1.0
                    };
                    err = err.max((sol.values[k][j] - oracle).abs());
                }
            }
            (err, sol.converged, format!("max_slice_iters={}", sol.max_slice_iters))
        }
        other => return Err(MvmError::UnknownSuite(other.to_string())),
    };
    Ok(ValidationReport {
        suite: suite.to_string(),
        max_error,
        tolerance: CLOSED_FORM_TOL,
        passed: max_error <= CLOSED_FORM_TOL && passed_extra,
        runtime_seconds: start.elapsed().as_secs_f64(),
        detail,
    })
}
