//! Stationary HJB on the probability simplex.
//!
//! The state is the weight vector `p` on a fixed support. Nodes are the
//! lattice points `k / M`, values between nodes come from barycentric
//! interpolation on the Kuhn (Freudenthal) triangulation, and the scheme is
//! the two-point semi-Lagrangian update
//!
//! ```text
//! u(p) <- min_rho (1 - e^{-beta D}) / beta * c(p, rho)
//!                 + e^{-beta D} * 1/2 [u(p + z sqrt D) + u(p - z sqrt D)]
//! ```
//!
//! with `z_i = p_i (rho_i - p . rho)`.

use std::io::{self, Write};
use std::sync::Arc;

use crate::calculus::sigma;
use crate::error::{MvmError, Result};
use crate::measure::{AtomicMeasure, ControlVector, Support};
use crate::par;
use crate::sde::CostFunctional;

/// Largest grid the builder accepts.
pub const MAX_NODES: u128 = 10_000_000;

pub const DEFAULT_DELTA: f64 = 2e-3;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200_000;

/// Snap distance for cumulative lattice coordinates.
const SNAP: f64 = 1e-9;

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// Lattice `{k / M : k_i >= 0, sum k_i = M}` over a shared support.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    support: Arc<Support>,
    m: u32,
    n: usize,
    nodes: Vec<u32>,
    /// `counts[d][r]` = number of ways to write `r` as a sum of `d` nonnegative integers.
    counts: Vec<Vec<usize>>,
}

pub fn build_grid(support: Arc<Support>, m: u32) -> Result<SimplexGrid> {
    SimplexGrid::new(support, m)
}

impl SimplexGrid {
    pub fn new(support: Arc<Support>, m: u32) -> Result<Self> {
        let n = support.len();
        if n < 2 {
            return Err(MvmError::InvalidArgument(format!(
                "simplex grid needs at least 2 atoms, got {n}"
            )));
        }
        if m < 1 {
            return Err(MvmError::InvalidArgument("mesh resolution must be at least 1".into()));
        }
        let total = binomial(m as u64 + n as u64 - 1, n as u64 - 1);
        if total > MAX_NODES {
            return Err(MvmError::ResourceLimit(format!(
                "grid with N = {n}, M = {m} would have {total} nodes (limit {MAX_NODES})"
            )));
        }
        let counts: Vec<Vec<usize>> = (0..=n)
            .map(|d| {
                (0..=m as usize)
                    .map(|r| match d {
                        0 => usize::from(r == 0),
                        _ => binomial((r + d - 1) as u64, (d - 1) as u64) as usize,
                    })
                    .collect()
            })
            .collect();
        let mut nodes = Vec::with_capacity(total as usize * n);
        let mut k = vec![0u32; n];
        enumerate(&mut k, 0, m, &mut nodes);
        debug_assert_eq!(nodes.len(), total as usize * n);
        Ok(Self {
            support,
            m,
            n,
            nodes,
            counts,
        })
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn resolution(&self) -> u32 {
        self.m
    }

    /// Number of atoms `N`.
    pub fn atoms(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, j: usize) -> &[u32] {
        &self.nodes[j * self.n..(j + 1) * self.n]
    }

    pub fn point(&self, j: usize) -> Vec<f64> {
        let m = self.m as f64;
        self.node(j).iter().map(|k| *k as f64 / m).collect()
    }

    pub fn measure(&self, j: usize) -> AtomicMeasure {
        AtomicMeasure::from_parts_unchecked(self.support.clone(), self.point(j))
    }

    /// Atom index if node `j` is a vertex `e_i`.
    pub fn vertex(&self, j: usize) -> Option<usize> {
        self.node(j).iter().position(|k| *k == self.m)
    }

    pub fn is_interior(&self, j: usize) -> bool {
        self.node(j).iter().all(|k| *k > 0)
    }

    /// Position of the lattice point `k` in enumeration order.
    pub fn index_of(&self, k: &[u32]) -> Option<usize> {
        if k.len() != self.n || k.iter().map(|v| *v as u64).sum::<u64>() != self.m as u64 {
            return None;
        }
        let mut rank = 0usize;
        let mut rem = self.m as usize;
        for (i, ki) in k.iter().enumerate().take(self.n - 1) {
            let d = self.n - i;
            let ki = *ki as usize;
            // nodes whose i-th coordinate exceeds ki come first
            for v in ki + 1..=rem {
                rank += self.counts[d - 1][rem - v];
            }
            rem -= ki;
        }
        Some(rank)
    }

    /// Lattice node nearest to `p` by largest-remainder rounding.
    pub fn nearest_node(&self, p: &[f64]) -> usize {
        let p = normalise(p);
        let m = self.m as f64;
        let mut k: Vec<u32> = p.iter().map(|v| (v * m).floor() as u32).collect();
        let used: u32 = k.iter().sum();
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| {
            let fa = p[a] * m - (p[a] * m).floor();
            let fb = p[b] * m - (p[b] * m).floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.m.saturating_sub(used) as usize) {
            k[i] += 1;
        }
        self.index_of(&k).expect("rounded point lies on the lattice")
    }

    /// Interpolation weights of `p` on the Kuhn simplex containing it.
    pub fn stencil(&self, p: &[f64]) -> Stencil {
        let n = self.n;
        let m = self.m as f64;
        let p = normalise(p);
        // cumulative coordinates y_j = M (p_1 + ... + p_j), j < N
        let mut y = Vec::with_capacity(n - 1);
        let mut acc = 0.0;
        for v in p.iter().take(n - 1) {
            acc += v;
            let mut yj = (acc * m).clamp(0.0, m);
            if (yj - yj.round()).abs() < SNAP {
                yj = yj.round();
            }
            if let Some(prev) = y.last() {
                yj = f64::max(yj, *prev);
            }
            y.push(yj);
        }
        let base: Vec<i64> = y.iter().map(|v| v.floor() as i64).collect();
        let frac: Vec<f64> = y.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (0..n - 1).collect();
        // descending fractions; ties go to the larger index so vertices stay monotone
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));

        let mut entries = Vec::with_capacity(n);
        let mut vertex = base.clone();
        let push = |vertex: &[i64], w: f64, entries: &mut Vec<(usize, f64)>| {
            if w > 0.0 {
                let k = self.from_cumulative(vertex);
                entries.push((self.index_of(&k).expect("Kuhn vertex on lattice"), w));
            }
        };
        let first = if n > 1 { 1.0 - frac[order[0]] } else { 1.0 };
        push(&vertex, first, &mut entries);
        for r in 0..n - 1 {
            vertex[order[r]] += 1;
            let next = if r + 1 < n - 1 { frac[order[r + 1]] } else { 0.0 };
            push(&vertex, frac[order[r]] - next, &mut entries);
        }
        Stencil { entries }
    }

    fn from_cumulative(&self, y: &[i64]) -> Vec<u32> {
        let mut k = Vec::with_capacity(self.n);
        let mut prev = 0i64;
        for v in y {
            k.push((v - prev) as u32);
            prev = *v;
        }
        k.push((self.m as i64 - prev) as u32);
        k
    }

    pub fn interpolate(&self, values: &[f64], p: &[f64]) -> f64 {
        self.stencil(p).apply(values)
    }
}

fn enumerate(k: &mut [u32], i: usize, rem: u32, out: &mut Vec<u32>) {
    if i + 1 == k.len() {
        k[i] = rem;
        out.extend_from_slice(k);
        return;
    }
    for v in (0..=rem).rev() {
        k[i] = v;
        enumerate(k, i + 1, rem - v, out);
    }
}

fn normalise(p: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|v| v / total).collect()
    } else {
        clipped
    }
}

/// Free-function form of [`SimplexGrid::interpolate`].
pub fn interpolate(grid: &SimplexGrid, values: &[f64], p: &[f64]) -> f64 {
    grid.interpolate(values, p)
}

/// Sparse nodal weights (nonnegative, summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    entries: Vec<(usize, f64)>,
}

impl Stencil {
    pub fn single(node: usize) -> Self {
        Self {
            entries: vec![(node, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|(j, w)| w * values[*j]).sum()
    }
}

/// The two endpoints `p +- lambda h z` with their stencils.
#[derive(Debug, Clone)]
pub struct SymmetricMove {
    pub lambda: f64,
    pub plus_point: Vec<f64>,
    pub minus_point: Vec<f64>,
    pub plus: Stencil,
    pub minus: Stencil,
}

impl SymmetricMove {
    pub fn average(&self, values: &[f64]) -> f64 {
        0.5 * (self.plus.apply(values) + self.minus.apply(values))
    }
}

/// Largest `lambda` in `(0, 1]` with `p +- lambda h z >= 0`.
pub fn exit_scale(p: &[f64], z: &[f64], h: f64) -> f64 {
    let mut lambda: f64 = 1.0;
    for (pi, zi) in p.iter().zip(z) {
        let reach = zi.abs() * h;
        if reach > *pi {
            lambda = lambda.min(pi / reach);
        }
    }
    lambda
}

pub fn symmetric_move(grid: &SimplexGrid, p: &[f64], z: &[f64], h: f64) -> SymmetricMove {
    let lambda = exit_scale(p, z, h);
    let step = lambda * h;
    let plus_point: Vec<f64> = p.iter().zip(z).map(|(a, b)| (a + step * b).max(0.0)).collect();
    let minus_point: Vec<f64> = p.iter().zip(z).map(|(a, b)| (a - step * b).max(0.0)).collect();
    SymmetricMove {
        lambda,
        plus: grid.stencil(&plus_point),
        minus: grid.stencil(&minus_point),
        plus_point,
        minus_point,
    }
}

/// Discounted control problem on a simplex grid.
#[derive(Debug, Clone)]
pub struct HjbProblem {
    pub grid: SimplexGrid,
    pub controls: Vec<ControlVector>,
    pub cost: CostFunctional,
    pub delta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl HjbProblem {
    pub fn new(grid: SimplexGrid, controls: Vec<ControlVector>, cost: CostFunctional) -> Result<Self> {
        let problem = Self {
            grid,
            controls,
            cost,
            delta: DEFAULT_DELTA,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cost.beta() > 0.0) {
            return Err(MvmError::InvalidArgument(
                "stationary problems need a positive discount rate".into(),
            ));
        }
        if self.controls.is_empty() {
            return Err(MvmError::InvalidArgument("control set is empty".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(MvmError::InvalidArgument(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.tol > 0.0) {
            return Err(MvmError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        let probe = self.grid.measure(0);
        for rho in &self.controls {
            probe.check_aligned(rho)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Branch {
    control: usize,
    running: f64,
    step: SymmetricMove,
}

#[derive(Debug, Clone)]
enum NodeRule {
    Fixed { value: f64, control: usize },
    Free(Vec<Branch>),
}

/// Precomputed one-step operator of the scheme. The update is affine in `u`
/// for each control, so the stencils and running costs are built once.
#[derive(Debug, Clone)]
pub struct HjbScheme {
    rules: Vec<NodeRule>,
    discount: f64,
    initial: Vec<f64>,
}

impl HjbScheme {
    pub fn new(problem: &HjbProblem) -> Result<Self> {
        problem.validate()?;
        let beta = problem.cost.beta();
        let discount = (-beta * problem.delta).exp();
        let weight = -(-beta * problem.delta).exp_m1() / beta;
        let h = problem.delta.sqrt();
        let grid = &problem.grid;
        let built: Vec<Result<(NodeRule, f64)>> = par::map_range(grid.len(), |j| {
            let mu = grid.measure(j);
            let costs: Vec<f64> = problem.controls.iter().map(|rho| problem.cost.eval(&mu, rho)).collect();
            let best = argmin(&costs);
            let Some(best) = best else {
                return Err(MvmError::Infeasible {
                    node: mu.weights().to_vec(),
                });
            };
            if grid.vertex(j).is_some() {
                let value = costs[best] / beta;
                return Ok((NodeRule::Fixed { value, control: best }, value));
            }
            let start = if costs[0].is_finite() { costs[0] } else { costs[best] } / beta;
            let branches = problem
                .controls
                .iter()
                .enumerate()
                .filter(|(r, _)| costs[*r].is_finite())
                .map(|(r, rho)| {
                    let z = sigma(mu.weights(), rho.values());
                    Branch {
                        control: r,
                        running: weight * costs[r],
                        step: symmetric_move(grid, mu.weights(), &z, h),
                    }
                })
                .collect();
            Ok((NodeRule::Free(branches), start))
        });
        let mut rules = Vec::with_capacity(built.len());
        let mut initial = Vec::with_capacity(built.len());
        for b in built {
            let (rule, start) = b?;
            rules.push(rule);
            initial.push(start);
        }
        Ok(Self {
            rules,
            discount,
            initial,
        })
    }

    /// Initial field `c(p, rho_0) / beta`, or the cheapest feasible control where `rho_0` is excluded.
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    fn node_update(&self, j: usize, u: &[f64]) -> (f64, usize) {
        match &self.rules[j] {
            NodeRule::Fixed { value, control } => (*value, *control),
            NodeRule::Free(branches) => {
                let mut best = (f64::INFINITY, usize::MAX);
                for b in branches {
                    let v = b.running + self.discount * b.step.average(u);
                    if v < best.0 {
                        best = (v, b.control);
                    }
                }
                best
            }
        }
    }

    /// One Jacobi sweep `out = T(u)`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        par::fill_indexed(out, |j| self.node_update(j, u).0);
    }

    /// Minimising control index per node for the field `u` (lowest index on ties).
    pub fn policy(&self, u: &[f64]) -> Vec<usize> {
        par::map_range(self.rules.len(), |j| self.node_update(j, u).1)
    }
}

fn argmin(costs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (r, c) in costs.iter().enumerate() {
        if c.is_finite() && best.is_none_or(|b| *c < costs[b]) {
            best = Some(r);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub grid: SimplexGrid,
    pub controls: Vec<ControlVector>,
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Sup-norm update of every sweep.
    pub residuals: Vec<f64>,
}

impl HjbSolution {
    pub fn value_at(&self, p: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, p)
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn solve_stationary(problem: &HjbProblem) -> Result<HjbSolution> {
    let scheme = HjbScheme::new(problem)?;
    let mut u = scheme.initial().to_vec();
    let mut next = vec![0.0; u.len()];
    let mut residuals = Vec::new();
    let mut converged = false;
    while residuals.len() < problem.max_iters {
        scheme.apply(&u, &mut next);
        let r = sup_distance(&u, &next);
        residuals.push(r);
        std::mem::swap(&mut u, &mut next);
        if r < problem.tol {
            converged = true;
            break;
        }
    }
    let policy = scheme.policy(&u);
    Ok(HjbSolution {
        grid: problem.grid.clone(),
        controls: problem.controls.clone(),
        values: u,
        policy,
        iterations: residuals.len(),
        residual: residuals.last().copied().unwrap_or(0.0),
        converged,
        residuals,
    })
}

/// Minimising control at the grid node nearest `p`.
pub fn extract_policy(solution: &HjbSolution, p: &[f64]) -> ControlVector {
    let j = solution.grid.nearest_node(p);
    solution.controls[solution.policy[j]].clone()
}

/// Float rendering with 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with header `p_1..p_N,value,policy_index`.
pub fn write_csv<W: Write>(solution: &HjbSolution, mut w: W) -> io::Result<()> {
    let n = solution.grid.atoms();
    let header: Vec<String> = (1..=n).map(|i| format!("p_{i}")).collect();
    writeln!(w, "{},value,policy_index", header.join(","))?;
    for j in 0..solution.grid.len() {
        let cols: Vec<String> = solution.grid.point(j).into_iter().map(format_float).collect();
        writeln!(
            w,
            "{},{},{}",
            cols.join(","),
            format_float(solution.values[j]),
            solution.policy[j]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{generator_l, CylinderFunction};
    use crate::measure::ScalarField;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn support(n: usize) -> Arc<Support> {
        let pts: Vec<f64> = (0..n).map(|i| i as f64 - (n as f64 - 1.0) / 2.0).collect();
        Support::line(&pts).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn node_counts() {
        let g = build_grid(support(2), 1).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.node(0), &[1, 0]);
        assert_eq!(g.node(1), &[0, 1]);
        assert_eq!(build_grid(support(3), 2).unwrap().len(), 6);
        assert_eq!(build_grid(support(3), 40).unwrap().len(), 861);
        assert!(build_grid(support(1), 4).is_err());
        assert!(build_grid(support(3), 0).is_err());
        assert!(matches!(build_grid(support(8), 400), Err(MvmError::ResourceLimit(_))));
    }

    #[test]
    fn index_of_inverts_enumeration() {
        for (n, m) in [(2, 7), (3, 9), (4, 6), (5, 3)] {
            let g = build_grid(support(n), m).unwrap();
            for j in 0..g.len() {
                assert_eq!(g.index_of(g.node(j)), Some(j));
                assert_eq!(g.node(j).iter().sum::<u32>(), m);
                assert_eq!(g.nearest_node(&g.point(j)), j);
            }
            assert_eq!(g.index_of(&vec![m + 1; n]), None);
        }
    }

    #[test]
    fn vertices_are_identified() {
        let g = build_grid(support(3), 5).unwrap();
        let vs: Vec<usize> = (0..g.len()).filter_map(|j| g.vertex(j)).collect();
        assert_eq!(vs, vec![0, 1, 2]);
    }

    #[test]
    fn hand_interpolation() {
        let g = build_grid(support(2), 2).unwrap();
        assert_eq!(g.interpolate(&[0.0, 1.0, 4.0], &[0.75, 0.25]), 0.5);
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = build_grid(support(4), 7).unwrap();
        let values: Vec<f64> = (0..g.len()).map(|j| (j as f64 * 0.37).sin()).collect();
        for j in 0..g.len() {
            assert_eq!(g.interpolate(&values, &g.point(j)), values[j]);
        }
    }

    #[test]
    fn stencils_are_convex_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = build_grid(support(4), 9).unwrap();
        for _ in 0..500 {
            let p = random_point(&mut rng, 4);
            let s = g.stencil(&p);
            let total: f64 = s.entries().iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.entries().len() <= 4);
            // barycentric reconstruction of p itself
            for i in 0..4 {
                let rebuilt: f64 = s.entries().iter().map(|(j, w)| w * g.point(*j)[i]).sum();
                assert!((rebuilt - p[i]).abs() < 1e-12);
            }
            for (j, _) in s.entries() {
                let q = g.point(*j);
                assert!(q.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1.0 / 9.0 + 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn linear_fields_are_reproduced(seed in 0u64..10_000, m in 1u32..12, n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_grid(support(n), m).unwrap();
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let values: Vec<f64> = (0..g.len())
                .map(|j| g.point(j).iter().zip(&a).map(|(p, c)| p * c).sum())
                .collect();
            let p = random_point(&mut rng, n);
            let exact: f64 = p.iter().zip(&a).map(|(x, c)| x * c).sum();
            prop_assert!((g.interpolate(&values, &p) - exact).abs() <= 1e-12);
        }

        #[test]
        fn interpolant_is_bounded_by_nodal_values(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_grid(support(3), 6).unwrap();
            let values: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = random_point(&mut rng, 3);
            let v = g.interpolate(&values, &p);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn moves_stay_in_the_simplex() {
        let g = build_grid(support(3), 10).unwrap();
        let p = [0.01, 0.49, 0.5];
        let z = [-0.3, 0.1, 0.2];
        let mv = symmetric_move(&g, &p, &z, 0.1);
        assert!((mv.lambda - 1.0 / 3.0).abs() < 1e-12);
        assert!(mv.minus_point.iter().chain(&mv.plus_point).all(|v| *v >= 0.0));
        assert!(mv.plus_point[0].abs() < 1e-15);
        assert_eq!(exit_scale(&p, &[0.0; 3], 0.1), 1.0);
    }

    fn constant_problem(kappa: f64, controls: usize) -> HjbProblem {
        let g = build_grid(support(3), 8).unwrap();
        let s = g.support().clone();
        let rhos = (0..controls)
            .map(|_| ControlVector::from_field(&s, &ScalarField::identity()).unwrap())
            .collect();
        HjbProblem::new(g, rhos, CostFunctional::constant(kappa, 2.0).unwrap()).unwrap()
    }

    #[test]
    fn constant_cost_is_a_one_step_fixed_point() {
        let sol = solve_stationary(&constant_problem(3.0, 2)).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
        assert!(sol.values.iter().all(|v| (v - 1.5).abs() < 1e-14));
        assert!(sol.policy.iter().all(|r| *r == 0));
        assert_eq!(extract_policy(&sol, &[0.2, 0.3, 0.5]), sol.controls[0]);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let g = build_grid(support(2), 4).unwrap();
        let s = g.support().clone();
        let rho = ControlVector::constant(&s, 0.0);
        assert!(HjbProblem::new(
            g.clone(),
            vec![rho.clone()],
            CostFunctional::constant(1.0, 0.0).unwrap()
        )
        .is_err());
        assert!(HjbProblem::new(g.clone(), vec![], CostFunctional::constant(1.0, 1.0).unwrap()).is_err());
        let other = ControlVector::constant(&support(2), 0.0);
        assert!(HjbProblem::new(g, vec![other], CostFunctional::constant(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn all_infeasible_node_is_reported() {
        let g = build_grid(support(2), 4).unwrap();
        let s = g.support().clone();
        let cost = CostFunctional::new(
            "wall",
            1.0,
            |mu, _| {
                if mu.weights()[0] == 0.5 {
                    f64::INFINITY
                } else {
                    1.0
                }
            },
        )
        .unwrap();
        let p = HjbProblem::new(g, vec![ControlVector::constant(&s, 0.0)], cost).unwrap();
        match solve_stationary(&p) {
            Err(MvmError::Infeasible { node }) => assert_eq!(node, vec![0.5, 0.5]),
            other => panic!("{other:?}"),
        }
    }

    fn quadratic_problem(m: u32, max_iters: usize) -> HjbProblem {
        let g = build_grid(support(3), m).unwrap();
        let s = g.support().clone();
        let id = ControlVector::from_field(&s, &ScalarField::identity()).unwrap();
        let controls = vec![
            id.clone(),
            id.scaled(0.5),
            ControlVector::constant(&s, 0.0),
            id.scaled(2.0),
        ];
        let cost = CostFunctional::new("quad", 1.5, |mu, rho| {
            let m = mu.mean();
            let spread = mu.dot(&rho.values().iter().map(|v| v * v).collect::<Vec<_>>());
            m * m + 0.3 * spread + (3.0 * mu.weights()[0]).sin()
        })
        .unwrap();
        HjbProblem::new(g, controls, cost).unwrap().with_max_iters(max_iters)
    }

    #[test]
    fn sweeps_contract() {
        let p = quadratic_problem(12, 400);
        let sol = solve_stationary(&p).unwrap();
        let rate = (-p.cost.beta() * p.delta).exp();
        for w in sol.residuals.windows(2).skip(1) {
            if w[0] > 1e-14 {
                assert!(w[1] <= rate * w[0] + 1e-10, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn update_is_monotone() {
        let p = quadratic_problem(10, 1);
        let scheme = HjbScheme::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = p.grid.len();
        for _ in 0..20 {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bump: Vec<f64> = u.iter().map(|v| v + rng.random_range(0.0..0.5)).collect();
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            scheme.apply(&u, &mut a);
            scheme.apply(&bump, &mut b);
            assert!(a.iter().zip(&b).all(|(x, y)| *y >= *x));
        }
    }

    #[test]
    fn solution_is_bounded_and_exact_at_vertices() {
        let p = quadratic_problem(12, DEFAULT_MAX_ITERS);
        let sol = solve_stationary(&p).unwrap();
        assert!(sol.converged);
        let beta = p.cost.beta();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..p.grid.len() {
            let mu = p.grid.measure(j);
            for rho in &p.controls {
                let c = p.cost.eval(&mu, rho) / beta;
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
        for (j, v) in sol.values.iter().enumerate() {
            assert!(*v >= lo - p.tol && *v <= hi + p.tol);
            if p.grid.vertex(j).is_some() {
                let mu = p.grid.measure(j);
                let best = p
                    .controls
                    .iter()
                    .map(|r| p.cost.eval(&mu, r))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(*v, best / beta);
            }
        }
    }

    #[test]
    fn discrete_generator_matches_calculus() {
        let m = 160;
        let delta: f64 = 1e-3;
        let g = build_grid(support(3), m).unwrap();
        let s = g.support().clone();
        let id = ControlVector::from_field(&s, &ScalarField::identity()).unwrap();
        let controls = [id.clone(), id.scaled(0.5), id.scaled(-1.5)];
        let functions = [
            CylinderFunction::mean_sq(ScalarField::identity()),
            CylinderFunction::mean_sq(ScalarField::tanh()),
            CylinderFunction::variance(),
            CylinderFunction::neg_mean_sq(),
        ];
        for f in &functions {
            let field: Vec<f64> = (0..g.len())
                .map(|j| crate::calculus::eval_cylinder(f, &g.measure(j)).unwrap())
                .collect();
            for j in (0..g.len()).step_by(97) {
                let mu = g.measure(j);
                if mu.weights().iter().any(|w| *w < 0.1) {
                    continue;
                }
                for rho in &controls {
                    let z = sigma(mu.weights(), rho.values());
                    let mv = symmetric_move(&g, mu.weights(), &z, delta.sqrt());
                    assert_eq!(mv.lambda, 1.0);
                    let discrete = (mv.average(&field) - field[j]) / delta;
                    let exact = generator_l(f, &mu, rho).unwrap();
                    assert!((discrete - exact).abs() <= 0.05, "{}: {discrete} vs {exact}", f.label());
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let sol = solve_stationary(&constant_problem(1.0, 1)).unwrap();
        let mut buf = Vec::new();
        write_csv(&sol, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("p_1,p_2,p_3,value,policy_index"));
        assert_eq!(lines.count(), sol.grid.len());
        assert!(text.contains("1.0000000000000000e0,0.0000000000000000e0"));
    }
}
