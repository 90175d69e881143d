//! Partition-of-unity discretisation of functions (`T_n`) and measures
//! (`T_n^*`) on the real line.
//!
//! The ball `[-n, n]` is covered by tents of half-width `h = 1/(2n)` centred
//! on `{k h : |k h| <= n}`, so every interior cell has diameter exactly
//! `1/n`. Two exterior cells carry the mass beyond `+-n`: their hat ramps
//! from 0 at `+-n` to 1 at `+-(n + h)` and stays 1 further out. Each cell is
//! represented by the point of its closure with minimal norm.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{MvmError, Result};
use crate::measure::{AtomicMeasure, ScalarField, Support};

/// Cell of a [`Partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cell {
    /// `x < -n`.
    Below,
    /// Tent centred at `k h`.
    Tent(i64),
    /// `x > n`.
    Above,
}

#[derive(Debug, Clone)]
pub struct Partition {
    n: u32,
    mesh: f64,
    k_max: i64,
}

impl Partition {
    pub fn new(n: u32) -> Result<Self> {
        build_partition(n)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// Tent half-width `h = 1/(2n)`.
    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    pub fn radius(&self) -> f64 {
        self.n as f64
    }

    /// All cells in increasing spatial order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        std::iter::once(Cell::Below)
            .chain((-self.k_max..=self.k_max).map(Cell::Tent))
            .chain(std::iter::once(Cell::Above))
    }

    pub fn center(&self, k: i64) -> f64 {
        k as f64 * self.mesh
    }

    /// Closed support of the cell's hat as `(lo, hi)`.
    pub fn closure(&self, cell: Cell) -> (f64, f64) {
        let r = self.radius();
        match cell {
            Cell::Below => (f64::NEG_INFINITY, -r),
            Cell::Above => (r, f64::INFINITY),
            Cell::Tent(k) => (self.center(k - 1), self.center(k + 1)),
        }
    }

    /// Representative point: closure endpoint nearest the origin.
    pub fn rep(&self, cell: Cell) -> f64 {
        match cell {
            Cell::Below => -self.radius(),
            Cell::Above => self.radius(),
            Cell::Tent(0) => 0.0,
            Cell::Tent(k) if k > 0 => self.center(k - 1),
            Cell::Tent(k) => self.center(k + 1),
        }
    }

    /// Integer key identifying the representative, in units of `h`.
    fn rep_key(&self, cell: Cell) -> i64 {
        match cell {
            Cell::Below => -self.k_max,
            Cell::Above => self.k_max,
            Cell::Tent(0) => 0,
            Cell::Tent(k) if k > 0 => k - 1,
            Cell::Tent(k) => k + 1,
        }
    }

    /// Nonzero hat weights `psi_i(x)`; at most two cells, summing to one.
    pub fn weights_at(&self, x: f64) -> [(Cell, f64); 2] {
        let r = self.radius();
        let h = self.mesh;
        if x > r {
            let ramp = ((x - r) / h).min(1.0);
            [(Cell::Tent(self.k_max), 1.0 - ramp), (Cell::Above, ramp)]
        } else if x < -r {
            let ramp = ((-r - x) / h).min(1.0);
            [(Cell::Below, ramp), (Cell::Tent(-self.k_max), 1.0 - ramp)]
        } else {
            let s = x / h;
            let k = (s.floor() as i64).clamp(-self.k_max, self.k_max - 1);
            let frac = s - k as f64;
            [(Cell::Tent(k), 1.0 - frac), (Cell::Tent(k + 1), frac)]
        }
    }

    /// The hat `psi_cell` evaluated at `x`.
    pub fn hat(&self, cell: Cell, x: f64) -> f64 {
        self.weights_at(x)
            .iter()
            .filter(|(c, _)| *c == cell)
            .map(|(_, w)| *w)
            .sum()
    }
}

pub fn build_partition(n: u32) -> Result<Partition> {
    if n == 0 {
        return Err(MvmError::InvalidArgument(
            "partition resolution n must be at least 1".into(),
        ));
    }
    let n64 = n as i64;
    Ok(Partition {
        n,
        mesh: 1.0 / (2.0 * n as f64),
        k_max: 2 * n64 * n64,
    })
}

/// `T_n phi (x) = sum_i phi(x_i) psi_i(x)`.
pub fn apply_tn(part: &Partition, phi: &ScalarField) -> ScalarField {
    let part = Arc::new(part.clone());
    let phi = phi.clone();
    let label = format!("T_{}({})", part.n(), phi.label());
    let growth = phi.growth_exponent();
    ScalarField::new(label, growth, move |x| {
        part.weights_at(x[0])
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(c, w)| w * phi.eval(&[part.rep(*c)]))
            .sum()
    })
}

/// `T_n^* mu = sum_i mu(psi_i) delta_{x_i}`, merging cells with a shared representative.
pub fn apply_tn_star(part: &Partition, mu: &AtomicMeasure) -> Result<AtomicMeasure> {
    if mu.dim() != 1 {
        return Err(MvmError::UnsupportedDimension(mu.dim()));
    }
    let mut mass: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for (x, p) in mu.support().points().zip(mu.weights()) {
        if *p == 0.0 {
            continue;
        }
        for (cell, w) in part.weights_at(x[0]) {
            if w > 0.0 {
                let e = mass.entry(part.rep_key(cell)).or_insert((part.rep(cell), 0.0));
                e.1 += p * w;
            }
        }
    }
    let points: Vec<f64> = mass.values().map(|(x, _)| *x).collect();
    let mut weights: Vec<f64> = mass.values().map(|(_, w)| *w).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    AtomicMeasure::new(Support::line(&points)?, weights)
}
