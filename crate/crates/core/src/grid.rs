//! Cell-centred grid on the shrinking domain `0 < x < x1 - 2τ`, with an
//! optional periodic angular ring.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("outer radius x1 must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("spacing h must be positive and smaller than x1, got {0}")]
    BadSpacing(f64),
    #[error("angular ring needs at least 4 nodes, got {0}")]
    BadRing(usize),
    #[error("time must be non-negative and non-decreasing (current {current}, requested {requested})")]
    BadTime { current: f64, requested: f64 },
}

/// Uniform cell-centred x-grid, nodes at `(m + 1/2) h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    x1: f64,
    h: f64,
    cells: usize,
    v_nodes: Option<usize>,
    tau: f64,
    active: usize,
}

impl GridDomain {
    pub fn new(x1: f64, h: f64, v_nodes: Option<usize>) -> Result<Self, GridError> {
        if !(x1.is_finite() && x1 > 0.0) {
            return Err(GridError::BadRadius(x1));
        }
        if !(h.is_finite() && h > 0.0 && h < x1) {
            return Err(GridError::BadSpacing(h));
        }
        if let Some(mv) = v_nodes {
            if mv < 4 {
                return Err(GridError::BadRing(mv));
            }
        }
        let mut cells = (x1 / h).ceil() as usize + 1;
        while cells > 0 && (cells as f64 - 0.5) * h >= x1 {
            cells -= 1;
        }
        Ok(Self { x1, h, cells, v_nodes, tau: 0.0, active: cells })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Total number of x-cells, active or not.
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn x(&self, m: usize) -> f64 {
        (m as f64 + 0.5) * self.h
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.cells).map(|m| self.x(m)).collect()
    }

    /// Position of the moving right edge, `x1 - 2τ`.
    pub fn edge(&self) -> f64 {
        self.x1 - 2.0 * self.tau
    }

    pub fn has_ring(&self) -> bool {
        self.v_nodes.is_some()
    }

    pub fn ring(&self) -> Option<usize> {
        self.v_nodes
    }

    /// Number of angular nodes per x-cell (1 without a ring).
    pub fn v_count(&self) -> usize {
        self.v_nodes.unwrap_or(1)
    }

    pub fn dv(&self) -> f64 {
        2.0 * PI / self.v_count() as f64
    }

    pub fn v(&self, j: usize) -> f64 {
        if self.v_nodes.is_some() {
            j as f64 * self.dv()
        } else {
            0.0
        }
    }

    /// Move to time `tau`, deactivating every cell with `x_m >= x1 - 2τ`.
    pub fn advance_to(&mut self, tau: f64) -> Result<(), GridError> {
        if !(tau.is_finite() && tau >= self.tau) {
            return Err(GridError::BadTime { current: self.tau, requested: tau });
        }
        self.tau = tau;
        let edge = self.edge();
        while self.active > 0 && self.x(self.active - 1) >= edge {
            self.active -= 1;
        }
        Ok(())
    }

    /// Same nodes, restarted at `tau` with every cell below the edge active.
    pub fn restarted(&self, tau: f64) -> Self {
        let mut g = Self { tau: 0.0, active: self.cells, ..self.clone() };
        g.tau = tau;
        let edge = g.edge();
        while g.active > 0 && g.x(g.active - 1) >= edge {
            g.active -= 1;
        }
        g
    }

    /// Largest x covered by the active cells, clipped at the edge.
    pub fn active_extent(&self) -> f64 {
        if self.active == 0 {
            return 0.0;
        }
        (self.x(self.active - 1) + 0.5 * self.h).min(self.edge())
    }
}

/// Second-order derivative of uniformly spaced samples: centred inside,
/// one-sided at both ends. Needs at least three samples.
pub(crate) fn gradient(u: &[f64], h: f64) -> Vec<f64> {
    let n = u.len();
    let mut d = vec![0.0; n];
    if n < 3 {
        return d;
    }
    for m in 1..n - 1 {
        d[m] = (u[m + 1] - u[m - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
    d[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
    d
}

/// Centred periodic derivative.
pub(crate) fn periodic_gradient(u: &[f64], dv: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|j| (u[(j + 1) % n] - u[(j + n - 1) % n]) / (2.0 * dv))
        .collect()
}

/// Four-point Lagrange interpolation on uniform nodes `x0 + i·h`,
/// `i < u.len()`; the stencil is shifted inwards near the ends.
pub(crate) fn cubic_interp(u: &[f64], x0: f64, h: f64, x: f64) -> f64 {
    let n = u.len();
    if n == 1 {
        return u[0];
    }
    if n < 4 {
        let t = ((x - x0) / h).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let w = t - i as f64;
        return u[i] * (1.0 - w) + u[i + 1] * w;
    }
    let t = (x - x0) / h;
    let base = (t.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let mut acc = 0.0;
    for a in 0..4 {
        let mut l = 1.0;
        for b in 0..4 {
            if a != b {
                l *= (t - (base + b) as f64) / (a as f64 - b as f64);
            }
        }
        acc += l * u[base + a];
    }
    acc
}
