//! Penrose compactification of Minkowski space near null infinity.
//!
//! Points are mapped by the inversion `y = x / η(x, x)` and charted by
//! `τ = y⁰ - 1/2`, `x = |y| - y⁰`. In these coordinates the conformal
//! factor is `Ω = x (2τ + x + 1)` and scri sits at `x = 0`.

use thiserror::Error;

use crate::grid::GridDomain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("spatial dimension must be at least 1, got {0}")]
    BadDimension(usize),
    #[error("collar width x0 must be positive, got {0}")]
    BadCollar(f64),
    #[error("point lies on the light cone through the origin")]
    OnLightCone,
    #[error("(t, r) = ({t}, {r}) maps to (x, tau) = ({x}, {tau}), outside 0 < x <= x0, tau >= 0")]
    OutOfChart { t: f64, r: f64, x: f64, tau: f64 },
    #[error("sample {index} sits at x = {x}, where the conformal factor vanishes")]
    OnScri { index: usize, x: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("stencil needs at least 5 nodes along {axis}, got {got}")]
    Stencil { axis: &'static str, got: usize },
}

/// Minkowski inner product with signature (-, +, ..., +).
pub fn eta(a: &[f64], b: &[f64]) -> f64 {
    -a[0] * b[0] + a[1..].iter().zip(&b[1..]).map(|(p, q)| p * q).sum::<f64>()
}

/// `y ↦ y / η(y, y)`.
pub fn invert_coords(y: &[f64]) -> Result<Vec<f64>, GeometryError> {
    if y.len() < 2 {
        return Err(GeometryError::Length { what: "point", expected: 2, got: y.len() });
    }
    let q = eta(y, y);
    let scale: f64 = y.iter().map(|v| v * v).sum();
    if q == 0.0 || !q.is_finite() || q.abs() <= f64::EPSILON * scale {
        return Err(GeometryError::OnLightCone);
    }
    Ok(y.iter().map(|v| v / q).collect())
}

pub fn conformal_factor(x: f64, tau: f64) -> f64 {
    x * (2.0 * tau + x + 1.0)
}

/// Collar chart `0 < x <= x0`, `τ >= 0` near scri.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactChart {
    n: usize,
    x0: f64,
}

impl CompactChart {
    pub fn new(n: usize, x0: f64) -> Result<Self, GeometryError> {
        if n < 1 {
            return Err(GeometryError::BadDimension(n));
        }
        if !(x0.is_finite() && x0 > 0.0) {
            return Err(GeometryError::BadCollar(x0));
        }
        Ok(Self { n, x0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn contains(&self, x: f64, tau: f64) -> bool {
        x > 0.0 && x <= self.x0 && tau >= 0.0
    }

    /// Radial physical point `(t, r)` to `(x, τ)`.
    pub fn phys_to_compact(&self, t: f64, r: f64) -> Result<(f64, f64), GeometryError> {
        let mut p = vec![0.0; self.n + 1];
        p[0] = t;
        p[1] = r;
        let y = invert_coords(&p)?;
        let norm = y[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = norm - y[0];
        let tau = y[0] - 0.5;
        // round-off at the hyperboloid itself
        let tau = if tau.abs() < 1e-15 { 0.0 } else { tau };
        if !self.contains(x, tau) {
            return Err(GeometryError::OutOfChart { t, r, x, tau });
        }
        Ok((x, tau))
    }

    /// Inverse of [`phys_to_compact`](Self::phys_to_compact).
    pub fn compact_to_phys(&self, x: f64, tau: f64) -> Result<(f64, f64), GeometryError> {
        if !self.contains(x, tau) {
            return Err(GeometryError::OutOfChart { t: f64::NAN, r: f64::NAN, x, tau });
        }
        let omega = conformal_factor(x, tau);
        Ok(((tau + 0.5) / omega, (x + tau + 0.5) / omega))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescale {
    PhysicalToCompact,
    CompactToPhysical,
}

/// `f̃ = Ω^{-(n-1)/2} f` at each `(x, τ)` sample, or its inverse.
pub fn conformal_rescale(
    values: &[f64],
    points: &[(f64, f64)],
    direction: Rescale,
    n: usize,
) -> Result<Vec<f64>, GeometryError> {
    if values.len() != points.len() {
        return Err(GeometryError::Length {
            what: "sample locations",
            expected: values.len(),
            got: points.len(),
        });
    }
    let p = (n as f64 - 1.0) / 2.0;
    values
        .iter()
        .zip(points)
        .enumerate()
        .map(|(index, (&f, &(x, tau)))| {
            if x <= 0.0 {
                return Err(GeometryError::OnScri { index, x });
            }
            let w = conformal_factor(x, tau).powf(p);
            Ok(match direction {
                Rescale::PhysicalToCompact => f / w,
                Rescale::CompactToPhysical => f * w,
            })
        })
        .collect()
}

/// Box operator evaluated on the interior cells `first..last`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteriorValues {
    pub first: usize,
    pub last: usize,
    pub v_count: usize,
    pub values: Vec<f64>,
}

impl InteriorValues {
    pub fn at(&self, m: usize, j: usize) -> f64 {
        self.values[(m - self.first) * self.v_count + j]
    }
}

/// Centred second-order evaluation of the compactified wave operator
///
/// `-∂τ(∂τ - 2∂x) f̃ + (n-1)/r ∂x f̃ + Δ_h f̃ / r²`, `r = x + τ + 1/2`,
///
/// at the grid's current time from three time levels `τ - dτ`, `τ`,
/// `τ + dτ`, each laid out as the grid's `(cell, v-node)` array. The
/// angular Laplacian is only present on a ring grid.
pub fn box_eta_compactified(
    levels: [&[f64]; 3],
    grid: &GridDomain,
    dtau: f64,
    n: usize,
) -> Result<InteriorValues, GeometryError> {
    let nv = grid.v_count();
    let active = grid.active_count();
    if active < 5 {
        return Err(GeometryError::Stencil { axis: "x", got: active });
    }
    if grid.has_ring() && nv < 5 {
        return Err(GeometryError::Stencil { axis: "v", got: nv });
    }
    let expected = grid.cells() * nv;
    for level in levels {
        if level.len() != expected {
            return Err(GeometryError::Length { what: "time level", expected, got: level.len() });
        }
    }
    let [lo, mid, hi] = levels;
    let h = grid.h();
    let dv = grid.dv();
    let tau = grid.tau();
    let idx = |m: usize, j: usize| m * nv + j;
    let mut values = Vec::with_capacity((active - 2) * nv);
    for m in 1..active - 1 {
        let r = grid.x(m) + tau + 0.5;
        for j in 0..nv {
            let tt = (hi[idx(m, j)] - 2.0 * mid[idx(m, j)] + lo[idx(m, j)]) / (dtau * dtau);
            let tx = (hi[idx(m + 1, j)] - hi[idx(m - 1, j)] - lo[idx(m + 1, j)]
                + lo[idx(m - 1, j)])
                / (4.0 * h * dtau);
            let dx = (mid[idx(m + 1, j)] - mid[idx(m - 1, j)]) / (2.0 * h);
            let mut val = -tt + 2.0 * tx + (n as f64 - 1.0) / r * dx;
            if grid.has_ring() {
                let jp = (j + 1) % nv;
                let jm = (j + nv - 1) % nv;
                let vv = (mid[idx(m, jp)] - 2.0 * mid[idx(m, j)] + mid[idx(m, jm)]) / (dv * dv);
                val += vv / (r * r);
            }
            values.push(val);
        }
    }
    Ok(InteriorValues { first: 1, last: active - 1, v_count: nv, values })
}
