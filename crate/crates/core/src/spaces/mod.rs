//! Weighted Hölder, Sobolev and dyadic norms near `x = 0`, and the
//! polyhomogeneous algebra.

mod phg;

pub use phg::{phg_eval, phg_mul, PhgError, PhgExpansion, MAX_LOG_POWER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{cubic_interp, gradient, periodic_gradient, GridDomain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("field has {got} active cells; order {k} needs at least {need}")]
    TooCoarse { k: usize, need: usize, got: usize },
    #[error("inner cutoff x2 = {x2} must be at least two cells (2h = {two_h})")]
    CutoffTooSmall { x2: f64, two_h: f64 },
    #[error("cutoffs must satisfy 0 <= x2 < x1, got x2 = {x2}, x1 = {x1}")]
    BadCutoffs { x2: f64, x1: f64 },
    #[error("dyadic norms need 0 < x2 <= x1/2, got x2 = {x2}, x1 = {x1}")]
    BadDyadic { x2: f64, x1: f64 },
    #[error("norm kind {found:?} passed where {expected:?} was required")]
    WrongKind { expected: NormKind, found: NormKind },
    #[error("field values: expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at cell {cell}")]
    NonFinite { cell: usize },
    #[error("no grid nodes inside ({x2}, {x1}]")]
    EmptyRange { x2: f64, x1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Holder,
    Sobolev,
    DyadicSup,
    DyadicSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub alpha: f64,
    pub k: usize,
    pub x2: f64,
    pub x1: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind, alpha: f64, k: usize, x2: f64, x1: f64) -> Result<Self, SpaceError> {
        if !(x2 >= 0.0 && x2 < x1 && x1.is_finite()) {
            return Err(SpaceError::BadCutoffs { x2, x1 });
        }
        if matches!(kind, NormKind::DyadicSup | NormKind::DyadicSum) && !(x2 > 0.0 && 2.0 * x2 <= x1) {
            return Err(SpaceError::BadDyadic { x2, x1 });
        }
        Ok(Self { kind, alpha, k, x2, x1 })
    }

    pub fn holder(alpha: f64, k: usize, x2: f64, x1: f64) -> Result<Self, SpaceError> {
        Self::new(NormKind::Holder, alpha, k, x2, x1)
    }

    pub fn sobolev(alpha: f64, k: usize, x2: f64, x1: f64) -> Result<Self, SpaceError> {
        Self::new(NormKind::Sobolev, alpha, k, x2, x1)
    }

    pub fn dyadic_sup(alpha: f64, k: usize, x2: f64, x1: f64) -> Result<Self, SpaceError> {
        Self::new(NormKind::DyadicSup, alpha, k, x2, x1)
    }

    pub fn dyadic_sum(alpha: f64, k: usize, x2: f64, x1: f64) -> Result<Self, SpaceError> {
        Self::new(NormKind::DyadicSum, alpha, k, x2, x1)
    }
}

/// `N`-component samples on a grid, laid out as `(cell, v-node, component)`.
/// Only the active cells carry meaningful values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledField {
    pub grid: GridDomain,
    pub components: usize,
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn new(grid: GridDomain, components: usize, values: Vec<f64>) -> Result<Self, SpaceError> {
        let expected = grid.cells() * grid.v_count() * components;
        if values.len() != expected {
            return Err(SpaceError::Length { expected, got: values.len() });
        }
        let stride = grid.v_count() * components;
        for m in 0..grid.active_count() {
            if values[m * stride..(m + 1) * stride].iter().any(|v| !v.is_finite()) {
                return Err(SpaceError::NonFinite { cell: m });
            }
        }
        Ok(Self { grid, components, values })
    }

    /// Scalar field from a function of `(x, v)`.
    pub fn from_fn(grid: &GridDomain, f: impl Fn(f64, f64) -> f64) -> Result<Self, SpaceError> {
        let mut values = Vec::with_capacity(grid.cells() * grid.v_count());
        for m in 0..grid.cells() {
            for j in 0..grid.v_count() {
                values.push(f(grid.x(m), grid.v(j)));
            }
        }
        Self::new(grid.clone(), 1, values)
    }

    pub fn zeros(grid: &GridDomain, components: usize) -> Self {
        Self {
            grid: grid.clone(),
            components,
            values: vec![0.0; grid.cells() * grid.v_count() * components],
        }
    }

    pub fn index(&self, m: usize, j: usize, c: usize) -> usize {
        (m * self.grid.v_count() + j) * self.components + c
    }

    pub fn get(&self, m: usize, j: usize, c: usize) -> f64 {
        self.values[self.index(m, j, c)]
    }

    /// Values along x for fixed `(v-node, component)`, active cells only.
    fn column(&self, j: usize, c: usize) -> Vec<f64> {
        (0..self.grid.active_count()).map(|m| self.get(m, j, c)).collect()
    }

    /// Samples at arbitrary `x` along v-node `j`, component `c`, by cubic
    /// interpolation over the active cells.
    pub fn interpolate(&self, xs: &[f64], j: usize, c: usize) -> Vec<f64> {
        let col = self.column(j, c);
        let h = self.grid.h();
        xs.iter().map(|&x| cubic_interp(&col, 0.5 * h, h, x)).collect()
    }
}

/// `∂x^bx ∂v^bv` of every column on the active cells, as `(cell, v, comp)`.
fn derivative(f: &SampledField, bx: usize, bv: usize) -> Vec<f64> {
    let nv = f.grid.v_count();
    let nc = f.components;
    let active = f.grid.active_count();
    let mut out = vec![0.0; active * nv * nc];
    let h = f.grid.h();
    let dv = f.grid.dv();
    for j in 0..nv {
        for c in 0..nc {
            let mut col = f.column(j, c);
            for _ in 0..bx {
                col = gradient(&col, h);
            }
            for (m, v) in col.into_iter().enumerate() {
                out[(m * nv + j) * nc + c] = v;
            }
        }
    }
    if bv > 0 && f.grid.has_ring() {
        for m in 0..active {
            for c in 0..nc {
                let mut ring: Vec<f64> = (0..nv).map(|j| out[(m * nv + j) * nc + c]).collect();
                for _ in 0..bv {
                    ring = periodic_gradient(&ring, dv);
                }
                for (j, v) in ring.into_iter().enumerate() {
                    out[(m * nv + j) * nc + c] = v;
                }
            }
        }
    } else if bv > 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Multi-indices `(β₁, β_v)` with `|β| <= k`; angular ones only on a ring.
fn multi_indices(k: usize, ring: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for total in 0..=k {
        for bx in (0..=total).rev() {
            let bv = total - bx;
            if bv == 0 || ring {
                out.push((bx, bv));
            }
        }
    }
    out
}

fn check_order(f: &SampledField, spec: &NormSpec) -> Result<(), SpaceError> {
    let need = spec.k + 3;
    let got = f.grid.active_count();
    if got < need {
        return Err(SpaceError::TooCoarse { k: spec.k, need, got });
    }
    let two_h = 2.0 * f.grid.h();
    if spec.x2 < two_h * (1.0 - 1e-12) {
        return Err(SpaceError::CutoffTooSmall { x2: spec.x2, two_h });
    }
    Ok(())
}

/// Per-node Euclidean magnitude over components, then over `(cell, v)`.
fn magnitudes(d: &[f64], nc: usize) -> impl Iterator<Item = f64> + '_ {
    d.chunks(nc).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `Σ_{|β|≤k} sup_{x2 < x <= x1} x^{-α+β₁} |∂^β f|`.
pub fn holder_norm(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    if spec.kind != NormKind::Holder {
        return Err(SpaceError::WrongKind { expected: NormKind::Holder, found: spec.kind });
    }
    check_order(f, spec)?;
    let nv = f.grid.v_count();
    let mut total = 0.0;
    let mut any = false;
    for (bx, bv) in multi_indices(spec.k, f.grid.has_ring()) {
        let d = derivative(f, bx, bv);
        let mut sup = 0.0f64;
        for (node, mag) in magnitudes(&d, f.components).enumerate() {
            let x = f.grid.x(node / nv);
            if x > spec.x2 && x <= spec.x1 {
                any = true;
                sup = sup.max(x.powf(-spec.alpha + bx as f64) * mag);
            }
        }
        total += sup;
    }
    if !any {
        return Err(SpaceError::EmptyRange { x2: spec.x2, x1: spec.x1 });
    }
    Ok(total)
}

/// Pointwise integrand `Σ_β mean_v (x^{-α+β₁} ∂^β f)²` on the active cells.
fn sobolev_density(f: &SampledField, alpha: f64, k: usize) -> Vec<f64> {
    let nv = f.grid.v_count();
    let active = f.grid.active_count();
    let mut dens = vec![0.0; active];
    for (bx, bv) in multi_indices(k, f.grid.has_ring()) {
        let d = derivative(f, bx, bv);
        for (node, mag) in magnitudes(&d, f.components).enumerate() {
            let m = node / nv;
            let w = f.grid.x(m).powf(-alpha + bx as f64) * mag;
            dens[m] += w * w / nv as f64;
        }
    }
    dens
}

/// Trapezoid rule for `∫_a^b g(x) dx/x` with `g` sampled at `xs`, the
/// piecewise-linear interpolant of `g/x` extended linearly past the ends.
fn integrate_dx_over_x(xs: &[f64], g: &[f64], a: f64, b: f64) -> f64 {
    if xs.len() < 2 || b <= a {
        return 0.0;
    }
    let q: Vec<f64> = xs.iter().zip(g).map(|(x, v)| v / x).collect();
    let n = xs.len();
    let lerp = |x: f64| -> f64 {
        let i = match xs.iter().position(|&xi| xi > x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        }
        .min(n - 2);
        let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
        q[i] * (1.0 - w) + q[i + 1] * w
    };
    let mut pts = vec![(a, lerp(a))];
    for (i, &x) in xs.iter().enumerate() {
        if x > a && x < b {
            pts.push((x, q[i]));
        }
    }
    pts.push((b, lerp(b)));
    pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

fn active_xs(grid: &GridDomain) -> Vec<f64> {
    (0..grid.active_count()).map(|m| grid.x(m)).collect()
}

/// Integral of the Sobolev density over `(a, b)`, clipped to the data.
fn sobolev_piece(f: &SampledField, dens: &[f64], a: f64, b: f64) -> f64 {
    let b = b.min(f.grid.active_extent());
    integrate_dx_over_x(&active_xs(&f.grid), dens, a, b)
}

/// `(Σ_{|β|≤k} ∫_{x2}^{x1} (x^{-α+β₁} ∂^β f)² dx/x dν)^{1/2}` with `dν` of mass one.
pub fn sobolev_norm(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    if spec.kind != NormKind::Sobolev {
        return Err(SpaceError::WrongKind { expected: NormKind::Sobolev, found: spec.kind });
    }
    check_order(f, spec)?;
    let dens = sobolev_density(f, spec.alpha, spec.k);
    Ok(sobolev_piece(f, &dens, spec.x2, spec.x1).max(0.0).sqrt())
}

/// Number of s-nodes per dyadic slice.
pub const SLICE_NODES: usize = 65;

/// One rescaled annulus `f_n(s, v) = f(scale·s, v)`, `s ∈ [1, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicSlice {
    pub n: usize,
    pub scale: f64,
    pub v_count: usize,
    pub components: usize,
    /// `(s-node, v, component)`
    pub values: Vec<f64>,
}

impl DyadicSlice {
    pub fn s(&self, i: usize) -> f64 {
        1.0 + i as f64 / (SLICE_NODES - 1) as f64
    }

    fn ds(&self) -> f64 {
        1.0 / (SLICE_NODES - 1) as f64
    }

    /// `∂s^bs ∂v^bv` magnitudes on the slice nodes, as `(s, v)`.
    fn derivative_magnitudes(&self, bs: usize, bv: usize, dv: f64) -> Vec<f64> {
        let nv = self.v_count;
        let nc = self.components;
        let mut d = self.values.clone();
        for j in 0..nv {
            for c in 0..nc {
                let mut col: Vec<f64> = (0..SLICE_NODES).map(|i| d[(i * nv + j) * nc + c]).collect();
                for _ in 0..bs {
                    col = gradient(&col, self.ds());
                }
                for (i, v) in col.into_iter().enumerate() {
                    d[(i * nv + j) * nc + c] = v;
                }
            }
        }
        if bv > 0 {
            for i in 0..SLICE_NODES {
                for c in 0..nc {
                    let mut ring: Vec<f64> = (0..nv).map(|j| d[(i * nv + j) * nc + c]).collect();
                    for _ in 0..bv {
                        ring = periodic_gradient(&ring, dv);
                    }
                    for (j, v) in ring.into_iter().enumerate() {
                        d[(i * nv + j) * nc + c] = v;
                    }
                }
            }
        }
        magnitudes(&d, nc).collect()
    }

    /// `‖f_n‖²_{H_k([1,2] × ∂M)}`.
    fn h_norm_sq(&self, k: usize, ring: bool, dv: f64) -> f64 {
        let nv = self.v_count;
        let mut total = 0.0;
        for (bs, bv) in multi_indices(k, ring) {
            let mags = self.derivative_magnitudes(bs, bv, dv);
            let line: Vec<f64> = (0..SLICE_NODES)
                .map(|i| (0..nv).map(|j| mags[i * nv + j].powi(2)).sum::<f64>() / nv as f64)
                .collect();
            total += line.windows(2).map(|w| 0.5 * self.ds() * (w[0] + w[1])).sum::<f64>();
        }
        total
    }

    /// `‖f_n‖_{C_k([1,2] × ∂M)}`.
    fn c_norm(&self, k: usize, ring: bool, dv: f64) -> f64 {
        multi_indices(k, ring)
            .into_iter()
            .map(|(bs, bv)| self.derivative_magnitudes(bs, bv, dv).into_iter().fold(0.0, f64::max))
            .sum()
    }
}

/// The `n0` with `x1 2^{-(n0+1)} <= x2 < x1 2^{-n0}`.
pub fn dyadic_depth(x1: f64, x2: f64) -> usize {
    let mut n0 = 0;
    while x1 / 2f64.powi(n0 as i32 + 1) > x2 {
        n0 += 1;
    }
    n0
}

/// Slices `f_n(s) = f(x1 s / 2ⁿ)` for `1 <= n <= n0` and the clipped
/// slice `f_{n0+1}(s) = f(x2 s)`.
pub fn dyadic_slices(f: &SampledField, x1: f64, x2: f64) -> Result<Vec<DyadicSlice>, SpaceError> {
    if !(x2 > 0.0 && 2.0 * x2 <= x1) {
        return Err(SpaceError::BadDyadic { x2, x1 });
    }
    let n0 = dyadic_depth(x1, x2);
    let nv = f.grid.v_count();
    let nc = f.components;
    let mut slices = Vec::with_capacity(n0 + 1);
    for n in 1..=n0 + 1 {
        let scale = if n <= n0 { x1 / 2f64.powi(n as i32) } else { x2 };
        let xs: Vec<f64> = (0..SLICE_NODES)
            .map(|i| scale * (1.0 + i as f64 / (SLICE_NODES - 1) as f64))
            .collect();
        let mut values = vec![0.0; SLICE_NODES * nv * nc];
        for j in 0..nv {
            for c in 0..nc {
                for (i, v) in f.interpolate(&xs, j, c).into_iter().enumerate() {
                    values[(i * nv + j) * nc + c] = v;
                }
            }
        }
        slices.push(DyadicSlice { n, scale, v_count: nv, components: nc, values });
    }
    Ok(slices)
}

/// `x1^{-2α} Σ_n 2^{2nα} ‖f_n‖²_{H_k}`, the dyadic counterpart of the
/// squared Sobolev norm.
pub fn dyadic_sobolev_sum(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    let slices = dyadic_slices(f, spec.x1, spec.x2)?;
    let ring = f.grid.has_ring();
    let dv = f.grid.dv();
    Ok(spec.x1.powf(-2.0 * spec.alpha)
        * slices
            .iter()
            .map(|s| 2f64.powf(2.0 * s.n as f64 * spec.alpha) * s.h_norm_sq(spec.k, ring, dv))
            .sum::<f64>())
}

/// Annuli `I_n`: `(x1 2^{-n}, x1 2^{1-n})` for `n <= n0`, then `(x2, 2 x2)`.
pub fn annuli(x1: f64, x2: f64) -> Vec<(f64, f64)> {
    let n0 = dyadic_depth(x1, x2);
    let mut out: Vec<(f64, f64)> = (1..=n0)
        .map(|n| (x1 / 2f64.powi(n as i32), x1 / 2f64.powi(n as i32 - 1)))
        .collect();
    out.push((x2, 2.0 * x2));
    out
}

/// Per-annulus squared contributions to the Sobolev norm.
pub fn annulus_contributions(f: &SampledField, spec: &NormSpec) -> Result<Vec<f64>, SpaceError> {
    if !(spec.x2 > 0.0 && 2.0 * spec.x2 <= spec.x1) {
        return Err(SpaceError::BadDyadic { x2: spec.x2, x1: spec.x1 });
    }
    check_order(f, spec)?;
    let dens = sobolev_density(f, spec.alpha, spec.k);
    Ok(annuli(spec.x1, spec.x2)
        .into_iter()
        .map(|(a, b)| sobolev_piece(f, &dens, a, b))
        .collect())
}

/// `𝒢^α_k`: square root of the largest annulus contribution.
pub fn g_norm(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    if spec.kind != NormKind::DyadicSup {
        return Err(SpaceError::WrongKind { expected: NormKind::DyadicSup, found: spec.kind });
    }
    Ok(annulus_contributions(f, spec)?.into_iter().fold(0.0, f64::max).sqrt())
}

/// Partial sums `x1^{-2α} Σ_{n<=N} 2^{2nα} ‖f_n‖²_{C_k}` for every `N`.
pub fn b_norm_partial_sums(f: &SampledField, spec: &NormSpec) -> Result<Vec<f64>, SpaceError> {
    let slices = dyadic_slices(f, spec.x1, spec.x2)?;
    let ring = f.grid.has_ring();
    let dv = f.grid.dv();
    let pre = spec.x1.powf(-2.0 * spec.alpha);
    let mut acc = 0.0;
    Ok(slices
        .iter()
        .map(|s| {
            acc += 2f64.powf(2.0 * s.n as f64 * spec.alpha) * s.c_norm(spec.k, ring, dv).powi(2);
            pre * acc
        })
        .collect())
}

/// `ℬ^α_k = (x1^{-2α} Σ_n 2^{2nα} ‖f_n‖²_{C_k})^{1/2}`.
pub fn b_norm(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    if spec.kind != NormKind::DyadicSum {
        return Err(SpaceError::WrongKind { expected: NormKind::DyadicSum, found: spec.kind });
    }
    Ok(b_norm_partial_sums(f, spec)?.last().copied().unwrap_or(0.0).sqrt())
}

/// Dispatch on `spec.kind`.
pub fn norm(f: &SampledField, spec: &NormSpec) -> Result<f64, SpaceError> {
    match spec.kind {
        NormKind::Holder => holder_norm(f, spec),
        NormKind::Sobolev => sobolev_norm(f, spec),
        NormKind::DyadicSup => g_norm(f, spec),
        NormKind::DyadicSum => b_norm(f, spec),
    }
}
