//! First-order evolution of semilinear waves and wave maps on the shrinking
//! domain `0 < x < x1 - 2τ`, by the method of lines with classical RK4.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::conformal_factor;
use crate::grid::{gradient, periodic_gradient, GridDomain, GridError};
use crate::spaces::SampledField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("time step {dtau} exceeds the CFL limit {limit}")]
    Cfl { dtau: f64, limit: f64 },
    #[error("non-finite value at cell {cell} (x = {x}) at tau = {tau}")]
    NonFinite { cell: usize, x: f64, tau: f64 },
    #[error("dimension mismatch: expected {expected} components, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("angular dependence is only supported for n = 2, got n = {0}")]
    Angular(usize),
    #[error("fewer than three active cells left at tau = {0}")]
    DomainExhausted(f64),
    #[error("point u = {0:?} is outside the normal-coordinate chart of the target")]
    OutsideChart(Vec<f64>),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `Γ^a_bc(u)` stored at `a·N² + b·N + c`.
pub type ChristoffelFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>, EvolutionError> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Flat,
    Sphere,
    Hyperbolic,
    Custom,
}

/// Riemannian target in normal coordinates around the base point.
#[derive(Clone)]
pub struct TargetManifold {
    pub dim: usize,
    pub kind: TargetKind,
    christoffel: ChristoffelFn,
}

impl fmt::Debug for TargetManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetManifold").field("dim", &self.dim).field("kind", &self.kind).finish()
    }
}

/// Coefficients `c_m` of `k(ρ) = Σ_{m>=2} c_m ρ^{2m-4}` where `k = (F - 1)/ρ²`
/// and `F = sin²ρ/ρ²` (sign -1) or `sinh²ρ/ρ²` (sign +1).
fn k_series(rho2: f64, sign: f64) -> (f64, f64) {
    // c_m = s^{m+1} 2^{2m-1}/(2m)!, starting from c_2 = s/3
    let mut c = sign / 3.0;
    let (mut k, mut dk_over_rho) = (0.0, 0.0);
    let (mut pow, mut prev) = (1.0, 0.0);
    for j in 0..24 {
        let m = j + 2;
        k += c * pow;
        dk_over_rho += 2.0 * j as f64 * c * prev;
        prev = pow;
        pow *= rho2;
        c *= sign * 4.0 / ((2 * m + 1) as f64 * (2 * m + 2) as f64);
    }
    (k, dk_over_rho)
}

/// `(k, k'/ρ)` for the round sphere (`sign = -1`) or hyperbolic plane (`+1`).
fn k_and_derivative(rho: f64, sign: f64) -> (f64, f64) {
    if rho < 1.0 {
        return k_series(rho * rho, sign);
    }
    let (s, ds) = if sign < 0.0 {
        (rho.sin(), rho.cos())
    } else {
        (rho.sinh(), rho.cosh())
    };
    let f = s * s / (rho * rho);
    let df = 2.0 * s * ds / (rho * rho) - 2.0 * s * s / rho.powi(3);
    let k = (f - 1.0) / (rho * rho);
    let dk = df / (rho * rho) - 2.0 * (f - 1.0) / rho.powi(3);
    (k, dk / rho)
}

/// Warped metric factor `F(ρ)`.
fn warp(rho: f64, sign: f64) -> f64 {
    if rho == 0.0 {
        return 1.0;
    }
    let s = if sign < 0.0 { rho.sin() } else { rho.sinh() };
    (s / rho).powi(2)
}

/// Christoffel symbols of `h = δ + kP`, `P = ρ²δ - uuᵀ`, in two dimensions.
fn warped_christoffel(u: &[f64], sign: f64) -> Result<Vec<f64>, EvolutionError> {
    let n = u.len();
    let rho2: f64 = u.iter().map(|a| a * a).sum();
    let rho = rho2.sqrt();
    if !rho.is_finite() || (sign < 0.0 && rho >= std::f64::consts::PI - 1e-6) {
        return Err(EvolutionError::OutsideChart(u.to_vec()));
    }
    let (k, dk) = k_and_derivative(rho, sign);
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let p = |a: usize, b: usize| rho2 * delta(a, b) - u[a] * u[b];
    let mut lowered = vec![0.0; n * n * n];
    for d in 0..n {
        for b in 0..n {
            for c in 0..n {
                lowered[d * n * n + b * n + c] = 0.5 * dk * (u[b] * p(d, c) + u[c] * p(d, b) - u[d] * p(b, c))
                    + k * (u[b] * delta(d, c) + u[c] * delta(b, d) - 2.0 * u[d] * delta(b, c));
            }
        }
    }
    // h⁻¹ = Π_u + (I - Π_u)/F
    let f = warp(rho, sign);
    let inv = |a: usize, d: usize| {
        let proj = if rho2 > 0.0 { u[a] * u[d] / rho2 } else { 0.0 };
        proj + (delta(a, d) - proj) / f
    };
    let mut out = vec![0.0; n * n * n];
    for a in 0..n {
        for d in 0..n {
            let w = inv(a, d);
            if w == 0.0 {
                continue;
            }
            for bc in 0..n * n {
                out[a * n * n + bc] += w * lowered[d * n * n + bc];
            }
        }
    }
    Ok(out)
}

impl TargetManifold {
    pub fn flat(dim: usize) -> Self {
        Self {
            dim,
            kind: TargetKind::Flat,
            christoffel: Arc::new(move |_| Ok(vec![0.0; dim * dim * dim])),
        }
    }

    /// Round `S²` in normal coordinates.
    pub fn sphere() -> Self {
        Self { dim: 2, kind: TargetKind::Sphere, christoffel: Arc::new(|u| warped_christoffel(u, -1.0)) }
    }

    /// Hyperbolic plane in normal coordinates.
    pub fn hyperbolic() -> Self {
        Self { dim: 2, kind: TargetKind::Hyperbolic, christoffel: Arc::new(|u| warped_christoffel(u, 1.0)) }
    }

    pub fn custom(dim: usize, christoffel: ChristoffelFn) -> Self {
        Self { dim, kind: TargetKind::Custom, christoffel }
    }

    pub fn christoffel(&self, u: &[f64]) -> Result<Vec<f64>, EvolutionError> {
        if u.len() != self.dim {
            return Err(EvolutionError::Dimension { expected: self.dim, got: u.len() });
        }
        (self.christoffel)(u)
    }

    /// Metric `h_ab(u)` for the built-in targets.
    pub fn metric(&self, u: &[f64]) -> Option<Vec<f64>> {
        let n = u.len();
        let sign = match self.kind {
            TargetKind::Sphere => -1.0,
            TargetKind::Hyperbolic => 1.0,
            TargetKind::Flat => return Some((0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()),
            TargetKind::Custom => return None,
        };
        let rho2: f64 = u.iter().map(|a| a * a).sum();
        let f = warp(rho2.sqrt(), sign);
        Some(
            (0..n * n)
                .map(|i| {
                    let (a, b) = (i / n, i % n);
                    let proj = if rho2 > 0.0 { u[a] * u[b] / rho2 } else { 0.0 };
                    let d = if a == b { 1.0 } else { 0.0 };
                    proj + f * (d - proj)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub enum Equation {
    Linear,
    Semilinear { lambda: f64, ell: u32 },
    WaveMap(TargetManifold),
}

/// `(x, v) -> N` values.
pub type DataFn = Arc<dyn Fn(f64, f64) -> Vec<f64> + Send + Sync>;

/// Data `f̃` and `∂τf̃` on the initial slice.
#[derive(Clone)]
pub enum InitialData {
    ClosedForm {
        f: DataFn,
        dtau_f: DataFn,
        /// Analytic `∂x f̃`; finite differences otherwise.
        dx_f: Option<DataFn>,
        /// Analytic `∂v f̃`; periodic differences otherwise.
        dv_f: Option<DataFn>,
    },
    Tabulated { f: SampledField, dtau_f: SampledField },
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClosedForm { dx_f, dv_f, .. } => f
                .debug_struct("ClosedForm")
                .field("analytic_dx", &dx_f.is_some())
                .field("analytic_dv", &dv_f.is_some())
                .finish(),
            Self::Tabulated { f: a, .. } => f.debug_struct("Tabulated").field("cells", &a.grid.cells()).finish(),
        }
    }
}

/// Closed form of the 1+1 example, `g = (C+1)(2τ+x)^{α+1} + (C-1)x^{α+1}`.
pub fn toy_solution(c: f64, alpha: f64, x: f64, tau: f64) -> f64 {
    (c + 1.0) * (2.0 * tau + x).powf(alpha + 1.0) + (c - 1.0) * x.powf(alpha + 1.0)
}

pub fn toy_dtau(c: f64, alpha: f64, x: f64, tau: f64) -> f64 {
    2.0 * (alpha + 1.0) * (c + 1.0) * (2.0 * tau + x).powf(alpha)
}

impl InitialData {
    /// The 1+1 example on the slice `τ = tau0`.
    pub fn toy1d(c: f64, alpha: f64, tau0: f64) -> Self {
        Self::ClosedForm {
            f: Arc::new(move |x, _| vec![toy_solution(c, alpha, x, tau0)]),
            dtau_f: Arc::new(move |x, _| vec![toy_dtau(c, alpha, x, tau0)]),
            dx_f: Some(Arc::new(move |x, _| {
                vec![(alpha + 1.0) * ((c + 1.0) * (2.0 * tau0 + x).powf(alpha) + (c - 1.0) * x.powf(alpha))]
            })),
            dv_f: None,
        }
    }

    /// Zero data with `dim` components.
    pub fn zero(dim: usize) -> Self {
        let z: DataFn = Arc::new(move |_, _| vec![0.0; dim]);
        Self::ClosedForm { f: z.clone(), dtau_f: z.clone(), dx_f: Some(z.clone()), dv_f: Some(z) }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub equation: Equation,
    /// Spacetime dimension is `n + 1`.
    pub n: usize,
    pub components: usize,
    pub initial: InitialData,
    pub x1: f64,
    pub h: f64,
    pub v_nodes: Option<usize>,
    pub t_start: f64,
    pub t_final: f64,
    pub cfl: f64,
    /// Snapshot times in `[t_start, t_final]`, ascending.
    pub output_times: Vec<f64>,
    pub blowup_ceiling: Option<f64>,
    /// Accept semilinear powers below the threshold table.
    pub allow_subcritical: bool,
}

/// RK4 with the upwind transport stencil is stable up to a Courant factor of about 0.696.
pub const MAX_CFL: f64 = 0.65;

/// Smallest admissible semilinear power for dimension `n`.
pub fn power_threshold(n: usize) -> Option<u32> {
    match n {
        2 => Some(4),
        3 => Some(3),
        n if n >= 4 => Some(2),
        _ => None,
    }
}

impl Scenario {
    /// Linear scalar scenario on `(0, 1]` with CFL factor 1/2.
    pub fn new(equation: Equation, n: usize, components: usize, initial: InitialData, h: f64, t_final: f64) -> Self {
        Self {
            equation,
            n,
            components,
            initial,
            x1: 1.0,
            h,
            v_nodes: None,
            t_start: 0.0,
            t_final,
            cfl: 0.5,
            output_times: vec![t_final],
            blowup_ceiling: None,
            allow_subcritical: false,
        }
    }

    pub fn toy1d(c: f64, alpha: f64, h: f64, t_final: f64) -> Self {
        Self::new(Equation::Linear, 1, 1, InitialData::toy1d(c, alpha, 0.0), h, t_final)
    }

    /// True when a semilinear power lies below the threshold table.
    pub fn subcritical_violating(&self) -> bool {
        match self.equation {
            Equation::Semilinear { ell, .. } => power_threshold(self.n).map_or(true, |t| ell < t),
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: String| Err(EvolutionError::BadScenario(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.components == 0 {
            return bad("at least one component is required".into());
        }
        if let Equation::WaveMap(t) = &self.equation {
            if t.dim != self.components {
                return Err(EvolutionError::Dimension { expected: t.dim, got: self.components });
            }
        }
        if let Equation::Semilinear { lambda, ell } = self.equation {
            if !lambda.is_finite() || ell == 0 {
                return bad(format!("semilinear coefficients lambda = {lambda}, ell = {ell}"));
            }
            if self.subcritical_violating() && !self.allow_subcritical {
                return bad(format!(
                    "ell = {ell} is below the admissible power for n = {} (set allow_subcritical to run anyway)",
                    self.n
                ));
            }
        }
        if self.v_nodes.is_some() && self.n != 2 {
            return Err(EvolutionError::Angular(self.n));
        }
        if !(self.cfl > 0.0 && self.cfl <= MAX_CFL) {
            return bad(format!("cfl = {} must lie in (0, {MAX_CFL}]", self.cfl));
        }
        if !(self.t_start >= 0.0 && self.t_final >= self.t_start && self.t_final.is_finite()) {
            return bad(format!("times t_start = {}, t_final = {}", self.t_start, self.t_final));
        }
        if self.x1 - 2.0 * self.t_final <= 4.0 * self.h {
            return bad(format!(
                "t_final = {} leaves fewer than four cells below the edge x1 - 2T",
                self.t_final
            ));
        }
        let mut prev = self.t_start;
        for &t in &self.output_times {
            if !(t >= prev && t <= self.t_final) {
                return bad(format!("output times must be sorted within [t_start, t_final], got {t}"));
            }
            prev = t;
        }
        if let Some(c) = self.blowup_ceiling {
            if !(c > 0.0) {
                return bad(format!("blow-up ceiling {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridDomain, EvolutionError> {
        Ok(GridDomain::new(self.x1, self.h, self.v_nodes)?.restarted(self.t_start))
    }

    pub fn angular(&self) -> bool {
        self.v_nodes.is_some()
    }
}

/// Evolved fields, each laid out as `(cell, v-node, component)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fields {
    pub f: Vec<f64>,
    pub phi_plus: Vec<f64>,
    pub phi_minus: Vec<f64>,
    pub phi_a: Option<Vec<f64>>,
    pub psi_a: Option<Vec<f64>>,
}

impl Fields {
    fn zeros_like(other: &Fields) -> Self {
        let z = vec![0.0; other.f.len()];
        Self {
            f: z.clone(),
            phi_plus: z.clone(),
            phi_minus: z.clone(),
            phi_a: other.phi_a.as_ref().map(|_| z.clone()),
            psi_a: other.psi_a.as_ref().map(|_| z),
        }
    }

    /// `f̃, φ+, φ-` then the angular fields when present.
    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut v = vec![&self.f, &self.phi_plus, &self.phi_minus];
        v.extend(self.phi_a.iter());
        v.extend(self.psi_a.iter());
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = vec![&mut self.f, &mut self.phi_plus, &mut self.phi_minus];
        v.extend(self.phi_a.iter_mut());
        v.extend(self.psi_a.iter_mut());
        v
    }

    /// `self + w·k` on the first `len` entries; the rest is copied.
    fn axpy(&self, k: &Fields, w: f64, len: usize) -> Fields {
        let mut out = self.clone();
        for (o, d) in out.arrays_mut().into_iter().zip(k.arrays()) {
            for i in 0..len {
                o[i] += w * d[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    F,
    PhiPlus,
    PhiMinus,
    PhiA,
    PsiA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub tau: f64,
    pub grid: GridDomain,
    pub components: usize,
    pub fields: Fields,
}

impl FieldState {
    pub fn index(&self, m: usize, j: usize, c: usize) -> usize {
        (m * self.grid.v_count() + j) * self.components + c
    }

    fn active_len(&self) -> usize {
        self.grid.active_count() * self.grid.v_count() * self.components
    }

    pub fn field(&self, kind: FieldKind) -> Option<SampledField> {
        let values = match kind {
            FieldKind::F => &self.fields.f,
            FieldKind::PhiPlus => &self.fields.phi_plus,
            FieldKind::PhiMinus => &self.fields.phi_minus,
            FieldKind::PhiA => self.fields.phi_a.as_ref()?,
            FieldKind::PsiA => self.fields.psi_a.as_ref()?,
        };
        Some(SampledField { grid: self.grid.clone(), components: self.components, values: values.clone() })
    }

    /// `sup |f̃|` over active nodes (Euclidean over components).
    pub fn sup_f(&self) -> f64 {
        self.fields.f[..self.active_len()]
            .chunks(self.components)
            .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `max |φ+ - φ- + 2∂x f̃|` over interior active cells.
    pub fn constraint_residual(&self) -> f64 {
        let act = self.grid.active_count();
        if act < 3 {
            return 0.0;
        }
        let h = self.grid.h();
        let mut worst = 0.0f64;
        for j in 0..self.grid.v_count() {
            for c in 0..self.components {
                let col: Vec<f64> = (0..act).map(|m| self.fields.f[self.index(m, j, c)]).collect();
                let d = gradient(&col, h);
                for (m, dm) in d.iter().enumerate().take(act - 1).skip(1) {
                    let i = self.index(m, j, c);
                    worst = worst.max((self.fields.phi_plus[i] - self.fields.phi_minus[i] + 2.0 * dm).abs());
                }
            }
        }
        worst
    }

    /// `max |φ_A - ψ_A|` over active nodes, 0 without angular fields.
    pub fn angular_residual(&self) -> f64 {
        match (&self.fields.phi_a, &self.fields.psi_a) {
            (Some(a), Some(b)) => a[..self.active_len()]
                .iter()
                .zip(&b[..self.active_len()])
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max),
            _ => 0.0,
        }
    }
}

fn check_finite(values: &[f64], stride: usize, grid: &GridDomain, tau: f64) -> Result<(), EvolutionError> {
    let active = grid.active_count() * stride;
    if let Some(i) = values[..active].iter().position(|v| !v.is_finite()) {
        let cell = i / stride;
        return Err(EvolutionError::NonFinite { cell, x: grid.x(cell), tau });
    }
    Ok(())
}

/// Fields on the initial slice: `φ- = ∂τf̃`, `φ+ = φ- - 2∂xf̃`,
/// `φ_A = ψ_A = ∂v f̃/(x + τ + 1/2)`.
pub fn build_initial_state(scenario: &Scenario, grid: &GridDomain) -> Result<FieldState, EvolutionError> {
    let nc = scenario.components;
    let nv = grid.v_count();
    let angular = grid.has_ring();
    if angular && scenario.n != 2 {
        return Err(EvolutionError::Angular(scenario.n));
    }
    let tau = grid.tau();
    let cells = grid.cells();
    let len = cells * nv * nc;
    let idx = |m: usize, j: usize, c: usize| (m * nv + j) * nc + c;
    let mut f = vec![0.0; len];
    let mut dtf = vec![0.0; len];
    let mut dxf: Option<Vec<f64>> = None;
    let mut dvf: Option<Vec<f64>> = None;
    match &scenario.initial {
        InitialData::ClosedForm { f: ff, dtau_f, dx_f, dv_f } => {
            let mut dx = dx_f.as_ref().map(|_| vec![0.0; len]);
            let mut dv = dv_f.as_ref().map(|_| vec![0.0; len]);
            for m in 0..cells {
                let x = grid.x(m);
                for j in 0..nv {
                    let v = grid.v(j);
                    let vals = [Some(ff(x, v)), Some(dtau_f(x, v)), dx_f.as_ref().map(|g| g(x, v)), dv_f.as_ref().map(|g| g(x, v))];
                    for val in vals.iter().flatten() {
                        if val.len() != nc {
                            return Err(EvolutionError::Dimension { expected: nc, got: val.len() });
                        }
                    }
                    for c in 0..nc {
                        let i = idx(m, j, c);
                        f[i] = vals[0].as_ref().map_or(0.0, |a| a[c]);
                        dtf[i] = vals[1].as_ref().map_or(0.0, |a| a[c]);
                        if let (Some(d), Some(a)) = (dx.as_mut(), vals[2].as_ref()) {
                            d[i] = a[c];
                        }
                        if let (Some(d), Some(a)) = (dv.as_mut(), vals[3].as_ref()) {
                            d[i] = a[c];
                        }
                    }
                }
            }
            dxf = dx;
            dvf = dv;
        }
        InitialData::Tabulated { f: a, dtau_f: b } => {
            for t in [a, b] {
                if t.components != nc {
                    return Err(EvolutionError::Dimension { expected: nc, got: t.components });
                }
                if t.values.len() != len {
                    return Err(EvolutionError::BadScenario(format!(
                        "tabulated data has {} values, grid needs {len}",
                        t.values.len()
                    )));
                }
            }
            f.copy_from_slice(&a.values);
            dtf.copy_from_slice(&b.values);
        }
    }
    check_finite(&f, nv * nc, grid, tau)?;
    check_finite(&dtf, nv * nc, grid, tau)?;
    let act = grid.active_count();
    let dxf = match dxf {
        Some(d) => d,
        None => {
            let mut d = vec![0.0; len];
            for j in 0..nv {
                for c in 0..nc {
                    let col: Vec<f64> = (0..act).map(|m| f[idx(m, j, c)]).collect();
                    for (m, g) in gradient(&col, grid.h()).into_iter().enumerate() {
                        d[idx(m, j, c)] = g;
                    }
                }
            }
            d
        }
    };
    check_finite(&dxf, nv * nc, grid, tau)?;
    let phi_plus: Vec<f64> = dtf.iter().zip(&dxf).map(|(a, b)| a - 2.0 * b).collect();
    let (phi_a, psi_a) = if angular {
        let dv = match dvf {
            Some(d) => d,
            None => {
                let mut d = vec![0.0; len];
                for m in 0..cells {
                    for c in 0..nc {
                        let row: Vec<f64> = (0..nv).map(|j| f[idx(m, j, c)]).collect();
                        for (j, g) in periodic_gradient(&row, grid.dv()).into_iter().enumerate() {
                            d[idx(m, j, c)] = g;
                        }
                    }
                }
                d
            }
        };
        let a: Vec<f64> = (0..len).map(|i| dv[i] / (grid.x(i / (nv * nc)) + tau + 0.5)).collect();
        (Some(a.clone()), Some(a))
    } else {
        (None, None)
    };
    Ok(FieldState {
        tau,
        grid: grid.clone(),
        components: nc,
        fields: Fields { f, phi_plus, phi_minus: dtf, phi_a, psi_a },
    })
}

/// `G = λ Ω^{(ℓ(n-1)-(n+3))/2} f̃^ℓ`, componentwise.
pub fn eval_g_scalar(f: &[f64], x: f64, tau: f64, n: usize, lambda: f64, ell: u32) -> Vec<f64> {
    let omega = conformal_factor(x, tau);
    let e = (ell as f64 * (n as f64 - 1.0) - (n as f64 + 3.0)) / 2.0;
    let w = lambda * omega.powf(e);
    f.iter().map(|v| w * v.powi(ell as i32)).collect()
}

/// Wave-map source
/// `G^a = -Γ^a_bc(Ω^s f̃){Ω^s(-φ+^b φ-^c + φ_A^b φ_A^c)
///   + (n-1)Ω^{(n-3)/2} f̃^c [(1+x+2τ)φ-^b - xφ+^b + (n-1)f̃^b]}`, `s = (n-1)/2`.
#[allow(clippy::too_many_arguments)]
pub fn eval_g_wavemap(
    f: &[f64],
    phi_plus: &[f64],
    phi_minus: &[f64],
    phi_a: Option<&[f64]>,
    x: f64,
    tau: f64,
    n: usize,
    target: &TargetManifold,
) -> Result<Vec<f64>, EvolutionError> {
    let nc = target.dim;
    for len in [f.len(), phi_plus.len(), phi_minus.len(), phi_a.map_or(nc, |a| a.len())] {
        if len != nc {
            return Err(EvolutionError::Dimension { expected: nc, got: len });
        }
    }
    let omega = conformal_factor(x, tau);
    let nm1 = n as f64 - 1.0;
    let ws = omega.powf(nm1 / 2.0);
    let wl = nm1 * omega.powf((n as f64 - 3.0) / 2.0);
    let u: Vec<f64> = f.iter().map(|v| ws * v).collect();
    let gamma = target.christoffel(&u)?;
    let mut out = vec![0.0; nc];
    for (a, g) in out.iter_mut().enumerate() {
        for b in 0..nc {
            let lower = (1.0 + x + 2.0 * tau) * phi_minus[b] - x * phi_plus[b] + nm1 * f[b];
            for c in 0..nc {
                let mut quad = -phi_plus[b] * phi_minus[c];
                if let Some(pa) = phi_a {
                    quad += pa[b] * pa[c];
                }
                let bracket = ws * quad + wl * f[c] * lower;
                *g -= gamma[a * nc * nc + b * nc + c] * bracket;
            }
        }
    }
    Ok(out)
}

/// Source `G` at every active node, written into `out`.
fn source_into(state: &FieldState, scenario: &Scenario, out: &mut [f64]) -> Result<(), EvolutionError> {
    let nc = state.components;
    let nv = state.grid.v_count();
    let fl = &state.fields;
    for m in 0..state.grid.active_count() {
        let x = state.grid.x(m);
        for j in 0..nv {
            let base = (m * nv + j) * nc;
            let r = base..base + nc;
            let g = match &scenario.equation {
                Equation::Linear => continue,
                Equation::Semilinear { lambda, ell } => {
                    eval_g_scalar(&fl.f[r.clone()], x, state.tau, scenario.n, *lambda, *ell)
                }
                Equation::WaveMap(t) => eval_g_wavemap(
                    &fl.f[r.clone()],
                    &fl.phi_plus[r.clone()],
                    &fl.phi_minus[r.clone()],
                    fl.phi_a.as_ref().map(|a| &a[r.clone()]),
                    x,
                    state.tau,
                    scenario.n,
                    t,
                )?,
            };
            out[r].copy_from_slice(&g);
        }
    }
    Ok(())
}

/// The source `G` of the first-order system as a field.
pub fn source_field(state: &FieldState, scenario: &Scenario) -> Result<SampledField, EvolutionError> {
    let mut values = vec![0.0; state.fields.f.len()];
    source_into(state, scenario, &mut values)?;
    Ok(SampledField { grid: state.grid.clone(), components: state.components, values })
}

/// `∂x` on the active cells of one column: upwind `(-3u_m + 4u_{m+1} - u_{m+2})/2h`
/// inside, centred at the second-to-last cell, backward at the last.
fn upwind_into(u: &[f64], stride: usize, offset: usize, act: usize, h: f64, out: &mut [f64]) {
    let at = |m: usize| u[m * stride + offset];
    let inv = 1.0 / (2.0 * h);
    for m in 0..act - 2 {
        out[m * stride + offset] = (-3.0 * at(m) + 4.0 * at(m + 1) - at(m + 2)) * inv;
    }
    out[(act - 2) * stride + offset] = (at(act - 1) - at(act - 3)) * inv;
    out[(act - 1) * stride + offset] = (3.0 * at(act - 1) - 4.0 * at(act - 2) + at(act - 3)) * inv;
}

fn upwind(u: &[f64], grid: &GridDomain, nc: usize) -> Vec<f64> {
    let stride = grid.v_count() * nc;
    let mut out = vec![0.0; u.len()];
    for off in 0..stride {
        upwind_into(u, stride, off, grid.active_count(), grid.h(), &mut out);
    }
    out
}

fn angular_derivative(u: &[f64], grid: &GridDomain, nc: usize) -> Vec<f64> {
    let nv = grid.v_count();
    let inv = 1.0 / (2.0 * grid.dv());
    let mut out = vec![0.0; u.len()];
    for m in 0..grid.active_count() {
        for j in 0..nv {
            let (jp, jm) = ((j + 1) % nv, (j + nv - 1) % nv);
            for c in 0..nc {
                out[(m * nv + j) * nc + c] = (u[(m * nv + jp) * nc + c] - u[(m * nv + jm) * nc + c]) * inv;
            }
        }
    }
    out
}

/// Time derivative of every field on the active cells (zero elsewhere).
pub fn rhs(state: &FieldState, scenario: &Scenario) -> Result<Fields, EvolutionError> {
    let grid = &state.grid;
    let act = grid.active_count();
    if act < 3 {
        return Err(EvolutionError::DomainExhausted(state.tau));
    }
    let nc = state.components;
    let nv = grid.v_count();
    let fl = &state.fields;
    let mut out = Fields::zeros_like(fl);
    let mut g = vec![0.0; fl.f.len()];
    source_into(state, scenario, &mut g)?;
    let dpm = upwind(&fl.phi_minus, grid, nc);
    let angular = match (&fl.phi_a, &fl.psi_a) {
        (Some(pa), Some(sa)) => Some((
            angular_derivative(pa, grid, nc),
            angular_derivative(sa, grid, nc),
            angular_derivative(&fl.phi_plus, grid, nc),
            angular_derivative(&fl.phi_minus, grid, nc),
            upwind(sa, grid, nc),
        )),
        _ => None,
    };
    let half_nm1 = (scenario.n as f64 - 1.0) / 2.0;
    for m in 0..act {
        let r = grid.x(m) + state.tau + 0.5;
        let w = half_nm1 / r;
        for i in (m * nv * nc)..((m + 1) * nv * nc) {
            let tr = w * (fl.phi_minus[i] - fl.phi_plus[i]);
            let (mut rp, mut rm) = (tr, 2.0 * dpm[i] + tr);
            if let Some((dpa, dsa, dpp, dpmv, xsa)) = &angular {
                rp += dsa[i] / r;
                rm += dpa[i] / r;
                let (pa, sa) = (fl.phi_a.as_ref().expect("angular"), fl.psi_a.as_ref().expect("angular"));
                out.psi_a.as_mut().expect("angular")[i] = 2.0 * xsa[i] + dpp[i] / r + sa[i] / r;
                out.phi_a.as_mut().expect("angular")[i] = dpmv[i] / r - pa[i] / r;
            }
            out.phi_plus[i] = rp - g[i];
            out.phi_minus[i] = rm - g[i];
            out.f[i] = fl.phi_minus[i];
        }
    }
    Ok(out)
}

/// One classical RK4 step; cells crossing the edge are deactivated afterwards.
pub fn step(state: &FieldState, dtau: f64, scenario: &Scenario) -> Result<FieldState, EvolutionError> {
    let limit = scenario.cfl * state.grid.h() / 2.0;
    if !(dtau > 0.0) || dtau > limit * (1.0 + 1e-12) {
        return Err(EvolutionError::Cfl { dtau, limit });
    }
    let len = state.active_len();
    let stage = |fields: Fields, tau: f64| FieldState { tau, grid: state.grid.clone(), components: state.components, fields };
    let k1 = rhs(state, scenario)?;
    let s2 = stage(state.fields.axpy(&k1, dtau / 2.0, len), state.tau + dtau / 2.0);
    let k2 = rhs(&s2, scenario)?;
    let s3 = stage(state.fields.axpy(&k2, dtau / 2.0, len), state.tau + dtau / 2.0);
    let k3 = rhs(&s3, scenario)?;
    let s4 = stage(state.fields.axpy(&k3, dtau, len), state.tau + dtau);
    let k4 = rhs(&s4, scenario)?;
    let mut next = state.fields.clone();
    for (((o, a), (b, c)), d) in next
        .arrays_mut()
        .into_iter()
        .zip(k1.arrays())
        .zip(k2.arrays().into_iter().zip(k3.arrays()))
        .zip(k4.arrays())
    {
        for i in 0..len {
            o[i] += dtau / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]);
        }
    }
    let tau = state.tau + dtau;
    let mut grid = state.grid.clone();
    grid.advance_to(tau)?;
    let out = FieldState { tau, grid, components: state.components, fields: next };
    let stride = out.grid.v_count() * out.components;
    for a in out.fields.arrays() {
        check_finite(a, stride, &state.grid, tau)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub tau: f64,
    pub sup_f: f64,
    pub constraint_residual: f64,
    pub active_cells: usize,
}

impl RunLogRow {
    fn of(s: &FieldState) -> Self {
        Self { tau: s.tau, sup_f: s.sup_f(), constraint_residual: s.constraint_residual(), active_cells: s.grid.active_count() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    BlowUp { tau: f64, sup_f: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Initial slice first, then one per output time reached.
    pub snapshots: Vec<FieldState>,
    pub log: Vec<RunLogRow>,
    pub outcome: RunOutcome,
}

/// Run to `t_final`, landing exactly on every output time.
pub fn evolve(scenario: &Scenario) -> Result<Trajectory, EvolutionError> {
    scenario.validate()?;
    let grid = scenario.grid()?;
    let mut state = build_initial_state(scenario, &grid)?;
    let ceiling = scenario.blowup_ceiling.unwrap_or(1e6 * state.sup_f().max(1.0));
    let mut traj = Trajectory { snapshots: vec![state.clone()], log: vec![RunLogRow::of(&state)], outcome: RunOutcome::Completed };
    let mut targets: Vec<f64> = scenario.output_times.iter().copied().filter(|&t| t > scenario.t_start).collect();
    if targets.last().map_or(true, |&t| t < scenario.t_final) && scenario.t_final > scenario.t_start {
        targets.push(scenario.t_final);
    }
    targets.dedup();
    let max_dt = scenario.cfl * scenario.h / 2.0;
    for target in targets {
        let start = state.tau;
        let steps = ((target - start) / max_dt - 1e-9).ceil().max(1.0) as usize;
        let dt = (target - start) / steps as f64;
        for s in 1..=steps {
            let mut next = step(&state, dt, scenario)?;
            if s == steps {
                next.tau = target;
            } else {
                next.tau = start + s as f64 * dt;
            }
            state = next;
            let sup = state.sup_f();
            if !(sup <= ceiling) {
                traj.log.push(RunLogRow::of(&state));
                traj.snapshots.push(state.clone());
                traj.outcome = RunOutcome::BlowUp { tau: state.tau, sup_f: sup };
                return Ok(traj);
            }
        }
        traj.log.push(RunLogRow::of(&state));
        traj.snapshots.push(state.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_fn(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> DataFn {
        Arc::new(move |x, _| vec![g(x)])
    }

    #[test]
    fn scalar_source_examples() {
        assert_eq!(eval_g_scalar(&[0.0], 0.3, 0.1, 3, 1.0, 3), vec![0.0]);
        let f = 0.37;
        assert_eq!(eval_g_scalar(&[f], 0.3, 0.1, 3, 1.0, 3)[0], f.powi(3));
        assert_relative_eq!(eval_g_scalar(&[1.0], 0.25, 0.0, 2, 1.0, 4)[0], (16.0f64 / 5.0).sqrt(), max_relative = 1e-15);
    }

    fn metric_christoffel_fd(t: &TargetManifold, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let eps = 1e-5;
        let h = t.metric(u).unwrap();
        let det = h[0] * h[3] - h[1] * h[2];
        let inv = [h[3] / det, -h[1] / det, -h[2] / det, h[0] / det];
        let dh = |k: usize| -> Vec<f64> {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[k] += eps;
            dn[k] -= eps;
            let (a, b) = (t.metric(&up).unwrap(), t.metric(&dn).unwrap());
            a.iter().zip(&b).map(|(p, q)| (p - q) / (2.0 * eps)).collect()
        };
        let d: Vec<Vec<f64>> = (0..n).map(dh).collect();
        let mut out = vec![0.0; n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let mut s = 0.0;
                    for e in 0..n {
                        s += 0.5 * inv[a * n + e] * (d[b][e * n + c] + d[c][e * n + b] - d[e][b * n + c]);
                    }
                    out[a * n * n + b * n + c] = s;
                }
            }
        }
        out
    }

    #[test]
    fn christoffel_closed_form_matches_metric() {
        for t in [TargetManifold::sphere(), TargetManifold::hyperbolic()] {
            for u in [[0.0, 0.0], [0.3, -0.2], [1e-3, 2e-3], [0.9, 0.6], [1.2, -0.4]] {
                let exact = t.christoffel(&u).unwrap();
                let fd = metric_christoffel_fd(&t, &u);
                for (a, b) in exact.iter().zip(&fd) {
                    assert!((a - b).abs() < 1e-8, "{:?} at {u:?}: {a} vs {b}", t.kind);
                }
            }
            assert!(t.christoffel(&[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        for sign in [-1.0, 1.0] {
            let (k0, d0) = k_and_derivative(1.0 - 1e-12, sign);
            let (k1, d1) = k_and_derivative(1.0, sign);
            assert!((k0 - k1).abs() < 1e-12 && (d0 - d1).abs() < 1e-11);
        }
        let (k, d) = k_and_derivative(0.0, -1.0);
        assert_relative_eq!(k, -1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(d, 4.0 / 45.0, max_relative = 1e-15);
    }

    #[test]
    fn wavemap_source_examples() {
        let flat = TargetManifold::flat(2);
        let g = eval_g_wavemap(&[0.3, 0.1], &[1.0, 2.0], &[0.5, -1.0], None, 0.4, 0.1, 3, &flat).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let s2 = TargetManifold::sphere();
        let g = eval_g_wavemap(&[0.0, 0.0], &[1.0, 2.0], &[0.5, -1.0], None, 0.4, 0.1, 3, &s2).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        // radial geodesic: Γ(u)(u, u) = 0, so only the φ-terms contribute
        let g = eval_g_wavemap(&[0.1, 0.0], &[0.0, 0.0], &[0.0, 0.0], None, 0.5, 0.0, 3, &s2).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-17));
        // Ω = 3/4, u = (ρ, 0) with ρ = 0.075; polar symbols give
        // Γ^0_11 = (ρ - sin ρ cos ρ)/ρ² and Γ^1_10 = cot ρ - 1/ρ
        let g = eval_g_wavemap(&[0.1, 0.0], &[0.0, 1.0], &[0.0, 1.0], None, 0.5, 0.0, 3, &s2).unwrap();
        let rho = 0.075f64;
        assert_relative_eq!(g[0], 0.75 * (rho - rho.sin() * rho.cos()) / (rho * rho), max_relative = 1e-12);
        assert_relative_eq!(g[1], -0.2 * (1.0 / rho.tan() - 1.0 / rho), max_relative = 1e-12);
    }

    fn toy_state(c: f64, h: f64) -> (Scenario, FieldState) {
        let sc = Scenario::toy1d(c, -0.5, h, 0.25);
        let grid = sc.grid().unwrap();
        let st = build_initial_state(&sc, &grid).unwrap();
        (sc, st)
    }

    #[test]
    fn initial_state_examples() {
        let sc = Scenario::new(Equation::Linear, 3, 1, InitialData::zero(1), 1.0 / 64.0, 0.25);
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        assert!(st.fields.arrays().iter().all(|a| a.iter().all(|v| *v == 0.0)));

        let (_, st) = toy_state(-1.0, 1.0 / 64.0);
        for m in 0..st.grid.cells() {
            let x = st.grid.x(m);
            assert_relative_eq!(st.fields.f[m], -2.0 * x.sqrt(), max_relative = 1e-15);
            assert_eq!(st.fields.phi_minus[m], 0.0);
            assert_relative_eq!(st.fields.phi_plus[m], 2.0 / x.sqrt(), max_relative = 1e-14);
        }

        let sc = Scenario::new(
            Equation::Linear,
            3,
            1,
            InitialData::ClosedForm { f: scalar_fn(|_| 0.7), dtau_f: scalar_fn(|_| 0.0), dx_f: Some(scalar_fn(|_| 0.0)), dv_f: None },
            1.0 / 32.0,
            0.25,
        );
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        assert!(st.fields.phi_plus.iter().all(|v| *v == 0.0));
        let r = rhs(&st, &sc).unwrap();
        assert!(r.arrays().iter().all(|a| a.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn initial_state_errors() {
        let mut sc = Scenario::new(Equation::Linear, 3, 1, InitialData::zero(1), 1.0 / 32.0, 0.25);
        sc.v_nodes = Some(8);
        let grid = GridDomain::new(1.0, 1.0 / 32.0, Some(8)).unwrap();
        assert_eq!(build_initial_state(&sc, &grid), Err(EvolutionError::Angular(3)));
        let sc = Scenario::new(
            Equation::Linear,
            3,
            1,
            InitialData::ClosedForm { f: scalar_fn(|x| 1.0 / (x - 0.5 / 32.0)), dtau_f: scalar_fn(|_| 0.0), dx_f: None, dv_f: None },
            1.0 / 32.0,
            0.25,
        );
        assert!(matches!(build_initial_state(&sc, &sc.grid().unwrap()), Err(EvolutionError::NonFinite { cell: 0, .. })));
    }

    #[test]
    fn rhs_hand_substitution() {
        let n = 3;
        let sc = Scenario::new(
            Equation::Linear,
            n,
            1,
            InitialData::ClosedForm {
                f: scalar_fn(|x| x),
                dtau_f: scalar_fn(|_| 0.0),
                dx_f: Some(scalar_fn(|_| 1.0)),
                dv_f: None,
            },
            1.0 / 32.0,
            0.25,
        );
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        assert!(st.fields.phi_plus.iter().all(|v| *v == -2.0));
        let r = rhs(&st, &sc).unwrap();
        for m in 0..st.grid.active_count() {
            let expect = (n as f64 - 1.0) / (st.grid.x(m) + 0.5);
            assert_relative_eq!(r.phi_plus[m], expect, max_relative = 1e-15);
            assert_relative_eq!(r.phi_minus[m], expect, max_relative = 1e-15);
            assert_eq!(r.f[m], 0.0);
        }
    }

    #[test]
    fn rhs_on_exact_toy_solution_is_second_order() {
        let mut errs = Vec::new();
        for k in [6, 7, 8] {
            let h = 2f64.powi(-k);
            let (sc, st) = toy_state(0.5, h);
            let r = rhs(&st, &sc).unwrap();
            let mut e = 0.0f64;
            for m in 0..st.grid.active_count() {
                let x = st.grid.x(m);
                if x < 0.25 {
                    continue;
                }
                // ∂τφ- = ∂τ² g = 4α(α+1)(C+1)(2τ+x)^{α-1}
                let exact = -0.5 * 4.0 * 0.5 * 1.5 * x.powf(-1.5);
                e = e.max((r.phi_minus[m] - exact).abs());
            }
            errs.push(e);
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn transport_of_a_bump() {
        let bump = |x: f64| (-(x - 0.7f64).powi(2) / 0.005).exp();
        let mut errs = Vec::new();
        for k in [8, 9, 10] {
            let sc = Scenario::new(
                Equation::Linear,
                1,
                1,
                InitialData::ClosedForm { f: scalar_fn(|_| 0.0), dtau_f: scalar_fn(bump), dx_f: Some(scalar_fn(|_| 0.0)), dv_f: None },
                2f64.powi(-k),
                0.2,
            );
            let traj = evolve(&sc).unwrap();
            let last = traj.snapshots.last().unwrap();
            let e = (0..last.grid.active_count())
                .map(|m| (last.fields.phi_minus[m] - bump(last.grid.x(m) + 0.4)).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[2] < 5e-3, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn step_zero_and_cfl() {
        let sc = Scenario::new(Equation::Linear, 3, 1, InitialData::zero(1), 1.0 / 32.0, 0.25);
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        let next = step(&st, 1.0 / 128.0, &sc).unwrap();
        assert!(next.fields.f.iter().all(|v| *v == 0.0));
        assert!(matches!(step(&st, 1.0 / 64.0, &sc), Err(EvolutionError::Cfl { .. })));
        let mut fast = sc.clone();
        fast.cfl = 0.7;
        assert!(matches!(fast.validate(), Err(EvolutionError::BadScenario(_))));
    }

    #[test]
    fn single_step_local_error() {
        let h = 2f64.powi(-8);
        let (sc, st) = toy_state(0.0, h);
        let dt = sc.cfl * h / 2.0;
        let next = step(&st, dt, &sc).unwrap();
        for m in 16..next.grid.active_count() {
            let x = next.grid.x(m);
            let e = (next.fields.f[m] - toy_solution(0.0, -0.5, x, dt)).abs();
            assert!(e < 10.0 * (dt.powi(4) + h * h * dt) * x.powf(-2.5), "m = {m}: {e}");
        }
    }

    #[test]
    fn stationary_toy_run() {
        let sc = Scenario::toy1d(-1.0, -0.5, 2f64.powi(-8), 0.25);
        let traj = evolve(&sc).unwrap();
        assert_eq!(traj.outcome, RunOutcome::Completed);
        let last = traj.snapshots.last().unwrap();
        assert_eq!(last.tau, 0.25);
        for m in 0..last.grid.active_count() {
            assert_relative_eq!(last.fields.f[m], -2.0 * last.grid.x(m).sqrt(), max_relative = 1e-12);
        }
    }

    #[test]
    fn edge_moves_at_speed_two() {
        let sc = Scenario::toy1d(0.0, -0.5, 1.0 / 64.0, 0.25);
        let traj = evolve(&sc).unwrap();
        let last = traj.snapshots.last().unwrap();
        assert_eq!(last.grid.active_count(), 32);
        let counts: Vec<usize> = traj.log.iter().map(|r| r.active_cells).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn blow_up_is_reported() {
        let mut sc = Scenario::new(
            Equation::Semilinear { lambda: -1.0, ell: 3 },
            3,
            1,
            InitialData::ClosedForm { f: scalar_fn(|_| 50.0), dtau_f: scalar_fn(|_| 0.0), dx_f: Some(scalar_fn(|_| 0.0)), dv_f: None },
            1.0 / 64.0,
            0.4,
        );
        sc.blowup_ceiling = Some(1e4);
        let traj = evolve(&sc).unwrap();
        assert!(matches!(traj.outcome, RunOutcome::BlowUp { .. }), "{:?}", traj.outcome);
    }

    #[test]
    fn subcritical_gate() {
        let mut sc = Scenario::new(Equation::Semilinear { lambda: 1.0, ell: 2 }, 3, 1, InitialData::zero(1), 1.0 / 32.0, 0.25);
        assert!(sc.subcritical_violating());
        assert!(matches!(sc.validate(), Err(EvolutionError::BadScenario(_))));
        sc.allow_subcritical = true;
        assert!(sc.validate().is_ok());
    }

    #[test]
    fn angular_fields_agree_initially() {
        let h = 1.0 / 64.0;
        let mut sc = Scenario::new(
            Equation::Linear,
            2,
            1,
            InitialData::ClosedForm {
                f: Arc::new(|x, v| vec![x * (1.0 - x) * v.cos()]),
                dtau_f: Arc::new(|_, _| vec![0.0]),
                dx_f: None,
                dv_f: None,
            },
            h,
            0.2,
        );
        sc.v_nodes = Some(16);
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        assert_eq!(st.angular_residual(), 0.0);
        let traj = evolve(&sc).unwrap();
        let last = traj.snapshots.last().unwrap();
        assert!(last.angular_residual() < 0.02, "{}", last.angular_residual());
        assert!(last.constraint_residual() < 1e-2);
    }

    #[test]
    fn flat_target_matches_linear_bitwise() {
        let data = InitialData::ClosedForm {
            f: Arc::new(|x, v| vec![0.01 * x / (1.0 + x) * (1.0 + 0.5 * v.cos()), -0.02 * x * x]),
            dtau_f: Arc::new(|x, _| vec![0.0, 0.01 * x]),
            dx_f: None,
            dv_f: None,
        };
        let mut lin = Scenario::new(Equation::Linear, 2, 2, data.clone(), 1.0 / 32.0, 0.1);
        lin.v_nodes = Some(8);
        let mut wm = lin.clone();
        wm.equation = Equation::WaveMap(TargetManifold::flat(2));
        let a = evolve(&lin).unwrap();
        let b = evolve(&wm).unwrap();
        for (s, t) in a.snapshots.iter().zip(&b.snapshots) {
            for (p, q) in s.fields.arrays().iter().zip(t.fields.arrays()) {
                assert!(p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }

    #[test]
    fn delta_perturbation_stays_left() {
        let h = 1.0 / 64.0;
        let sc = Scenario::new(Equation::Linear, 3, 1, InitialData::zero(1), h, 0.25);
        let st = build_initial_state(&sc, &sc.grid().unwrap()).unwrap();
        let mut kicked = st.clone();
        let m0 = 30;
        kicked.fields.phi_minus[m0] = 1.0;
        let (mut a, mut b) = (st, kicked);
        for _ in 0..20 {
            a = step(&a, h / 4.0, &sc).unwrap();
            b = step(&b, h / 4.0, &sc).unwrap();
        }
        for m in (m0 + 1)..b.grid.active_count() {
            for (p, q) in a.fields.arrays().iter().zip(b.fields.arrays()) {
                assert_eq!(p[m], q[m], "cell {m}");
            }
        }
        assert!(b.fields.f[m0 - 3] != 0.0);
    }

    proptest! {
        #[test]
        fn semilinear_exponent_law(x in 0.01f64..1.0, tau in 0.0f64..0.4, f in -1.0f64..1.0, ell in 1u32..6, n in 2usize..5) {
            let omega = conformal_factor(x, tau);
            let s = (n as f64 - 1.0) / 2.0;
            let direct = omega.powf(-(n as f64 + 3.0) / 2.0) * (omega.powf(s) * f).powi(ell as i32);
            let g = eval_g_scalar(&[f], x, tau, n, 1.0, ell)[0];
            prop_assert!((g - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
        }

        #[test]
        fn christoffel_symmetric(a in -1.5f64..1.5, b in -1.5f64..1.5) {
            for t in [TargetManifold::sphere(), TargetManifold::hyperbolic()] {
                let g = t.christoffel(&[a, b]).unwrap();
                for i in 0..2 { prop_assert!((g[i * 4 + 1] - g[i * 4 + 2]).abs() < 1e-14); }
            }
        }
    }
}
