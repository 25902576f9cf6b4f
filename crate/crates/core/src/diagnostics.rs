//! Energies, Gronwall fits, corner-condition exponents and polyhomogeneous
//! fits on evolution output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{source_field, EvolutionError, FieldKind, FieldState, Scenario, Trajectory};
use crate::odekit::{fit_monotone_constant, loglog_slope, OdeError};
use crate::spaces::{phg_eval, sobolev_norm, NormSpec, PhgError, PhgExpansion, SampledField, SpaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("energy order k = {0} exceeds 2")]
    OrderTooHigh(usize),
    #[error("need at least {need} records, got {got}")]
    TooFewRecords { need: usize, got: usize },
    #[error("Gronwall violation: no constant below {0} bounds the energy")]
    GronwallViolation(f64),
    #[error("need at least {need} snapshots, got {got}")]
    TooFewSnapshots { need: usize, got: usize },
    #[error("slope window spans a factor {0} in tau, less than one decade")]
    ShortWindow(f64),
    #[error("need at least {need} fit points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("fit points span a factor {0}, less than three decades")]
    NarrowSpan(f64),
    #[error("condition number {0:e} exceeds 1e10; reduce depth")]
    ReduceDepth(f64),
    #[error("samples and points differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("field {0:?} is absent from the state")]
    MissingField(FieldKind),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Phg(#[from] PhgError),
}

/// Default inner cutoff of the energy, `4h`.
pub fn default_cutoff(state: &FieldState) -> f64 {
    4.0 * state.grid.h()
}

fn norm_sq(f: &SampledField, alpha: f64, k: usize, x2: f64) -> Result<f64, DiagnosticsError> {
    let spec = NormSpec::sobolev(alpha, k, x2, f.grid.x1())?;
    Ok(sobolev_norm(f, &spec)?.powi(2))
}

/// `‖f̃‖²_α + ‖φ-‖²_α + ‖φ+‖²_{α-1/2} + ‖φ_A‖²_α` in `ℋ_k` over `(x2, edge)`.
pub fn energy_with_cutoff(state: &FieldState, alpha: f64, k: usize, x2: f64) -> Result<f64, DiagnosticsError> {
    if k > 2 {
        return Err(DiagnosticsError::OrderTooHigh(k));
    }
    let get = |kind| state.field(kind).ok_or(DiagnosticsError::MissingField(kind));
    let mut e = norm_sq(&get(FieldKind::F)?, alpha, k, x2)?
        + norm_sq(&get(FieldKind::PhiMinus)?, alpha, k, x2)?
        + norm_sq(&get(FieldKind::PhiPlus)?, alpha - 0.5, k, x2)?;
    if let Some(pa) = state.field(FieldKind::PhiA) {
        e += norm_sq(&pa, alpha, k, x2)?;
    }
    Ok(e)
}

pub fn energy(state: &FieldState, alpha: f64, k: usize) -> Result<f64, DiagnosticsError> {
    energy_with_cutoff(state, alpha, k, default_cutoff(state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub tau: f64,
    pub e_alpha: f64,
    /// `‖G‖²` in `ℋ^{α-1/2}_k`.
    pub source_norm: f64,
    pub sup_f: f64,
}

pub fn energy_record(
    state: &FieldState,
    scenario: &Scenario,
    alpha: f64,
    k: usize,
    x2: f64,
) -> Result<EnergyRecord, DiagnosticsError> {
    let g = source_field(state, scenario)?;
    Ok(EnergyRecord {
        tau: state.tau,
        e_alpha: energy_with_cutoff(state, alpha, k, x2)?,
        source_norm: norm_sq(&g, alpha - 0.5, k, x2)?,
        sup_f: state.sup_f(),
    })
}

/// One record per snapshot; `x2 = None` picks `4h`.
pub fn energy_series(
    traj: &Trajectory,
    scenario: &Scenario,
    alpha: f64,
    k: usize,
    x2: Option<f64>,
) -> Result<Vec<EnergyRecord>, DiagnosticsError> {
    traj.snapshots
        .iter()
        .map(|s| energy_record(s, scenario, alpha, k, x2.unwrap_or_else(|| default_cutoff(s))))
        .collect()
}

/// Smallest `C >= 0` with `E(t) <= C(E(0)e^{Ct} + ∫_0^t e^{C(t-s)} S(s) ds)`
/// at every record, bisected to 1e-4 relative, capped at 1e3.
pub fn gronwall_fit(records: &[EnergyRecord]) -> Result<f64, DiagnosticsError> {
    if records.len() < 8 {
        return Err(DiagnosticsError::TooFewRecords { need: 8, got: records.len() });
    }
    if records.iter().all(|r| r.e_alpha == 0.0 && r.source_norm == 0.0) {
        return Ok(0.0);
    }
    let t0 = records[0].tau;
    let e0 = records[0].e_alpha;
    let holds = |c: f64| -> bool {
        let mut integral = 0.0;
        for (i, r) in records.iter().enumerate() {
            let t = r.tau - t0;
            if i > 0 {
                let p = &records[i - 1];
                let (a, b) = (p.tau - t0, t);
                // ∫ e^{C(t-s)} S(s) ds, accumulated as e^{-Cs} S and rescaled
                integral += 0.5 * (b - a) * ((-c * a).exp() * p.source_norm + (-c * b).exp() * r.source_norm);
            }
            let bound = c * (e0 * (c * t).exp() + (c * t).exp() * integral);
            if r.e_alpha > bound * (1.0 + 1e-12) {
                return false;
            }
        }
        true
    };
    fit_monotone_constant(0.0, 1e3, holds).map_err(|e| match e {
        OdeError::NoConstant(cap) => DiagnosticsError::GronwallViolation(cap),
        _ => DiagnosticsError::GronwallViolation(1e3),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Compatible,
    Incompatible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerReport {
    pub order: usize,
    pub slope: f64,
    pub verdict: Verdict,
    pub taus: Vec<f64>,
    pub sups: Vec<f64>,
}

/// Slopes at or above this value are read as compatible.
pub const COMPATIBLE_SLOPE: f64 = -0.05;

/// Blow-up exponents of `sup_x x^{-w}|∂τ^i f̃|` against τ for `i = 1..=i_max`,
/// the derivatives taken as forward divided differences across snapshots.
/// Snapshots must be ascending in τ; `window` restricts the τ-values
/// entering the slope.
pub fn corner_exponents(
    snapshots: &[FieldState],
    i_max: usize,
    sup_weight: f64,
    window: Option<(f64, f64)>,
) -> Result<Vec<CornerReport>, DiagnosticsError> {
    let i_max = i_max.clamp(1, 2);
    if snapshots.len() < i_max + 2 {
        return Err(DiagnosticsError::TooFewSnapshots { need: i_max + 2, got: snapshots.len() });
    }
    let nv = snapshots[0].grid.v_count();
    let nc = snapshots[0].components;
    let cells = snapshots.iter().map(|s| s.grid.active_count()).min().unwrap_or(0);
    let stride = nv * nc;
    let len = cells * stride;
    let taus: Vec<f64> = snapshots.iter().map(|s| s.tau).collect();
    // Newton divided differences: D^i[w] = (D^{i-1}[w+1] - D^{i-1}[w])/(τ_{w+i} - τ_w)
    let mut layer: Vec<Vec<f64>> = snapshots.iter().map(|s| s.fields.f[..len].to_vec()).collect();
    let mut reports = Vec::new();
    let mut factorial = 1.0;
    for order in 1..=i_max {
        factorial *= order as f64;
        layer = (0..layer.len() - 1)
            .map(|w| {
                let span = taus[w + order] - taus[w];
                layer[w].iter().zip(&layer[w + 1]).map(|(a, b)| (b - a) / span).collect()
            })
            .collect();
        let sups: Vec<f64> = layer
            .iter()
            .map(|v| {
                v.chunks(stride)
                    .enumerate()
                    .map(|(m, c)| {
                        let x = snapshots[0].grid.x(m);
                        factorial * x.powf(-sup_weight) * c.iter().map(|a| a * a).sum::<f64>().sqrt()
                    })
                    .fold(0.0, f64::max)
                    .max(f64::MIN_POSITIVE)
            })
            .collect();
        let (lo, hi) = window.unwrap_or((0.0, f64::INFINITY));
        let (ts, ss): (Vec<f64>, Vec<f64>) = taus
            .iter()
            .zip(&sups)
            .filter(|(t, _)| **t > 0.0 && **t >= lo * (1.0 - 1e-12) && **t <= hi * (1.0 + 1e-12))
            .map(|(t, s)| (*t, *s))
            .unzip();
        if ts.len() < 2 {
            return Err(DiagnosticsError::TooFewSnapshots { need: order + 3, got: snapshots.len() });
        }
        let ratio = ts[ts.len() - 1] / ts[0];
        if ratio < 10.0 * (1.0 - 1e-12) {
            return Err(DiagnosticsError::ShortWindow(ratio));
        }
        let slope = loglog_slope(&ts, &ss);
        let verdict = if slope >= COMPATIBLE_SLOPE { Verdict::Compatible } else { Verdict::Incompatible };
        reports.push(CornerReport { order, slope, verdict, taus: ts, sups: ss });
    }
    Ok(reports)
}

/// Fitting abscissae `x_max·2^{-n}·{1, 1.25, 1.5, 1.75}` inside `[x_min, x_max]`, ascending.
pub fn dyadic_fit_points(x_max: f64, x_min: f64) -> Vec<f64> {
    let mut pts = Vec::new();
    let mut n = 0;
    loop {
        let base = x_max * 2f64.powi(-n);
        if base * 1.75 < x_min {
            break;
        }
        for m in [1.0, 1.25, 1.5, 1.75] {
            let x = base * m;
            if x >= x_min && x <= x_max {
                pts.push(x);
            }
        }
        n += 1;
    }
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    pts
}

/// Row weighting of the least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitWeight {
    /// Plain least squares; best coefficient accuracy.
    #[default]
    Uniform,
    /// Rows scaled by `x^{-(β+(p+1)δ)}` so the residual near `x = 0` follows
    /// the first omitted term and its slope is meaningful.
    Remainder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub d: u32,
    pub beta: f64,
    pub depth: usize,
    pub jmax: usize,
    #[serde(default)]
    pub weight: FitWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhgFit {
    pub expansion: PhgExpansion,
    pub condition_number: f64,
    pub residual_rms: f64,
    /// Log power admitted by the residual test.
    pub log_power: usize,
    /// Log-log slope of the residual over the innermost decade; `None` when exact.
    pub remainder_slope: Option<f64>,
}

struct Solve {
    coeffs: Vec<((usize, usize), f64)>,
    cond: f64,
    resid: f64,
}

fn solve_basis(xs: &[f64], ys: &[f64], spec: &FitSpec, jmax: usize) -> Result<Solve, DiagnosticsError> {
    let delta = 1.0 / spec.d as f64;
    let cols: Vec<(usize, usize)> = (0..=spec.depth).flat_map(|i| (0..=jmax).map(move |j| (i, j))).collect();
    let need = 3 * cols.len();
    if xs.len() < need {
        return Err(DiagnosticsError::TooFewPoints { need, got: xs.len() });
    }
    let weights: Vec<f64> = match spec.weight {
        FitWeight::Uniform => vec![1.0; xs.len()],
        FitWeight::Remainder => {
            let wexp = spec.beta + (spec.depth as f64 + 1.0) * delta;
            xs.iter().map(|x| x.powf(-wexp)).collect()
        }
    };
    let mut a = DMatrix::from_fn(xs.len(), cols.len(), |r, c| {
        let (i, j) = cols[c];
        let x = xs[r];
        weights[r] * x.powf(spec.beta + i as f64 * delta) * x.ln().powi(j as i32)
    });
    let mut scale = vec![1.0; cols.len()];
    for (c, s) in scale.iter_mut().enumerate() {
        let m = a.column(c).amax();
        if m > 0.0 {
            *s = m;
            a.column_mut(c).scale_mut(1.0 / m);
        }
    }
    let b = DVector::from_iterator(xs.len(), ys.iter().zip(&weights).map(|(y, w)| y * w));
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= 1e10) {
        return Err(DiagnosticsError::ReduceDepth(cond));
    }
    let sol = svd.solve(&b, 0.0).map_err(|_| DiagnosticsError::ReduceDepth(cond))?;
    let r = &a * &sol - &b;
    let resid = (r.norm_squared() / xs.len() as f64).sqrt();
    let coeffs = cols.iter().enumerate().map(|(c, &k)| (k, sol[c] / scale[c])).collect();
    Ok(Solve { coeffs, cond, resid })
}

/// Least squares in `{x^{β+iδ}(ln x)^j}`; log columns are admitted
/// one power at a time while each reduces the residual tenfold.
pub fn phg_fit(xs: &[f64], ys: &[f64], spec: &FitSpec) -> Result<PhgFit, DiagnosticsError> {
    if xs.len() != ys.len() {
        return Err(DiagnosticsError::Length(xs.len(), ys.len()));
    }
    let (lo, hi) = xs.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    if hi / lo < 1e3 * (1.0 - 1e-9) {
        return Err(DiagnosticsError::NarrowSpan(hi / lo));
    }
    let mut best = solve_basis(xs, ys, spec, 0)?;
    let mut log_power = 0;
    for j in 1..=spec.jmax {
        match solve_basis(xs, ys, spec, j) {
            Ok(s) if s.resid * 10.0 <= best.resid => {
                best = s;
                log_power = j;
            }
            _ => break,
        }
    }
    let mut e = PhgExpansion::new(spec.d, spec.beta, spec.depth)?;
    for &((i, j), v) in &best.coeffs {
        e.set_const(i, j, v)?;
    }
    let slope = match residual_decay(&e, xs, ys)? {
        Decay::Exact => None,
        Decay::Slope(s) => Some(s),
    };
    if let Some(s) = slope {
        e.set_remainder_exponent(s);
    }
    Ok(PhgFit { expansion: e, condition_number: best.cond, residual_rms: best.resid, log_power, remainder_slope: slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Decay {
    Exact,
    Slope(f64),
}

/// Log-log slope of `|sample - e(x)|` over the innermost decade of `xs`.
pub fn residual_decay(e: &PhgExpansion, xs: &[f64], ys: &[f64]) -> Result<Decay, DiagnosticsError> {
    if xs.len() != ys.len() {
        return Err(DiagnosticsError::Length(xs.len(), ys.len()));
    }
    let res: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| phg_eval(e, x, 0).map(|v| (y - v).abs()))
        .collect::<Result<_, _>>()?;
    if res.iter().all(|r| *r < 1e-13) {
        return Ok(Decay::Exact);
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let (px, pr): (Vec<f64>, Vec<f64>) =
        xs.iter().zip(&res).filter(|(x, _)| **x <= 10.0 * lo * (1.0 + 1e-12)).map(|(x, r)| (*x, *r)).unzip();
    Ok(Decay::Slope(loglog_slope(&px, &pr)))
}

/// Samples of one field of a snapshot at `xs` (cubic interpolation).
pub fn snapshot_samples(
    state: &FieldState,
    kind: FieldKind,
    v_node: usize,
    component: usize,
    xs: &[f64],
) -> Result<Vec<f64>, DiagnosticsError> {
    let f = state.field(kind).ok_or(DiagnosticsError::MissingField(kind))?;
    Ok(f.interpolate(xs, v_node, component))
}
