//! Run configuration files (TOML) and their translation into scenarios.

use std::path::PathBuf;
use std::sync::Arc;

use hyperboloidal_core::diagnostics::FitWeight;
use hyperboloidal_core::evolution::{
    power_threshold, DataFn, Equation, EvolutionError, FieldKind, InitialData, Scenario, TargetManifold, MAX_CFL,
};
use serde::Deserialize;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquationName {
    Linear,
    Semilinear,
    Wavemap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    Flat,
    Sphere,
    Hyperbolic,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub equation: EquationName,
    pub n: usize,
    pub components: Option<usize>,
    pub lambda: Option<f64>,
    pub ell: Option<u32>,
    pub target: Option<TargetName>,
    #[serde(default = "one")]
    pub x1: f64,
    pub h: f64,
    pub v_nodes: Option<usize>,
    #[serde(default)]
    pub t_start: f64,
    pub t_final: f64,
    #[serde(default = "half")]
    pub cfl: f64,
    pub blowup_ceiling: Option<f64>,
    #[serde(default)]
    pub allow_subcritical: bool,
}

/// Named initial-data families. Profiles are scalar; `weights[c]` scales
/// the profile in component `c` (default: first component only).
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Zero,
    /// The 1+1 closed-form solution on the slice `τ = t_start`.
    Toy1d { c: f64, alpha: f64 },
    /// `f̃ = a x^p / (1+x)^q`, `∂τf̃ = b x^p / (1+x)^q`.
    Rational {
        amplitude: f64,
        #[serde(default)]
        power: f64,
        #[serde(default)]
        pole: f64,
        #[serde(default)]
        dtau_amplitude: f64,
        weights: Option<Vec<f64>>,
    },
    /// `f̃ = a x^p (1-x)^q cos(m v)` (zero for `x >= 1`), `∂τf̃ = 0`.
    Bump {
        amplitude: f64,
        p: f64,
        q: f64,
        #[serde(default)]
        mode: u32,
        weights: Option<Vec<f64>>,
    },
}

fn default_alpha() -> f64 {
    -0.5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Accept α outside `(-1, -1/2]`.
    #[serde(default)]
    pub allow_any_alpha: bool,
    #[serde(default)]
    pub k: usize,
    /// Inner cutoff of the energy; `4h` when absent.
    pub energy_cutoff: Option<f64>,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default = "yes")]
    pub snapshots: bool,
    pub corner: Option<CornerConfig>,
    pub phg_fit: Option<FitConfig>,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            allow_any_alpha: false,
            k: 0,
            energy_cutoff: None,
            times: Vec::new(),
            snapshots: true,
            corner: None,
            phg_fit: None,
        }
    }
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerConfig {
    #[serde(default = "one_usize")]
    pub i_max: usize,
    /// Exponent `w` of the sup weight `x^{-w}`.
    #[serde(default)]
    pub weight: f64,
    pub window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    F,
    PhiPlus,
    PhiMinus,
}

impl FieldName {
    pub fn kind(self) -> FieldKind {
        match self {
            Self::F => FieldKind::F,
            Self::PhiPlus => FieldKind::PhiPlus,
            Self::PhiMinus => FieldKind::PhiMinus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::F => "f",
            Self::PhiPlus => "phi_plus",
            Self::PhiMinus => "phi_minus",
        }
    }
}

fn field_f() -> FieldName {
    FieldName::F
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Output time of the snapshot to fit.
    pub at: f64,
    pub delta: f64,
    #[serde(default)]
    pub beta: f64,
    pub depth: usize,
    #[serde(default)]
    pub jmax: usize,
    #[serde(default)]
    pub weight: FitWeight,
    pub x_min: f64,
    pub x_max: f64,
    #[serde(default = "field_f")]
    pub field: FieldName,
    #[serde(default)]
    pub component: usize,
    #[serde(default)]
    pub v_node: usize,
}

fn config_error(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

/// `1/δ` as an integer, when it is one.
pub fn delta_denominator(delta: f64) -> Option<u32> {
    if !(delta > 0.0 && delta <= 1.0) {
        return None;
    }
    let d = (1.0 / delta).round();
    ((d * delta - 1.0).abs() < 1e-9).then_some(d as u32)
}

/// Section header in force at byte `offset` of a TOML document.
fn section_at(src: &str, offset: usize) -> Option<String> {
    let end = src[offset.min(src.len())..].find('\n').map_or(src.len(), |i| offset + i);
    src[..end]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

/// Offset of the first line at or after `from` that assigns `key`.
fn key_line(src: &str, key: &str, from: usize) -> Option<usize> {
    let mut at = 0;
    for line in src.split_inclusive('\n') {
        let head = line.trim_start();
        if at >= from && head.strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('=')) {
            return Some(at);
        }
        at += line.len();
    }
    None
}

fn key_of_parse_error(src: &str, err: &toml::de::Error) -> String {
    let msg = err.message();
    let field = msg.split('`').nth(1).map(str::to_string);
    let start = err.span().map_or(0, |s| s.start);
    // Buffered tables (the tagged `[initial]`) report coarse spans, so prefer the line defining the key.
    let defined = field.as_deref().and_then(|f| key_line(src, f, start).or_else(|| key_line(src, f, 0)));
    let section = match defined {
        Some(at) => section_at(src, at),
        None => err.span().and_then(|s| section_at(src, s.start)),
    };
    match (section, field) {
        (Some(s), Some(f)) if !f.contains(' ') => format!("{s}.{f}"),
        (Some(s), _) => s,
        (None, Some(f)) if !f.contains(' ') => f,
        _ => "<document>".to_string(),
    }
}

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(src)
            .map_err(|e| config_error(&key_of_parse_error(src, &e), e.message().to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(config_error("version", format!("unsupported version {}, expected {CONFIG_VERSION}", cfg.version)));
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let s = &self.scenario;
        let o = &self.outputs;
        if !(s.h > 0.0 && s.h.is_finite()) {
            return Err(config_error("scenario.h", format!("h = {} must be positive", s.h)));
        }
        if !(s.x1 > s.h && s.x1.is_finite()) {
            return Err(config_error("scenario.x1", format!("x1 = {} must exceed h", s.x1)));
        }
        if !(s.cfl > 0.0 && s.cfl <= MAX_CFL) {
            return Err(config_error("scenario.cfl", format!("cfl = {} must lie in (0, {MAX_CFL}]", s.cfl)));
        }
        if !(s.t_start >= 0.0 && s.t_start.is_finite()) {
            return Err(config_error("scenario.t_start", format!("t_start = {} must be non-negative", s.t_start)));
        }
        if !(s.t_final >= s.t_start && s.t_final.is_finite()) {
            return Err(config_error("scenario.t_final", format!("t_final = {} must be at least t_start", s.t_final)));
        }
        if s.x1 - 2.0 * s.t_final <= 4.0 * s.h {
            return Err(config_error(
                "scenario.t_final",
                format!("t_final = {} leaves fewer than four cells below the edge x1 - 2 t_final", s.t_final),
            ));
        }
        if !o.allow_any_alpha && !(o.alpha > -1.0 && o.alpha <= -0.5) {
            return Err(config_error(
                "outputs.alpha",
                format!(
                    "alpha = {} lies outside the admissible range (-1, -1/2]; set outputs.allow_any_alpha = true to override",
                    o.alpha
                ),
            ));
        }
        if o.k > 2 {
            return Err(config_error("outputs.k", format!("k = {} exceeds 2", o.k)));
        }
        if let Some(x2) = o.energy_cutoff {
            if !(x2 > 0.0 && x2 < s.x1) {
                return Err(config_error("outputs.energy_cutoff", format!("cutoff {x2} must lie in (0, x1)")));
            }
        }
        let mut prev = s.t_start;
        for &t in &o.times {
            if !(t >= prev && t <= s.t_final) {
                return Err(config_error(
                    "outputs.times",
                    format!("output times must be ascending within [t_start, t_final], got {t}"),
                ));
            }
            prev = t;
        }
        if let Some(c) = &o.corner {
            if !(1..=2).contains(&c.i_max) {
                return Err(config_error("outputs.corner.i_max", format!("i_max = {} must be 1 or 2", c.i_max)));
            }
            if let Some([a, b]) = c.window {
                if !(a > 0.0 && b > a) {
                    return Err(config_error("outputs.corner.window", format!("window [{a}, {b}] must be ascending and positive")));
                }
            }
        }
        if let Some(f) = &o.phg_fit {
            if delta_denominator(f.delta).is_none() {
                return Err(config_error("outputs.phg_fit.delta", format!("delta = {} must be 1/d for an integer d", f.delta)));
            }
            if !(f.x_min > 0.0 && f.x_max > f.x_min) {
                return Err(config_error(
                    "outputs.phg_fit.x_min",
                    format!("fit range [{}, {}] must be positive and ascending", f.x_min, f.x_max),
                ));
            }
            if f.x_max >= s.x1 - 2.0 * f.at {
                return Err(config_error("outputs.phg_fit.x_max", format!("x_max = {} reaches past the edge at tau = {}", f.x_max, f.at)));
            }
            if f.at != s.t_start && !o.times.iter().any(|&t| t == f.at) {
                return Err(config_error("outputs.phg_fit.at", format!("tau = {} is not among outputs.times", f.at)));
            }
        }
        Ok(())
    }

    fn components(&self) -> Result<usize, CliError> {
        let s = &self.scenario;
        let natural = match (s.equation, s.target) {
            (EquationName::Wavemap, Some(TargetName::Sphere | TargetName::Hyperbolic)) => Some(2),
            _ => None,
        };
        match (s.components, natural) {
            (Some(c), Some(n)) if c != n => {
                Err(config_error("scenario.components", format!("the target has dimension {n}, got {c} components")))
            }
            (Some(0), _) => Err(config_error("scenario.components", "at least one component is required")),
            (Some(c), _) => Ok(c),
            (None, Some(n)) => Ok(n),
            (None, None) => Ok(1),
        }
    }

    fn equation(&self, components: usize) -> Result<Equation, CliError> {
        let s = &self.scenario;
        Ok(match s.equation {
            EquationName::Linear => Equation::Linear,
            EquationName::Semilinear => {
                let lambda = s.lambda.ok_or_else(|| config_error("scenario.lambda", "required for a semilinear equation"))?;
                let ell = s.ell.ok_or_else(|| config_error("scenario.ell", "required for a semilinear equation"))?;
                if ell == 0 {
                    return Err(config_error("scenario.ell", "ell must be positive"));
                }
                if !s.allow_subcritical && power_threshold(s.n).map_or(true, |t| ell < t) {
                    return Err(config_error(
                        "scenario.ell",
                        format!("ell = {ell} is below the admissible power for n = {}; set scenario.allow_subcritical = true", s.n),
                    ));
                }
                Equation::Semilinear { lambda, ell }
            }
            EquationName::Wavemap => match s.target {
                None => return Err(config_error("scenario.target", "required for a wave map")),
                Some(TargetName::Flat) => Equation::WaveMap(TargetManifold::flat(components)),
                Some(TargetName::Sphere) => Equation::WaveMap(TargetManifold::sphere()),
                Some(TargetName::Hyperbolic) => Equation::WaveMap(TargetManifold::hyperbolic()),
            },
        })
    }

    fn initial(&self, components: usize) -> Result<InitialData, CliError> {
        let weights = |w: &Option<Vec<f64>>| -> Result<Vec<f64>, CliError> {
            match w {
                Some(w) if w.len() != components => Err(config_error(
                    "initial.weights",
                    format!("{} weights for {components} components", w.len()),
                )),
                Some(w) => Ok(w.clone()),
                None => Ok((0..components).map(|c| if c == 0 { 1.0 } else { 0.0 }).collect()),
            }
        };
        let spread = |w: Vec<f64>, g: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>| -> DataFn {
            Arc::new(move |x, v| {
                let s = g(x, v);
                w.iter().map(|a| a * s).collect()
            })
        };
        Ok(match self.initial.clone() {
            InitialConfig::Zero => InitialData::zero(components),
            InitialConfig::Toy1d { c, alpha } => {
                if components != 1 {
                    return Err(config_error("initial.family", "toy1d data has a single component"));
                }
                InitialData::toy1d(c, alpha, self.scenario.t_start)
            }
            InitialConfig::Rational { amplitude, power, pole, dtau_amplitude, weights: w } => {
                let w = weights(&w)?;
                let shape = move |x: f64| x.powf(power) * (1.0 + x).powf(-pole);
                let dshape =
                    move |x: f64| (1.0 + x).powf(-pole - 1.0) * x.powf(power - 1.0) * (power * (1.0 + x) - pole * x);
                InitialData::ClosedForm {
                    f: spread(w.clone(), Arc::new(move |x, _| amplitude * shape(x))),
                    dtau_f: spread(w.clone(), Arc::new(move |x, _| dtau_amplitude * shape(x))),
                    dx_f: Some(spread(w.clone(), Arc::new(move |x, _| amplitude * dshape(x)))),
                    dv_f: Some(spread(w, Arc::new(|_, _| 0.0))),
                }
            }
            InitialConfig::Bump { amplitude, p, q, mode, weights: w } => {
                let w = weights(&w)?;
                if mode > 0 && self.scenario.v_nodes.is_none() {
                    return Err(config_error("initial.mode", "an angular mode needs scenario.v_nodes"));
                }
                let m = mode as f64;
                let radial = move |x: f64| if x < 1.0 { x.powf(p) * (1.0 - x).powf(q) } else { 0.0 };
                let dradial = move |x: f64| {
                    if x < 1.0 {
                        x.powf(p - 1.0) * (1.0 - x).powf(q - 1.0) * (p * (1.0 - x) - q * x)
                    } else {
                        0.0
                    }
                };
                InitialData::ClosedForm {
                    f: spread(w.clone(), Arc::new(move |x, v| amplitude * radial(x) * (m * v).cos())),
                    dtau_f: spread(w.clone(), Arc::new(|_, _| 0.0)),
                    dx_f: Some(spread(w.clone(), Arc::new(move |x, v| amplitude * dradial(x) * (m * v).cos()))),
                    dv_f: Some(spread(w, Arc::new(move |x, v| -amplitude * m * radial(x) * (m * v).sin()))),
                }
            }
        })
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let s = &self.scenario;
        let components = self.components()?;
        let mut sc = Scenario::new(self.equation(components)?, s.n, components, self.initial(components)?, s.h, s.t_final);
        sc.x1 = s.x1;
        sc.v_nodes = s.v_nodes;
        sc.t_start = s.t_start;
        sc.cfl = s.cfl;
        sc.output_times = self.outputs.times.clone();
        sc.blowup_ceiling = s.blowup_ceiling;
        sc.allow_subcritical = s.allow_subcritical;
        sc.validate().map_err(|e| match e {
            EvolutionError::Angular(_) => config_error("scenario.v_nodes", e.to_string()),
            EvolutionError::Dimension { .. } => config_error("scenario.components", e.to_string()),
            other => config_error("scenario", other.to_string()),
        })?;
        Ok(sc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
version = 1

[scenario]
equation = "linear"
n = 3
h = 0.015625
t_final = 0.25

[initial]
family = "bump"
amplitude = 0.01
p = 2.0
q = 3.0
"#;

    fn key_of(src: &str) -> String {
        match RunConfig::parse(src) {
            Err(CliError::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_builds_a_scenario() {
        let cfg = RunConfig::parse(BASE).unwrap();
        let sc = cfg.scenario().unwrap();
        assert_eq!(sc.n, 3);
        assert_eq!(sc.components, 1);
        assert_eq!(cfg.outputs.alpha, -0.5);
        assert!(cfg.outputs.snapshots);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(&BASE.replace("h = 0.015625", "h = 0.015625\nhh = 1.0")), "scenario.hh");
        assert_eq!(key_of(&format!("{BASE}\n[outputs]\nalpah = -0.5\n")), "outputs.alpah");
        assert_eq!(key_of(&BASE.replace("t_final = 0.25\n", "")), "scenario.t_final");
        assert_eq!(key_of(&BASE.replace("q = 3.0", "q = 3.0\nbogus = 1")), "initial.bogus");
    }

    #[test]
    fn version_and_alpha_gate() {
        assert_eq!(key_of(&BASE.replace("version = 1", "version = 2")), "version");
        let zero = format!("{BASE}\n[outputs]\nalpha = 0.0\n");
        match RunConfig::parse(&zero) {
            Err(CliError::Config { key, message }) => {
                assert_eq!(key, "outputs.alpha");
                assert!(message.contains("(-1, -1/2]"));
            }
            other => panic!("{other:?}"),
        }
        let overridden = format!("{BASE}\n[outputs]\nalpha = 0.0\nallow_any_alpha = true\n");
        assert!(RunConfig::parse(&overridden).is_ok());
    }

    #[test]
    fn semilinear_needs_its_coefficients() {
        let src = BASE.replace("\"linear\"", "\"semilinear\"");
        let cfg = RunConfig::parse(&src).unwrap();
        assert!(matches!(cfg.scenario(), Err(CliError::Config { key, .. }) if key == "scenario.lambda"));
        let sub = src.replace("n = 3", "n = 3\nlambda = 1.0\nell = 2");
        let cfg = RunConfig::parse(&sub).unwrap();
        assert!(matches!(cfg.scenario(), Err(CliError::Config { key, .. }) if key == "scenario.ell"));
    }

    #[test]
    fn wave_map_components_follow_the_target() {
        let src = BASE.replace("\"linear\"", "\"wavemap\"\ntarget = \"sphere\"");
        let sc = RunConfig::parse(&src).unwrap().scenario().unwrap();
        assert_eq!(sc.components, 2);
        let bad = src.replace("n = 3", "n = 3\ncomponents = 3");
        assert!(matches!(RunConfig::parse(&bad).unwrap().scenario(), Err(CliError::Config { key, .. }) if key == "scenario.components"));
    }

    #[test]
    fn output_times_and_fit_are_checked() {
        let unsorted = format!("{BASE}\n[outputs]\ntimes = [0.2, 0.1]\n");
        assert_eq!(key_of(&unsorted), "outputs.times");
        let late = format!("{BASE}\n[outputs]\ntimes = [0.3]\n");
        assert_eq!(key_of(&late), "outputs.times");
        let fit = format!(
            "{BASE}\n[outputs]\ntimes = [0.25]\n[outputs.phg_fit]\nat = 0.25\ndelta = 0.3\ndepth = 2\nx_min = 0.001\nx_max = 0.4\n"
        );
        assert_eq!(key_of(&fit), "outputs.phg_fit.delta");
        assert_eq!(key_of(&fit.replace("at = 0.25", "at = 0.2").replace("0.3", "0.5")), "outputs.phg_fit.at");
    }

    #[test]
    fn cfl_and_horizon_are_bounded() {
        assert_eq!(key_of(&BASE.replace("t_final = 0.25", "t_final = 0.25\ncfl = 0.9")), "scenario.cfl");
        assert_eq!(key_of(&BASE.replace("t_final = 0.25", "t_final = 0.49")), "scenario.t_final");
    }

    #[test]
    fn denominators() {
        assert_eq!(delta_denominator(0.5), Some(2));
        assert_eq!(delta_denominator(1.0), Some(1));
        assert_eq!(delta_denominator(1.0 / 3.0), Some(3));
        assert_eq!(delta_denominator(0.3), None);
        assert_eq!(delta_denominator(0.0), None);
    }

    #[test]
    fn rational_derivative_matches_difference() {
        let src = BASE.replace(
            "family = \"bump\"\namplitude = 0.01\np = 2.0\nq = 3.0",
            "family = \"rational\"\namplitude = 0.5\npower = 1.5\npole = 2.0",
        );
        let cfg = RunConfig::parse(&src).unwrap();
        let InitialData::ClosedForm { f, dx_f: Some(d), .. } = cfg.initial(1).unwrap() else { panic!() };
        let (x, e) = (0.3, 1e-6);
        let fd = (f(x + e, 0.0)[0] - f(x - e, 0.0)[0]) / (2.0 * e);
        assert!((d(x, 0.0)[0] - fd).abs() < 1e-8);
    }
}
