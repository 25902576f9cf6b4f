//! On-disk artifact schemas shared by `run`, `report` and `fit`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hyperboloidal_core::diagnostics::{CornerReport, EnergyRecord, FitWeight, PhgFit};
use hyperboloidal_core::evolution::FieldState;
use serde::{Deserialize, Serialize};

use crate::output::{csv_f64, to_json};
use crate::CliError;

pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "run_log.csv";
pub const GRONWALL_FILE: &str = "gronwall.json";
pub const CORNER_FILE: &str = "corner.json";
pub const FIT_FILE: &str = "phg_fit.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const LOG_HEADER: &str = "tau,sup_f,E_alpha,constraint_residual,active_cells";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    BlowUp,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub status: RunStatus,
    pub tau_reached: f64,
    pub t_final: f64,
    /// `sup|f̃|` when the ceiling was crossed.
    pub blowup_sup: Option<f64>,
    pub message: Option<String>,
    pub seed: u64,
    pub snapshots: usize,
    /// Files written, relative to the run directory.
    pub artifacts: Vec<String>,
}

/// One snapshot: time, active cell centres, full state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub tau: f64,
    pub x: Vec<f64>,
    pub state: FieldState,
}

impl SnapshotFile {
    pub fn of(state: &FieldState) -> Self {
        Self { tau: state.tau, x: (0..state.grid.active_count()).map(|m| state.grid.x(m)).collect(), state: state.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallFile {
    pub alpha: f64,
    pub k: usize,
    /// Inner cutoff; `null` means `4h`.
    pub cutoff: Option<f64>,
    pub records: Vec<EnergyRecord>,
    pub constant: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerFile {
    pub i_max: usize,
    pub weight: f64,
    pub window: Option<[f64; 2]>,
    pub reports: Vec<CornerReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub tau: f64,
    pub field: String,
    pub component: usize,
    pub v_node: usize,
    pub delta: f64,
    pub beta: f64,
    pub depth: usize,
    pub jmax: usize,
    pub weight: FitWeight,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    #[serde(flatten)]
    pub request: FitRequest,
    pub points: usize,
    /// Keyed `"i_j"` for the term `x^{β+iδ}(ln x)^j`.
    pub coefficients: BTreeMap<String, f64>,
    pub exponents: BTreeMap<String, f64>,
    pub condition_number: Option<f64>,
    pub residual_rms: Option<f64>,
    pub log_power: Option<usize>,
    pub remainder_slope: Option<f64>,
    pub error: Option<String>,
}

impl FitFile {
    pub fn new(request: FitRequest, points: usize, fit: Result<PhgFit, String>) -> Self {
        let mut out = Self {
            request,
            points,
            coefficients: BTreeMap::new(),
            exponents: BTreeMap::new(),
            condition_number: None,
            residual_rms: None,
            log_power: None,
            remainder_slope: None,
            error: None,
        };
        match fit {
            Ok(f) => {
                for (&(i, j), v) in f.expansion.coeffs() {
                    let key = format!("{i}_{j}");
                    out.coefficients.insert(key.clone(), v[0]);
                    out.exponents.insert(key, f.expansion.exponent(i));
                }
                out.condition_number = Some(f.condition_number);
                out.residual_rms = Some(f.residual_rms);
                out.log_power = Some(f.log_power);
                out.remainder_slope = f.remainder_slope;
            }
            Err(e) => out.error = Some(e),
        }
        out
    }

    /// Coefficients ordered by `(i, j)`.
    pub fn ordered(&self) -> Vec<((usize, usize), f64)> {
        let mut v: Vec<((usize, usize), f64)> = self
            .coefficients
            .iter()
            .filter_map(|(k, &c)| {
                let (i, j) = k.split_once('_')?;
                Some(((i.parse().ok()?, j.parse().ok()?), c))
            })
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub tau: f64,
    pub sup_f: f64,
    pub e_alpha: f64,
    pub constraint_residual: f64,
    pub active_cells: usize,
}

pub fn log_csv(rows: &[LogRow]) -> Vec<u8> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_f64(r.tau),
            csv_f64(r.sup_f),
            csv_f64(r.e_alpha),
            csv_f64(r.constraint_residual),
            r.active_cells
        ));
    }
    s.into_bytes()
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            let bad = || format!("line {}: malformed row", n + 2);
            if cols.len() != 5 {
                return Err(bad());
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                tau: f(0)?,
                sup_f: f(1)?,
                e_alpha: f(2)?,
                constraint_residual: f(3)?,
                active_cells: cols[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, &to_json(value))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trips() {
        let rows = vec![
            LogRow { tau: 0.0, sup_f: 1.5, e_alpha: 0.1, constraint_residual: 1e-9, active_cells: 64 },
            LogRow { tau: 0.125, sup_f: f64::INFINITY, e_alpha: f64::NAN, constraint_residual: 0.0, active_cells: 48 },
        ];
        let text = String::from_utf8(log_csv(&rows)).unwrap();
        assert!(text.starts_with("tau,sup_f,E_alpha,constraint_residual,active_cells\n"));
        let back = parse_log(&text).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].e_alpha.is_nan() && back[1].sup_f.is_infinite());
        assert!(parse_log("tau\n").is_err());
    }

    #[test]
    fn coefficient_keys_order_numerically() {
        let mut f = FitFile::new(
            FitRequest {
                tau: 0.0,
                field: "f".into(),
                component: 0,
                v_node: 0,
                delta: 1.0,
                beta: 0.0,
                depth: 10,
                jmax: 0,
                weight: FitWeight::Uniform,
                x_min: 1e-3,
                x_max: 1.0,
            },
            0,
            Err("none".into()),
        );
        for (k, v) in [("10_0", 3.0), ("2_0", 2.0), ("2_1", 2.5), ("0_0", 1.0)] {
            f.coefficients.insert(k.into(), v);
        }
        let keys: Vec<(usize, usize)> = f.ordered().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec![(0, 0), (2, 0), (2, 1), (10, 0)]);
    }
}
