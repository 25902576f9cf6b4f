//! `run`: evolve a configured scenario and write its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use hyperboloidal_core::diagnostics::{
    corner_exponents, default_cutoff, dyadic_fit_points, energy_record, gronwall_fit, phg_fit, snapshot_samples,
    EnergyRecord, FitSpec,
};
use hyperboloidal_core::evolution::{evolve, EvolutionError, FieldKind, FieldState, RunOutcome};

use crate::artifacts::{
    log_csv, write, write_json, CornerFile, FitFile, FitRequest, GronwallFile, LogRow, RunStatus, RunSummary,
    CORNER_FILE, FIT_FILE, GRONWALL_FILE, LOG_FILE, RUN_FILE, SNAPSHOT_DIR,
};
use crate::config::{delta_denominator, RunConfig, CONFIG_VERSION};
use crate::CliError;

/// Environment variable naming the parent of run directories.
pub const OUT_DIR_ENV: &str = "HYPERBOLOIDAL_OUT_DIR";

/// Outcome of a run, mapped to the exit status by the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum RunResult {
    Completed(PathBuf),
    BlowUp(PathBuf),
}

/// Explicit override, then `out_dir` from the config, then
/// `$HYPERBOLOIDAL_OUT_DIR/<config stem>`, then `runs/<config stem>`.
pub fn resolve_out_dir(cfg: &RunConfig, config_path: &Path, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    let stem = config_path.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
    let parent = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    parent.join(stem)
}

pub fn run_file(config_path: &Path, explicit_out: Option<&Path>) -> Result<RunResult, CliError> {
    let src = fs::read_to_string(config_path).map_err(|source| CliError::Io { path: config_path.to_path_buf(), source })?;
    let cfg = RunConfig::parse(&src)?;
    let out = resolve_out_dir(&cfg, config_path, explicit_out);
    run(&cfg, &out)
}

fn nan_record(state: &FieldState) -> EnergyRecord {
    EnergyRecord { tau: state.tau, e_alpha: f64::NAN, source_norm: f64::NAN, sup_f: state.sup_f() }
}

/// Fit one field of a snapshot on dyadic points of `[x_min, x_max]`.
pub fn fit_state(state: &FieldState, kind: FieldKind, request: FitRequest) -> FitFile {
    let xs = dyadic_fit_points(request.x_max, request.x_min);
    let points = xs.len();
    let result = (|| {
        let d = delta_denominator(request.delta).ok_or_else(|| format!("delta = {} is not 1/d", request.delta))?;
        if request.component >= state.components {
            return Err(format!("component {} out of range", request.component));
        }
        if request.v_node >= state.grid.v_count() {
            return Err(format!("v-node {} out of range", request.v_node));
        }
        let ys = snapshot_samples(state, kind, request.v_node, request.component, &xs).map_err(|e| e.to_string())?;
        let spec = FitSpec { d, beta: request.beta, depth: request.depth, jmax: request.jmax, weight: request.weight };
        phg_fit(&xs, &ys, &spec).map_err(|e| e.to_string())
    })();
    FitFile::new(request, points, result)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunResult, CliError> {
    let sc = cfg.scenario()?;
    fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.to_path_buf(), source })?;
    let mut artifacts = Vec::new();
    let traj = match evolve(&sc) {
        Ok(t) => t,
        Err(EvolutionError::BadScenario(m)) => return Err(CliError::Config { key: "scenario".into(), message: m }),
        Err(e) => {
            let summary = RunSummary {
                version: CONFIG_VERSION,
                status: RunStatus::Aborted,
                tau_reached: f64::NAN,
                t_final: sc.t_final,
                blowup_sup: None,
                message: Some(e.to_string()),
                seed: cfg.seed,
                snapshots: 0,
                artifacts: vec![],
            };
            write_json(&out.join(RUN_FILE), &summary)?;
            return Ok(RunResult::BlowUp(out.to_path_buf()));
        }
    };
    let o = &cfg.outputs;

    let records: Vec<EnergyRecord> = traj
        .snapshots
        .iter()
        .map(|s| {
            let x2 = o.energy_cutoff.unwrap_or_else(|| default_cutoff(s));
            energy_record(s, &sc, o.alpha, o.k, x2).unwrap_or_else(|_| nan_record(s))
        })
        .collect();
    let rows: Vec<LogRow> = traj
        .log
        .iter()
        .zip(&records)
        .map(|(l, r)| LogRow {
            tau: l.tau,
            sup_f: l.sup_f,
            e_alpha: r.e_alpha,
            constraint_residual: l.constraint_residual,
            active_cells: l.active_cells,
        })
        .collect();
    write(&out.join(LOG_FILE), &log_csv(&rows))?;
    artifacts.push(LOG_FILE.to_string());

    if o.snapshots {
        let dir = out.join(SNAPSHOT_DIR);
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        for (i, s) in traj.snapshots.iter().enumerate() {
            let name = format!("{SNAPSHOT_DIR}/snapshot_{i:04}.json");
            write_json(&out.join(&name), &crate::artifacts::SnapshotFile::of(s))?;
            artifacts.push(name);
        }
    }

    let finite: Vec<EnergyRecord> = records.iter().copied().take_while(|r| r.e_alpha.is_finite()).collect();
    let (constant, error) = match gronwall_fit(&finite) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    write_json(
        &out.join(GRONWALL_FILE),
        &GronwallFile { alpha: o.alpha, k: o.k, cutoff: o.energy_cutoff, records: records.clone(), constant, error },
    )?;
    artifacts.push(GRONWALL_FILE.to_string());

    if let Some(c) = &o.corner {
        let later: Vec<FieldState> = traj.snapshots.iter().filter(|s| s.tau > sc.t_start).cloned().collect();
        let window = c.window.map(|[a, b]| (a, b));
        let (reports, error) = match corner_exponents(&later, c.i_max, c.weight, window) {
            Ok(r) => (r, None),
            Err(e) => (vec![], Some(e.to_string())),
        };
        write_json(&out.join(CORNER_FILE), &CornerFile { i_max: c.i_max, weight: c.weight, window: c.window, reports, error })?;
        artifacts.push(CORNER_FILE.to_string());
    }

    if let Some(f) = &o.phg_fit {
        let request = FitRequest {
            tau: f.at,
            field: f.field.label().to_string(),
            component: f.component,
            v_node: f.v_node,
            delta: f.delta,
            beta: f.beta,
            depth: f.depth,
            jmax: f.jmax,
            weight: f.weight,
            x_min: f.x_min,
            x_max: f.x_max,
        };
        let file = match traj.snapshots.iter().find(|s| s.tau == f.at) {
            Some(s) => fit_state(s, f.field.kind(), request),
            None => FitFile::new(request, 0, Err(format!("the run ended before tau = {}", f.at))),
        };
        write_json(&out.join(FIT_FILE), &file)?;
        artifacts.push(FIT_FILE.to_string());
    }

    let last = traj.snapshots.last().expect("initial snapshot");
    let (status, blowup_sup) = match traj.outcome {
        RunOutcome::Completed => (RunStatus::Completed, None),
        RunOutcome::BlowUp { sup_f, .. } => (RunStatus::BlowUp, Some(sup_f)),
    };
    let summary = RunSummary {
        version: CONFIG_VERSION,
        status: status.clone(),
        tau_reached: last.tau,
        t_final: sc.t_final,
        blowup_sup,
        message: blowup_sup.map(|s| format!("sup |f| = {s:e} crossed the blow-up ceiling at tau = {}", last.tau)),
        seed: cfg.seed,
        snapshots: traj.snapshots.len(),
        artifacts,
    };
    write_json(&out.join(RUN_FILE), &summary)?;
    Ok(match status {
        RunStatus::Completed => RunResult::Completed(out.to_path_buf()),
        _ => RunResult::BlowUp(out.to_path_buf()),
    })
}

