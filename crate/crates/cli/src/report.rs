//! `report`: read-only summary of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hyperboloidal_core::diagnostics::Verdict;

use crate::artifacts::{
    parse_log, read_json, CornerFile, FitFile, GronwallFile, RunStatus, RunSummary, CORNER_FILE, FIT_FILE,
    GRONWALL_FILE, LOG_FILE, RUN_FILE,
};
use crate::output::short;

/// Summary text and the number of artifacts that could not be read.
pub fn report(dir: &Path) -> (String, usize) {
    let mut out = String::new();
    let mut problems = 0;
    let mut fail = |out: &mut String, file: &str, why: String| {
        let _ = writeln!(out, "  {file}: {why}");
        problems += 1;
    };
    let _ = writeln!(out, "run directory {}", dir.display());

    let summary: Option<RunSummary> = match read_json(&dir.join(RUN_FILE)) {
        Ok(s) => Some(s),
        Err(e) => {
            fail(&mut out, RUN_FILE, format!("unreadable ({e})"));
            None
        }
    };
    let listed = |name: &str| summary.as_ref().map_or(true, |s| s.artifacts.iter().any(|a| a == name));
    if let Some(s) = &summary {
        let status = match s.status {
            RunStatus::Completed => "completed",
            RunStatus::BlowUp => "blow-up",
            RunStatus::Aborted => "aborted",
        };
        let _ = writeln!(out, "status: {status} at tau = {} (t_final {})", short(s.tau_reached), short(s.t_final));
        if let Some(m) = &s.message {
            let _ = writeln!(out, "  {m}");
        }
        let _ = writeln!(out, "snapshots: {}", s.snapshots);
    }

    if listed(LOG_FILE) {
        match fs::read_to_string(dir.join(LOG_FILE)).map_err(|e| e.to_string()).and_then(|t| parse_log(&t)) {
            Ok(rows) => {
                let finite: Vec<f64> = rows.iter().map(|r| r.e_alpha).filter(|e| e.is_finite()).collect();
                match (finite.iter().copied().reduce(f64::min), finite.iter().copied().reduce(f64::max)) {
                    (Some(lo), Some(hi)) if rows.len() > 1 => {
                        let _ = writeln!(out, "energy E_alpha: min {} max {} over {} records", short(lo), short(hi), rows.len());
                    }
                    (Some(lo), _) => {
                        let _ = writeln!(out, "energy E_alpha: initial {} (single record)", short(lo));
                    }
                    _ => {
                        let _ = writeln!(out, "energy E_alpha: no finite values");
                    }
                }
                if let Some(r) = rows.iter().map(|r| r.constraint_residual).reduce(f64::max) {
                    let _ = writeln!(out, "constraint residual: max {}", short(r));
                }
            }
            Err(e) => fail(&mut out, LOG_FILE, format!("unreadable ({e})")),
        }
    }

    if listed(GRONWALL_FILE) {
        match read_json::<GronwallFile>(&dir.join(GRONWALL_FILE)) {
            Ok(g) => match (g.constant, g.error) {
                (Some(c), _) => {
                    let _ = writeln!(out, "Gronwall constant C: {c:.4} (alpha {}, k {})", g.alpha, g.k);
                }
                (None, e) => {
                    let _ = writeln!(out, "Gronwall constant C: not fitted ({})", e.unwrap_or_default());
                }
            },
            Err(e) => fail(&mut out, GRONWALL_FILE, format!("unreadable ({e})")),
        }
    }

    if listed(CORNER_FILE) {
        match read_json::<CornerFile>(&dir.join(CORNER_FILE)) {
            Ok(c) => {
                if let Some(e) = c.error {
                    let _ = writeln!(out, "corner analysis: failed ({e})");
                }
                for r in c.reports {
                    let verdict = match r.verdict {
                        Verdict::Compatible => "compatible",
                        Verdict::Incompatible => "incompatible",
                    };
                    let _ = writeln!(out, "corner order {}: d_tau slope {:.4}, verdict {verdict}", r.order, r.slope);
                }
            }
            Err(e) if summary.is_some() => fail(&mut out, CORNER_FILE, format!("unreadable ({e})")),
            Err(_) => {}
        }
    }

    if listed(FIT_FILE) {
        match read_json::<FitFile>(&dir.join(FIT_FILE)) {
            Ok(f) => {
                let _ = writeln!(
                    out,
                    "phg fit of {} at tau = {}: delta {}, depth {}, {} points",
                    f.request.field,
                    short(f.request.tau),
                    f.request.delta,
                    f.request.depth,
                    f.points
                );
                if let Some(e) = &f.error {
                    let _ = writeln!(out, "  failed ({e})");
                }
                for ((i, j), c) in f.ordered().into_iter().take(4) {
                    let p = f.exponents.get(&format!("{i}_{j}")).copied().unwrap_or(f64::NAN);
                    let _ = writeln!(out, "  x^{} (ln x)^{j}: {}", short(p), short(c));
                }
                match f.remainder_slope {
                    Some(s) => {
                        let _ = writeln!(out, "  remainder slope {s:.4}");
                    }
                    None if f.error.is_none() => {
                        let _ = writeln!(out, "  remainder exact");
                    }
                    None => {}
                }
            }
            Err(e) if summary.is_some() => fail(&mut out, FIT_FILE, format!("unreadable ({e})")),
            Err(_) => {}
        }
    }
    (out, problems)
}
