pub mod calibrate;
pub mod fisher;
pub mod simulate;
pub mod sweep;
pub mod uq;

use std::path::{Path, PathBuf};

use anyhow::Result;
use stip_core::calibrate::EnkHistory;

use crate::output::{fmt_f64, write_atomic, Csv};
use crate::pipeline::Experiment;

pub fn out_dir(exp: &Experiment) -> PathBuf {
    PathBuf::from(&exp.config.output_dir)
}

/// Persist one calibration run: whitened/physical particles, forward values,
/// REM trace, and a JSON sidecar.
pub fn write_history(
    exp: &Experiment,
    history: &EnkHistory,
    dir: &Path,
    repeat: usize,
    seed: u64,
) -> Result<()> {
    let p = exp.prior.dim();
    let mut header: Vec<String> = vec!["iter".into(), "particle".into()];
    for d in 1..=p {
        header.push(format!("v{d}"));
    }
    for d in 1..=p {
        header.push(format!("u{d}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for ens in &history.ensembles {
        for row in 0..ens.size() {
            let v = ens.particles.row(row).transpose();
            let u = exp.prior.unwhiten(&v);
            let mut cells = vec![ens.iteration.to_string(), row.to_string()];
            cells.extend(v.iter().map(|x| fmt_f64(*x)));
            cells.extend(u.iter().map(|x| fmt_f64(*x)));
            csv.row(&cells);
        }
    }
    write_atomic(&dir.join(format!("history_r{repeat}.csv")), &csv.finish())?;

    let q = history.ensembles[0].forward_values.ncols();
    let mut header: Vec<String> = vec!["iter".into(), "particle".into()];
    for d in 1..=q {
        header.push(format!("f{d}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for ens in &history.ensembles {
        for row in 0..ens.size() {
            let mut cells = vec![ens.iteration.to_string(), row.to_string()];
            cells.extend(ens.forward_values.row(row).iter().map(|x| fmt_f64(*x)));
            csv.row(&cells);
        }
    }
    write_atomic(&dir.join(format!("forwards_r{repeat}.csv")), &csv.finish())?;

    if let Some(rems) = &history.rem {
        let mut csv = Csv::new(&["iter", "rem"]);
        for (i, r) in rems.iter().enumerate() {
            csv.row(&[i.to_string(), fmt_f64(*r)]);
        }
        write_atomic(&dir.join(format!("rem_r{repeat}.csv")), &csv.finish())?;
    }

    let best = history.best_rem();
    let sidecar = serde_json::json!({
        "seed": seed,
        "repeat": repeat,
        "divergences": history.divergences,
        "aborted": history.aborted,
        "best_iter": best.map(|b| b.0),
        "best_rem": best.map(|b| b.1),
        "config": exp.config,
    });
    write_atomic(
        &dir.join(format!("calibrate_r{repeat}.json")),
        &serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}
