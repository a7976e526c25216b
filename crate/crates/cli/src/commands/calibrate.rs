//! `calibrate`: run the configured ensemble method for `--repeats` seeds and
//! persist per-repeat histories plus a REM summary table.

use anyhow::{anyhow, Result};
use rayon::prelude::*;

use crate::output::{fmt_f64, write_atomic, Csv};
use crate::pipeline::{repeat_seed, Experiment};

use super::{out_dir, write_history};

pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub best_iter: usize,
    pub best_rem: f64,
    pub final_rem: f64,
}

pub fn run(exp: &Experiment, repeats: usize) -> Result<Vec<RepeatOutcome>> {
    let dir = out_dir(exp);
    let mut outcomes: Vec<RepeatOutcome> = (0..repeats)
        .into_par_iter()
        .map(|r| -> Result<RepeatOutcome> {
            let seed = repeat_seed(exp.config.seed, r);
            let history = exp.run_calibration(seed)?;
            if let Some(reason) = &history.aborted {
                log::warn!("repeat {r} aborted early: {reason}");
            }
            write_history(exp, &history, &dir, r, seed)?;
            let rems = history
                .rem
                .as_ref()
                .ok_or_else(|| anyhow!("missing REM trace"))?;
            let (best_iter, best_rem) = history
                .best_rem()
                .ok_or_else(|| anyhow!("empty REM trace"))?;
            Ok(RepeatOutcome {
                repeat: r,
                seed,
                best_iter,
                best_rem,
                final_rem: *rems.last().expect("nonempty"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.repeat);

    let mut csv = Csv::new(&["repeat", "seed", "best_iter", "best_rem", "final_rem"]);
    for o in &outcomes {
        csv.row(&[
            o.repeat.to_string(),
            o.seed.to_string(),
            o.best_iter.to_string(),
            fmt_f64(o.best_rem),
            fmt_f64(o.final_rem),
        ]);
    }
    write_atomic(&dir.join("rem_summary.csv"), &csv.finish())?;

    let mut best: Vec<f64> = outcomes.iter().map(|o| o.best_rem).collect();
    best.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let aggregate = serde_json::json!({
        "repeats": repeats,
        "mean_best_rem": best.iter().sum::<f64>() / best.len() as f64,
        "median_best_rem": best[best.len() / 2],
        "config": exp.config,
    });
    write_atomic(
        &dir.join("calibrate_summary.json"),
        &serde_json::to_string_pretty(&aggregate)?,
    )?;
    log::info!(
        "calibrate: {} repeats, median best REM {:.3e}",
        repeats,
        best[best.len() / 2]
    );
    Ok(outcomes)
}
