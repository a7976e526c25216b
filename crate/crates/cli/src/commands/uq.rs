//! `uq`: the emulation and sampling stages on top of a calibration history,
//! plus posterior summaries and prediction tables.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};

use stip_core::analyze::{predict_forward, predict_posterior_stgp, rem};
use stip_core::calibrate::{EnkHistory, Ensemble};
use stip_core::dynamics::integrate_window;

use crate::output::{fmt_f64, read_numeric_csv, write_atomic, Csv};
use crate::pipeline::Experiment;

use super::{out_dir, write_history};

pub struct UqOutcome {
    pub acceptance_rate: f64,
    pub medians: Vec<f64>,
    pub rem_of_median: f64,
}

pub fn run(exp: &Experiment) -> Result<UqOutcome> {
    let dir = out_dir(exp);
    let history = load_or_calibrate(exp, &dir)?;
    let (best_iter, best_rem, init) = exp.best_iteration_mean(&history)?;
    log::info!("uq: initializing chain at iteration {best_iter} (REM {best_rem:.3e})");

    let emulator = exp.fit_emulator(&history, &exp.config.emulation)?;
    emulator
        .save(&dir.join("emulator"))
        .map_err(|e| anyhow!(e))?;

    let chain = exp.run_sampling(&emulator, &exp.config.sampling, init, exp.config.seed)?;

    // Chain table: whitened and physical coordinates per retained sample.
    let p = exp.prior.dim();
    let mut header: Vec<String> = vec!["idx".into()];
    for d in 1..=p {
        header.push(format!("v{d}"));
    }
    for d in 1..=p {
        header.push(format!("u{d}"));
    }
    header.push("phi".into());
    header.push("accepted".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    for (i, v) in chain.samples.iter().enumerate() {
        let u = exp.prior.unwhiten(v);
        let mut cells = vec![i.to_string()];
        cells.extend(v.iter().map(|x| fmt_f64(*x)));
        cells.extend(u.iter().map(|x| fmt_f64(*x)));
        cells.push(fmt_f64(chain.potentials[i]));
        cells.push((chain.accepted[i] as u8).to_string());
        csv.row(&cells);
    }
    write_atomic(&dir.join("chain.csv"), &csv.finish())?;

    let sidecar = serde_json::json!({
        "seed": chain.seed,
        "sampler": exp.config.sampling,
        "acceptance_rate": chain.acceptance_rate,
        "initial_step": chain.initial_step,
        "final_step": chain.final_step,
        "init_iteration": best_iter,
        "init_rem": best_rem,
        "emulator": {
            "n_train": emulator.n_train(),
            "lengthscales": emulator.lengthscales(),
            "signal_var": emulator.signal_var(),
            "nugget": emulator.nugget(),
        },
        "config": exp.config,
    });
    write_atomic(&dir.join("uq.json"), &serde_json::to_string_pretty(&sidecar)?)?;

    // Marginal posterior summaries in physical space.
    let n = chain.samples.len();
    let mut medians = Vec::with_capacity(p);
    let mut summaries = Vec::with_capacity(p);
    for d in 0..p {
        let mut comp: Vec<f64> = chain
            .samples
            .iter()
            .map(|v| exp.prior.unwhiten(v)[d])
            .collect();
        comp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = comp[n / 2];
        let lo = comp[((n as f64) * 0.025) as usize];
        let hi = comp[(((n as f64) * 0.975) as usize).min(n - 1)];
        medians.push(median);
        summaries.push(serde_json::json!({
            "parameter": format!("u{}", d + 1),
            "median": median,
            "lo95": lo,
            "hi95": hi,
            "truth": exp.truth[d],
        }));
    }
    let median_vec = DVector::from_column_slice(&medians);
    let rem_of_median = rem(&median_vec, &exp.truth).map_err(|e| anyhow!(e))?;
    let summary = serde_json::json!({
        "marginals": summaries,
        "rem_of_median": rem_of_median,
        "acceptance_rate": chain.acceptance_rate,
    });
    write_atomic(
        &dir.join("posterior_summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;

    write_predictions(exp, &chain, &dir)?;

    Ok(UqOutcome {
        acceptance_rate: chain.acceptance_rate,
        medians,
        rem_of_median,
    })
}

fn write_predictions(
    exp: &Experiment,
    chain: &stip_core::sample::PosteriorChain,
    dir: &Path,
) -> Result<()> {
    let horizon = exp.horizon_cfg();
    let samples = exp.physical_samples(chain, exp.config.prediction.n_samples);
    let truth_field = exp.system.field(&exp.truth).map_err(|e| anyhow!(e))?;
    let truth_traj = integrate_window(&truth_field, &exp.window_start, &horizon)
        .context("truth trajectory over the horizon")?;

    let forward = predict_forward(&samples, &exp.system, &horizon, Some(&exp.window_start))
        .map_err(|e| anyhow!(e))?;
    let mut csv = Csv::new(&["t", "component", "mean", "std", "lo95", "hi95", "truth"]);
    for (j, t) in forward.times.iter().enumerate() {
        for i in 0..forward.mean.nrows() {
            csv.row(&[
                fmt_f64(*t),
                exp.y_traj.component_labels[i].clone(),
                fmt_f64(forward.mean[(i, j)]),
                fmt_f64(forward.std[(i, j)]),
                fmt_f64(forward.lo95[(i, j)]),
                fmt_f64(forward.hi95[(i, j)]),
                fmt_f64(truth_traj.values[(i, j)]),
            ]);
        }
    }
    write_atomic(&dir.join("prediction.csv"), &csv.finish())?;

    if let Some(stgp) = &exp.stgp {
        let posterior = predict_posterior_stgp(
            &samples,
            &exp.system,
            &exp.obs_cfg,
            &exp.y_traj,
            stgp,
            &horizon,
            Some(&exp.window_start),
        )
        .map_err(|e| anyhow!(e))?;
        let mut csv = Csv::new(&["t", "component", "mean", "std", "lo95", "hi95", "truth"]);
        for (j, t) in posterior.times.iter().enumerate() {
            for i in 0..posterior.mean.nrows() {
                let std = posterior.variance[(i, j)].sqrt();
                let mean = posterior.mean[(i, j)];
                csv.row(&[
                    fmt_f64(*t),
                    exp.y_traj.component_labels[i].clone(),
                    fmt_f64(mean),
                    fmt_f64(std),
                    fmt_f64(mean - 1.96 * std),
                    fmt_f64(mean + 1.96 * std),
                    fmt_f64(truth_traj.values[(i, j)]),
                ]);
            }
        }
        write_atomic(&dir.join("posterior_prediction.csv"), &csv.finish())?;
    }
    Ok(())
}

/// Reuse a persisted repeat-0 calibration when present; otherwise run one
/// and persist it.
fn load_or_calibrate(exp: &Experiment, dir: &Path) -> Result<EnkHistory> {
    let history_path = dir.join("history_r0.csv");
    let forwards_path = dir.join("forwards_r0.csv");
    if history_path.exists() && forwards_path.exists() {
        log::info!("uq: reusing calibration history at {}", history_path.display());
        return load_history(exp, &history_path, &forwards_path);
    }
    let history = exp.run_calibration(exp.config.seed)?;
    write_history(exp, &history, dir, 0, exp.config.seed)?;
    Ok(history)
}

fn load_history(exp: &Experiment, history_path: &Path, forwards_path: &Path) -> Result<EnkHistory> {
    let p = exp.prior.dim();
    let (hdr, rows) = read_numeric_csv(history_path)?;
    if hdr.len() != 2 + 2 * p {
        bail!("unexpected history header in {}", history_path.display());
    }
    let (fhdr, frows) = read_numeric_csv(forwards_path)?;
    let q = fhdr.len() - 2;
    if frows.len() != rows.len() {
        bail!("history and forward files disagree on row count");
    }
    let mut ensembles: Vec<Ensemble> = Vec::new();
    let mut current: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut current_iter = 0usize;
    let flush = |iteration: usize,
                 bucket: &mut Vec<(Vec<f64>, Vec<f64>)>,
                 ensembles: &mut Vec<Ensemble>| {
        if bucket.is_empty() {
            return;
        }
        let j = bucket.len();
        let mut particles = DMatrix::zeros(j, p);
        let mut forwards = DMatrix::zeros(j, q);
        for (r, (v, f)) in bucket.iter().enumerate() {
            for d in 0..p {
                particles[(r, d)] = v[d];
            }
            for d in 0..q {
                forwards[(r, d)] = f[d];
            }
        }
        ensembles.push(Ensemble {
            particles,
            forward_values: forwards,
            iteration,
            step_size: 0.0,
            resampled: 0,
        });
        bucket.clear();
    };
    for (row, frow) in rows.iter().zip(frows.iter()) {
        let iter = row[0] as usize;
        if iter != current_iter {
            flush(current_iter, &mut current, &mut ensembles);
            current_iter = iter;
        }
        let v: Vec<f64> = row[2..2 + p].to_vec();
        let f: Vec<f64> = frow[2..2 + q].to_vec();
        current.push((v, f));
    }
    flush(current_iter, &mut current, &mut ensembles);
    if ensembles.is_empty() {
        bail!("no ensembles in {}", history_path.display());
    }
    // Recompute the REM trace against the configured truth.
    let rems: Vec<f64> = ensembles
        .iter()
        .map(|ens| {
            let mean = ens.physical_mean(&exp.prior);
            rem(&mean, &exp.truth).unwrap_or(f64::INFINITY)
        })
        .collect();
    let n = ensembles.len();
    Ok(EnkHistory {
        ensembles,
        rem: Some(rems),
        divergences: vec![0; n],
        aborted: None,
    })
}
