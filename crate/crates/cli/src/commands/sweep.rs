//! `sweep`: repeat the calibration while varying one configuration axis,
//! emitting an `axis_value,model,repeat,rem` table.

use anyhow::{bail, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, write_atomic, Csv};
use crate::pipeline::{repeat_seed, Experiment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SpinUp,
    Window,
    EnsembleSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t0" => Ok(SweepAxis::SpinUp),
            "T" => Ok(SweepAxis::Window),
            "J_ensemble" => Ok(SweepAxis::EnsembleSize),
            other => bail!("unknown sweep axis {other:?} (expected t0, T, or J_ensemble)"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SpinUp => "t0",
            SweepAxis::Window => "T",
            SweepAxis::EnsembleSize => "J_ensemble",
        }
    }

    fn apply(&self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::SpinUp => config.observation.t0 = value,
            SweepAxis::Window => config.observation.window = value,
            SweepAxis::EnsembleSize => {
                if value < 2.0 || value.fract() != 0.0 {
                    bail!("J_ensemble sweep values must be integers >= 2");
                }
                config.calibration.ensemble_size = value as usize;
            }
        }
        Ok(())
    }
}

pub struct SweepCell {
    pub axis_value: f64,
    pub repeat: usize,
    pub best_rem: f64,
}

pub fn run(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let dir = std::path::PathBuf::from(&base.output_dir);
    let mut cells: Vec<SweepCell> = Vec::new();
    for &value in values {
        let mut config = base.clone();
        axis.apply(&mut config, value)?;
        config.validate()?;
        let exp = Experiment::build(config)?;
        let mut batch: Vec<SweepCell> = (0..repeats)
            .into_par_iter()
            .map(|r| -> Result<SweepCell> {
                let history = exp.run_calibration(repeat_seed(exp.config.seed, r))?;
                let (_, best_rem) = history
                    .best_rem()
                    .ok_or_else(|| anyhow::anyhow!("missing REM trace"))?;
                Ok(SweepCell {
                    axis_value: value,
                    repeat: r,
                    best_rem,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        batch.sort_by_key(|c| c.repeat);
        cells.extend(batch);
    }

    let model = base.likelihood.kind.as_str();
    let mut csv = Csv::new(&["axis_value", "model", "repeat", "rem"]);
    for c in &cells {
        csv.row(&[
            fmt_f64(c.axis_value),
            model.to_string(),
            c.repeat.to_string(),
            fmt_f64(c.best_rem),
        ]);
    }
    write_atomic(&dir.join(format!("sweep_{}_{model}.csv", axis.name())), &csv.finish())?;

    let mut aggregates = Vec::new();
    for &value in values {
        let mut rems: Vec<f64> = cells
            .iter()
            .filter(|c| c.axis_value == value)
            .map(|c| c.best_rem)
            .collect();
        rems.sort_by(|a, b| a.partial_cmp(b).unwrap());
        aggregates.push(serde_json::json!({
            "axis_value": value,
            "mean_rem": rems.iter().sum::<f64>() / rems.len() as f64,
            "median_rem": rems[rems.len() / 2],
        }));
    }
    let sidecar = serde_json::json!({
        "axis": axis.name(),
        "model": model,
        "repeats": repeats,
        "aggregates": aggregates,
        "config": base,
    });
    write_atomic(
        &dir.join(format!("sweep_{}_{model}.json", axis.name())),
        &serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(cells)
}
