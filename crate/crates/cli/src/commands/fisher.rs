//! `fisher`: numerical verification of the Fisher-information Loewner-order
//! theorems on random small instances.

use std::path::Path;

use anyhow::{anyhow, Result};
use stip_core::analyze::{verify_theorem_1, verify_theorem_2, TheoremReport};

use crate::output::write_atomic;

pub struct FisherOutcome {
    pub reports: Vec<TheoremReport>,
    pub violations_under_condition: usize,
}

pub fn run(trials: usize, seed: u64, violate_condition: bool, out: &Path) -> Result<FisherOutcome> {
    let t1 = verify_theorem_1(trials, seed, violate_condition).map_err(|e| anyhow!(e))?;
    let t2 = verify_theorem_2(trials, seed ^ 0x7468_6d32, violate_condition).map_err(|e| anyhow!(e))?;
    let reports = vec![t1, t2];

    let mut violations_under_condition = 0usize;
    for report in &reports {
        for cmp in &report.comparisons {
            let status = if report.condition_met {
                violations_under_condition += cmp.violations;
                if cmp.violations == 0 { "ok" } else { "VIOLATED" }
            } else {
                "condition not met (diagnostic)"
            };
            println!(
                "{} {}: trials {}, violations {}, worst min eig {:.3e} [{}]",
                report.theorem, cmp.label, report.trials, cmp.violations, cmp.worst_min_eig, status
            );
        }
    }

    let body = serde_json::to_string_pretty(&reports)?;
    write_atomic(&out.join("fisher_report.json"), &body)?;
    Ok(FisherOutcome {
        reports,
        violations_under_condition,
    })
}
