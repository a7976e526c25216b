//! Experiment configuration: JSON file, per-system defaults, dotted-path
//! overrides, and cross-field validation.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use stip_core::calibrate::{EnkMethod, StepRule};
use stip_core::dynamics::{ObservationConfig, SystemName};
use stip_core::likelihood::LikelihoodKind;
use stip_core::prior::LogNormalPrior;
use stip_core::sample::Sampler;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationBlock {
    pub t0: f64,
    #[serde(rename = "T")]
    pub window: f64,
    #[serde(rename = "J")]
    pub n_times: usize,
    #[serde(rename = "h")]
    pub step: f64,
    pub x0: Vec<f64>,
    /// Optional additive Gaussian observation noise (off by default).
    #[serde(default)]
    pub noise_std: f64,
}

impl ObservationBlock {
    pub fn to_core(&self) -> ObservationConfig {
        ObservationConfig {
            t0: self.t0,
            window: self.window,
            n_times: self.n_times,
            step: self.step,
            x0: self.x0.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LikelihoodBlock {
    pub kind: LikelihoodKind,
    /// Spatial correlation length on the unit component grid.
    pub ell_x: f64,
    /// Temporal correlation length in the time units of the window.
    pub ell_t: f64,
    pub jitter: f64,
    /// Static-model noise variance; defaults to the grand variance of the
    /// centered observed trajectory.
    #[serde(default)]
    pub sigma2_eps: Option<f64>,
    /// STGP joint variance; defaults to the data estimate.
    #[serde(default)]
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorBlock {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl PriorBlock {
    pub fn to_core(&self) -> Result<LogNormalPrior> {
        LogNormalPrior::new(self.mu0.clone(), self.sigma0.clone()).map_err(|e| anyhow!(e))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum StepRuleKind {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBlock {
    pub method: EnkMethod,
    #[serde(rename = "J_ensemble")]
    pub ensemble_size: usize,
    #[serde(rename = "N")]
    pub iterations: usize,
    /// Fixed step, or `dt0` of the adaptive rule.
    pub dt: f64,
    pub step_rule: StepRuleKind,
    /// Stability cap on the adaptive step relative to the ensemble
    /// covariance spectral radius; `null` disables it.
    #[serde(default = "default_dt_cap")]
    pub dt_cap: Option<f64>,
    /// Perturb EKI innovations with Gamma-distributed noise.
    #[serde(default)]
    pub noisy: bool,
    #[serde(default = "default_max_resample")]
    pub max_resample: usize,
}

fn default_dt_cap() -> Option<f64> {
    Some(0.5)
}

fn default_max_resample() -> usize {
    100
}

impl CalibrationBlock {
    pub fn step_rule(&self) -> StepRule {
        match self.step_rule {
            StepRuleKind::Fixed => StepRule::Fixed { dt: self.dt },
            StepRuleKind::Adaptive => StepRule::Adaptive {
                dt0: self.dt,
                cap: self.dt_cap,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmulationBlock {
    pub max_points: usize,
    pub nugget: f64,
    #[serde(default)]
    pub lengthscales: Option<Vec<f64>>,
    #[serde(default)]
    pub signal_var: Option<f64>,
    /// Factor applied to the median-heuristic lengthscales; below 1 trades
    /// smoothing for basin resolution.
    #[serde(default = "default_lengthscale_scale")]
    pub lengthscale_scale: f64,
}

fn default_lengthscale_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingBlock {
    pub sampler: Sampler,
    pub n_samples: usize,
    pub n_burnin: usize,
    /// pCN beta or Langevin angle.
    pub step: f64,
    pub adapt: bool,
    /// Replace the emulated potential with zero (prior-only chain).
    #[serde(default)]
    pub debug_zero_potential: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionBlock {
    /// Horizon length as a multiple of the observation window.
    pub horizon_factor: f64,
    #[serde(rename = "n_grid")]
    pub n_times: usize,
    /// Posterior samples pushed through the dynamics.
    pub n_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemName,
    pub truth: Vec<f64>,
    pub observation: ObservationBlock,
    pub likelihood: LikelihoodBlock,
    pub prior: PriorBlock,
    pub calibration: CalibrationBlock,
    pub emulation: EmulationBlock,
    pub sampling: SamplingBlock,
    pub prediction: PredictionBlock,
    pub seed: u64,
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Benchmark defaults for one of the built-in systems.
    pub fn default_for(system: SystemName) -> Self {
        let (truth, observation, prior) = match system {
            SystemName::Lorenz63 => (
                vec![10.0, 28.0, 8.0 / 3.0],
                ObservationBlock {
                    t0: 100.0,
                    window: 10.0,
                    n_times: 100,
                    step: 0.01,
                    x0: vec![1.0, 1.0, 1.0],
                    noise_std: 0.0,
                },
                // Parameter order (sigma, rho, beta); prior components paired
                // accordingly.
                PriorBlock {
                    mu0: vec![2.0, 3.3, 1.2],
                    sigma0: vec![0.2, 0.15, 0.5],
                },
            ),
            SystemName::Rossler => (
                vec![0.2, 0.2, 5.7],
                ObservationBlock {
                    t0: 1000.0,
                    window: 100.0,
                    n_times: 100,
                    step: 0.01,
                    x0: vec![1.0, 1.0, 1.0],
                    noise_std: 0.0,
                },
                PriorBlock {
                    mu0: vec![-1.5, -1.5, 2.0],
                    sigma0: vec![0.15, 0.15, 0.2],
                },
            ),
            SystemName::Chen => (
                vec![35.0, 3.0, 28.0],
                ObservationBlock {
                    t0: 100.0,
                    window: 10.0,
                    n_times: 100,
                    step: 0.01,
                    x0: vec![1.0, 1.0, 1.0],
                    noise_std: 0.0,
                },
                PriorBlock {
                    mu0: vec![3.5, 1.2, 3.3],
                    sigma0: vec![0.35, 0.5, 0.15],
                },
            ),
        };
        ExperimentConfig {
            system,
            truth,
            observation,
            likelihood: LikelihoodBlock {
                kind: LikelihoodKind::Stgp,
                ell_x: 0.4,
                ell_t: 0.1,
                jitter: 1e-6,
                sigma2_eps: None,
                variance: None,
            },
            prior,
            calibration: CalibrationBlock {
                method: EnkMethod::Eks,
                ensemble_size: 500,
                iterations: 50,
                dt: 2.0,
                step_rule: StepRuleKind::Adaptive,
                dt_cap: Some(0.5),
                noisy: false,
                max_resample: 100,
            },
            emulation: EmulationBlock {
                max_points: 2000,
                nugget: 1e-6,
                lengthscales: None,
                signal_var: None,
                lengthscale_scale: 0.5,
            },
            sampling: SamplingBlock {
                sampler: Sampler::Pcn,
                n_samples: 10_000,
                n_burnin: 2_000,
                step: 0.2,
                adapt: true,
                debug_zero_potential: false,
            },
            prediction: PredictionBlock {
                horizon_factor: 1.5,
                n_times: 151,
                n_samples: 100,
            },
            seed: 42,
            output_dir: format!("runs/{}", system.as_str()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.truth.len();
        if p != 3 {
            bail!("truth must have 3 parameters for the built-in systems");
        }
        if self.prior.mu0.len() != p || self.prior.sigma0.len() != p {
            bail!("prior blocks must match the parameter dimension {p}");
        }
        self.prior.to_core()?;
        if self.truth.iter().any(|t| !(*t > 0.0)) {
            bail!("truth parameters must be positive under the log-normal prior");
        }
        self.observation
            .to_core()
            .validate(3)
            .map_err(|e| anyhow!(e))?;
        if !(self.observation.noise_std >= 0.0) {
            bail!("observation.noise_std must be >= 0");
        }
        if !(self.likelihood.ell_x > 0.0 && self.likelihood.ell_t > 0.0) {
            bail!("likelihood lengthscales must be > 0");
        }
        if !(self.likelihood.jitter >= 0.0) {
            bail!("likelihood.jitter must be >= 0");
        }
        if self.calibration.ensemble_size < 2 {
            bail!("calibration.J_ensemble must be >= 2");
        }
        if !(self.calibration.dt > 0.0) {
            bail!("calibration.dt must be > 0");
        }
        if let Some(c) = self.calibration.dt_cap {
            if !(c > 0.0) {
                bail!("calibration.dt_cap must be > 0 when set");
            }
        }
        if self.emulation.max_points > 0 && self.emulation.max_points < 2 {
            bail!("emulation.max_points must be 0 (unlimited) or >= 2");
        }
        if !(self.emulation.lengthscale_scale > 0.0) {
            bail!("emulation.lengthscale_scale must be > 0");
        }
        if self.sampling.n_samples == 0 {
            bail!("sampling.n_samples must be >= 1");
        }
        if !(self.sampling.step > 0.0) {
            bail!("sampling.step must be > 0");
        }
        if !(self.prediction.horizon_factor > 0.0) || self.prediction.n_times < 2 {
            bail!("prediction block needs horizon_factor > 0 and n_grid >= 2");
        }
        if self.prediction.n_samples == 0 {
            bail!("prediction.n_samples must be >= 1");
        }
        Ok(())
    }

    /// Deterministic pretty-JSON of the effective configuration.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Load a config file (or system defaults), apply `--set` overrides, then
/// `--seed`/`--out`, and validate.
pub fn load_config(
    path: Option<&str>,
    system: Option<&str>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match (path, system) {
        (Some(p), _) => {
            let body = std::fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {p}"))?
        }
        (None, Some(s)) => {
            let name = SystemName::parse(s).map_err(|e| anyhow!(e))?;
            serde_json::to_value(ExperimentConfig::default_for(name))?
        }
        (None, None) => bail!("either --config or --system is required"),
    };
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let mut config: ExperimentConfig =
        serde_json::from_value(value).context("interpreting configuration")?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.output_dir = o.to_string();
    }
    config.validate()?;
    Ok(config)
}

/// Apply one `key.path=value` override onto the JSON tree. The value is
/// parsed as JSON when possible and kept as a string otherwise.
pub fn apply_set(root: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key.path=value, got {set:?}"))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("--set path {path:?} walks through a non-object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_all_systems() {
        for system in [SystemName::Lorenz63, SystemName::Rossler, SystemName::Chen] {
            ExperimentConfig::default_for(system).validate().unwrap();
        }
    }

    #[test]
    fn config_round_trip_is_idempotent() {
        let config = ExperimentConfig::default_for(SystemName::Lorenz63);
        let json = config.to_json().unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(json, reparsed.to_json().unwrap());
    }

    #[test]
    fn dotted_set_overrides_nested_keys() {
        let mut value =
            serde_json::to_value(ExperimentConfig::default_for(SystemName::Lorenz63)).unwrap();
        apply_set(&mut value, "calibration.J_ensemble=64").unwrap();
        apply_set(&mut value, "likelihood.kind=\"time_averaged\"").unwrap();
        apply_set(&mut value, "likelihood.kind=time_averaged").unwrap();
        let config: ExperimentConfig = serde_json::from_value(value).unwrap();
        assert_eq!(config.calibration.ensemble_size, 64);
        assert_eq!(config.likelihood.kind, LikelihoodKind::TimeAveraged);
    }

    #[test]
    fn benchmark_priors_load_exactly() {
        let lorenz = ExperimentConfig::default_for(SystemName::Lorenz63);
        let mut lorenz_values = lorenz.prior.mu0.clone();
        lorenz_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(lorenz_values, vec![1.2, 2.0, 3.3]);
        let rossler = ExperimentConfig::default_for(SystemName::Rossler);
        assert_eq!(rossler.prior.mu0, vec![-1.5, -1.5, 2.0]);
        assert_eq!(rossler.prior.sigma0, vec![0.15, 0.15, 0.2]);
        let chen = ExperimentConfig::default_for(SystemName::Chen);
        assert_eq!(chen.prior.mu0, vec![3.5, 1.2, 3.3]);
        assert_eq!(chen.prior.sigma0, vec![0.35, 0.5, 0.15]);
    }

    #[test]
    fn validation_rejects_bad_blocks() {
        let mut config = ExperimentConfig::default_for(SystemName::Lorenz63);
        config.truth = vec![10.0, -28.0, 2.6];
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default_for(SystemName::Lorenz63);
        config.observation.n_times = 1;
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default_for(SystemName::Lorenz63);
        config.calibration.dt = 0.0;
        assert!(config.validate().is_err());
    }
}
