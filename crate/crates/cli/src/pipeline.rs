//! Shared experiment assembly: data generation, likelihood construction,
//! calibration, emulation, and sampling, all driven by one configuration.

use anyhow::{anyhow, Context, Result};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stip_core::calibrate::{
    run_enk, ChaoticForward, EnkConfig, EnkHistory, EnkProblem, ForwardOutput,
};
use stip_core::dynamics::{
    augment_second_order, integrate_window, state_at_window_start, time_average,
    ObservationConfig, OdeSystem, ParameterVector, TrajectoryMatrix,
};
use stip_core::emulate::{
    emulated_potential, fit as fit_gp, median_lengthscales, training_set_from_history, GpEmulator,
    GpHyper,
};
use stip_core::likelihood::{
    build_static_model, build_stgp_model, build_time_averaged_model, LikelihoodKind,
    MatrixNormalModel, StgpConfig, StgpModel,
};
use stip_core::prior::LogNormalPrior;
use stip_core::sample::{run_chain, ChainConfig, PosteriorChain, Potential};

use crate::config::{EmulationBlock, ExperimentConfig, SamplingBlock};

/// Everything derived from one configuration: the observed data, the data
/// model, and the forward map of the identification problem.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: OdeSystem,
    pub truth: ParameterVector,
    pub obs_cfg: ObservationConfig,
    pub prior: LogNormalPrior,
    /// State at `t0` from the truth spin-up; shared by all forward
    /// evaluations (the identification setting).
    pub window_start: Vec<f64>,
    /// Observed window trajectory (noise added when configured).
    pub y_traj: TrajectoryMatrix,
    /// Second-order augmented observation.
    pub y_aug: TrajectoryMatrix,
    pub metric: MatrixNormalModel,
    /// Present when the configured likelihood is the STGP model.
    pub stgp: Option<StgpModel>,
    /// Present when the configured likelihood is the static model.
    pub sigma2_static: Option<f64>,
    /// Data vector in the space the ensemble methods operate on.
    pub data: DVector<f64>,
    pub forward_output: ForwardOutput,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let system = OdeSystem::new(config.system);
        let truth = DVector::from_column_slice(&config.truth);
        let obs_cfg = config.observation.to_core();
        let prior = config.prior.to_core()?;
        let field = system.field(&truth).map_err(|e| anyhow!(e))?;
        let window_start =
            state_at_window_start(&field, &obs_cfg).context("integrating the truth spin-up")?;
        let mut y_traj = integrate_window(&field, &window_start, &obs_cfg)
            .context("integrating the truth window")?;
        if config.observation.noise_std > 0.0 {
            // A dedicated stream so calibration seeds do not shift the data.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f62_7365_7276_6564);
            y_traj
                .add_noise(config.observation.noise_std, &mut rng)
                .map_err(|e| anyhow!(e))?;
        }
        let y_aug = augment_second_order(&y_traj).map_err(|e| anyhow!(e))?;

        let (metric, stgp, sigma2_static, data, forward_output) = match config.likelihood.kind {
            LikelihoodKind::Stgp => {
                let stgp_cfg = StgpConfig {
                    ell_x: config.likelihood.ell_x,
                    // ell_t is configured in window time units; kernels are
                    // built on times normalized to [0, 1].
                    ell_t: config.likelihood.ell_t / config.observation.window,
                    jitter: config.likelihood.jitter,
                    variance: config.likelihood.variance,
                };
                let stgp = build_stgp_model(&y_traj, &stgp_cfg).map_err(|e| anyhow!(e))?;
                (
                    stgp.model.clone(),
                    Some(stgp),
                    None,
                    y_traj.flatten(),
                    ForwardOutput::FlattenedTrajectory,
                )
            }
            LikelihoodKind::TimeAveraged => {
                let metric = build_time_averaged_model(&y_aug, config.likelihood.jitter)
                    .map_err(|e| anyhow!(e))?;
                (
                    metric,
                    None,
                    None,
                    time_average(&y_aug),
                    ForwardOutput::AugmentedTimeAverage,
                )
            }
            LikelihoodKind::Static => {
                let (metric, sigma2) =
                    build_static_model(&y_traj, config.likelihood.sigma2_eps)
                        .map_err(|e| anyhow!(e))?;
                (
                    metric,
                    None,
                    Some(sigma2),
                    y_traj.flatten(),
                    ForwardOutput::FlattenedTrajectory,
                )
            }
        };
        Ok(Experiment {
            config,
            system,
            truth,
            obs_cfg,
            prior,
            window_start,
            y_traj,
            y_aug,
            metric,
            stgp,
            sigma2_static,
            data,
            forward_output,
        })
    }

    pub fn forward(&self) -> ChaoticForward {
        ChaoticForward {
            system: self.system,
            cfg: self.obs_cfg.clone(),
            prior: self.prior.clone(),
            output: self.forward_output,
            window_start: Some(self.window_start.clone()),
        }
    }

    /// Run one calibration with the configured method and the given seed.
    pub fn run_calibration(&self, seed: u64) -> Result<EnkHistory> {
        let forward = self.forward();
        let problem = EnkProblem {
            forward: &forward,
            metric: &self.metric,
            data: &self.data,
            prior: &self.prior,
            truth: Some(&self.truth),
        };
        let cal = &self.config.calibration;
        let cfg = EnkConfig {
            method: cal.method,
            ensemble_size: cal.ensemble_size,
            iterations: cal.iterations,
            step: cal.step_rule(),
            noisy: cal.noisy,
            seed,
            max_resample: cal.max_resample,
        };
        run_enk(&problem, &cfg).map_err(|e| anyhow!(e))
    }

    /// Whitened ensemble mean of the best-REM iteration.
    pub fn best_iteration_mean(&self, history: &EnkHistory) -> Result<(usize, f64, DVector<f64>)> {
        let (iter, rem) = history
            .best_rem()
            .ok_or_else(|| anyhow!("history carries no REM trace"))?;
        let ens = &history.ensembles[iter];
        let mean = ens.particles.row_sum().transpose() / ens.size() as f64;
        Ok((iter, rem, mean))
    }

    /// Horizon grid for predictions: `[t0, t0 + factor * T]`.
    pub fn horizon_cfg(&self) -> ObservationConfig {
        ObservationConfig {
            t0: self.obs_cfg.t0,
            window: self.config.prediction.horizon_factor * self.obs_cfg.window,
            n_times: self.config.prediction.n_times,
            step: self.obs_cfg.step,
            x0: self.obs_cfg.x0.clone(),
        }
    }

    /// Fit the GP emulator on a calibration history.
    pub fn fit_emulator(&self, history: &EnkHistory, block: &EmulationBlock) -> Result<GpEmulator> {
        let (inputs, outputs) = training_set_from_history(history, block.max_points)
            .map_err(|e| anyhow!(e))?;
        let lengthscales = match &block.lengthscales {
            Some(ls) => Some(ls.clone()),
            None => Some(
                median_lengthscales(&inputs)
                    .into_iter()
                    .map(|l| l * block.lengthscale_scale)
                    .collect(),
            ),
        };
        let hyper = GpHyper {
            lengthscales,
            signal_var: block.signal_var,
            nugget: block.nugget,
        };
        fit_gp(&inputs, &outputs, &hyper).map_err(|e| anyhow!(e))
    }

    /// Run the configured MCMC chain on the emulated potential.
    pub fn run_sampling(
        &self,
        emulator: &GpEmulator,
        block: &SamplingBlock,
        init: DVector<f64>,
        seed: u64,
    ) -> Result<PosteriorChain> {
        let chain_cfg = ChainConfig {
            sampler: block.sampler,
            n_samples: block.n_samples,
            n_burnin: block.n_burnin,
            adapt: block.adapt,
            step: block.step,
            seed,
        };
        if block.debug_zero_potential {
            struct Flat;
            impl Potential for Flat {
                fn value(&self, _v: &DVector<f64>) -> f64 {
                    0.0
                }
                fn value_grad(&self, v: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
                    Some((0.0, DVector::zeros(v.len())))
                }
            }
            return run_chain(&Flat, &chain_cfg, init).map_err(|e| anyhow!(e));
        }
        let potential = emulated_potential(emulator, &self.metric, self.data.clone())
            .map_err(|e| anyhow!(e))?;
        run_chain(&potential, &chain_cfg, init).map_err(|e| anyhow!(e))
    }

    /// Unwhiten a thinned set of chain samples into physical parameters.
    pub fn physical_samples(&self, chain: &PosteriorChain, count: usize) -> Vec<ParameterVector> {
        let n = chain.samples.len();
        let count = count.min(n).max(1);
        (0..count)
            .map(|k| {
                let idx = (k + 1) * n / count - 1;
                self.prior.unwhiten(&chain.samples[idx])
            })
            .collect()
    }
}

/// Seed for repeat `r`: repeats share seeds across likelihood kinds so
/// model comparisons are common-random-number paired.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add(repeat as u64)
}
