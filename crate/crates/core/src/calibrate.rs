//! Ensemble Kalman inversion (EKI) and sampling (EKS) over the whitened
//! parameter space, with per-iteration history capture for emulation.
//!
//! Both methods discretize interacting-particle dynamics explicitly. For a
//! particle ensemble `{v_j}` with forward values `{G_j}`, ensemble means
//! `vbar`, `Gbar`, and data `y`:
//!
//! * EKI: `v_j += dt/J * sum_k <G_k - Gbar, y - G_j + zeta_j>_Gamma (v_k - vbar)`
//!   with `zeta_j = 0` (deterministic) or `Gamma^{1/2} dW/dt` (noisy).
//! * EKS adds the prior drift `-C(v) v_j` (the whitened prior covariance is
//!   the identity) and noise `sqrt(2 C(v)) dW`, with the adaptive step
//!   `dt = dt0 / (||D||_F + 1e-8)` built from the interaction matrix
//!   `D_jk = <G_k - Gbar, G_j - y>_Gamma / J`.
//!
//! Divergent particles (chaotic blow-ups) are replaced by fresh prior draws
//! and re-evaluated; the count is recorded per iteration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analyze::rem;
use crate::dynamics::{
    augment_second_order, integrate, integrate_window, time_average, ObservationConfig, OdeSystem,
    ParameterVector,
};
use crate::error::{Error, Result};
use crate::likelihood::MatrixNormalModel;
use crate::linalg::{max_eig, sym_sqrt};
use crate::prior::LogNormalPrior;

/// Map from whitened parameters to the data-space vector.
pub trait ForwardMap: Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
}

/// What a chaotic forward evaluation returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardOutput {
    /// Column-major flattened `I x J` trajectory (static and STGP models).
    FlattenedTrajectory,
    /// Time average of the second-order augmented trajectory (9 components).
    AugmentedTimeAverage,
}

/// The observed-trajectory forward map of a built-in system.
///
/// With `window_start` set, evaluations integrate only the observation
/// window from that shared state at `t0` (the identification setting where
/// the window start is data); otherwise each evaluation re-runs the spin-up
/// from `cfg.x0` under its own parameters.
pub struct ChaoticForward {
    pub system: OdeSystem,
    pub cfg: ObservationConfig,
    pub prior: LogNormalPrior,
    pub output: ForwardOutput,
    pub window_start: Option<Vec<f64>>,
}

impl ForwardMap for ChaoticForward {
    fn output_dim(&self) -> usize {
        match self.output {
            ForwardOutput::FlattenedTrajectory => self.system.dimension() * self.cfg.n_times,
            ForwardOutput::AugmentedTimeAverage => 9,
        }
    }

    fn eval(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.prior.unwhiten(v);
        let field = self.system.field(&u)?;
        let traj = match &self.window_start {
            Some(state) => integrate_window(&field, state, &self.cfg)?,
            None => integrate(&field, &self.cfg)?,
        };
        match self.output {
            ForwardOutput::FlattenedTrajectory => Ok(traj.flatten()),
            ForwardOutput::AugmentedTimeAverage => Ok(time_average(&augment_second_order(&traj)?)),
        }
    }
}

/// One generation of particles with cached forward evaluations.
///
/// Row `j` of `forward_values` is the forward map applied to
/// `unwhiten(particles row j)`.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// `J x p` whitened particles.
    pub particles: DMatrix<f64>,
    /// `J x q` forward values.
    pub forward_values: DMatrix<f64>,
    pub iteration: usize,
    /// Step size actually used to produce this generation (0 for the prior
    /// ensemble).
    pub step_size: f64,
    /// Divergent particles replaced by fresh prior draws while producing
    /// this generation.
    pub resampled: usize,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.particles.nrows()
    }

    /// Ensemble mean in physical parameter space.
    pub fn physical_mean(&self, prior: &LogNormalPrior) -> ParameterVector {
        let j = self.size();
        let mut acc = DVector::zeros(self.particles.ncols());
        for row in 0..j {
            acc += prior.unwhiten(&self.particles.row(row).transpose());
        }
        acc / j as f64
    }
}

/// Full run history: ensembles for iterations `0..=N`.
#[derive(Debug, Clone)]
pub struct EnkHistory {
    pub ensembles: Vec<Ensemble>,
    /// Ensemble-mean REM per iteration when the truth was supplied.
    pub rem: Option<Vec<f64>>,
    /// Divergent-particle resamples per iteration.
    pub divergences: Vec<usize>,
    /// Set when a step failed and the run stopped early; the history up to
    /// that point is preserved.
    pub aborted: Option<String>,
}

impl EnkHistory {
    /// Iteration with the smallest ensemble-mean REM.
    pub fn best_rem(&self) -> Option<(usize, f64)> {
        let rems = self.rem.as_ref()?;
        rems.iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnkMethod {
    Eki,
    Eks,
}

/// Step-size rule for the discretized dynamics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum StepRule {
    /// Constant step.
    Fixed { dt: f64 },
    /// `dt = dt0 / (||D||_F + 1e-8)`, optionally capped at
    /// `cap / lambda_max(C(v))` to keep the explicit prior-drift step stable
    /// when the data misfit is flat.
    Adaptive { dt0: f64, cap: Option<f64> },
}

/// Configuration of one ensemble run.
#[derive(Debug, Clone, Copy)]
pub struct EnkConfig {
    pub method: EnkMethod,
    pub ensemble_size: usize,
    pub iterations: usize,
    pub step: StepRule,
    /// EKI only: perturb innovations with `Gamma`-distributed noise.
    pub noisy: bool,
    pub seed: u64,
    /// Resample attempts per step before giving up.
    pub max_resample: usize,
}

impl EnkConfig {
    pub fn new(method: EnkMethod, ensemble_size: usize, iterations: usize) -> Self {
        EnkConfig {
            method,
            ensemble_size,
            iterations,
            step: match method {
                EnkMethod::Eki => StepRule::Fixed { dt: 1.0 },
                EnkMethod::Eks => StepRule::Adaptive {
                    dt0: 0.1,
                    cap: Some(0.5),
                },
            },
            noisy: false,
            seed: 0,
            max_resample: 100,
        }
    }
}

/// Everything a run needs besides the algorithm configuration.
pub struct EnkProblem<'a, F: ForwardMap> {
    pub forward: &'a F,
    pub metric: &'a MatrixNormalModel,
    pub data: &'a DVector<f64>,
    pub prior: &'a LogNormalPrior,
    /// Enables per-iteration REM tracking.
    pub truth: Option<&'a ParameterVector>,
}

fn row_vec(m: &DMatrix<f64>, row: usize) -> DVector<f64> {
    m.row(row).transpose()
}

fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let j = m.nrows() as f64;
    let mean = m.row_sum() / j;
    let mut out = m.clone();
    for r in 0..m.nrows() {
        let mut row = out.row_mut(r);
        row -= &mean;
    }
    out
}

/// Evaluate the forward map on every particle row, replacing divergent
/// particles with fresh whitened-prior draws. Returns the forward values and
/// the number of resampled particles.
fn evaluate_ensemble<F: ForwardMap, R: Rng>(
    forward: &F,
    particles: &mut DMatrix<f64>,
    rng: &mut R,
    max_resample: usize,
) -> Result<(DMatrix<f64>, usize)> {
    let j = particles.nrows();
    let p = particles.ncols();
    let q = forward.output_dim();
    let mut values = DMatrix::zeros(j, q);
    let mut pending: Vec<usize> = (0..j).collect();
    let mut resamples = 0usize;
    for attempt in 0..=max_resample {
        let results: Vec<(usize, Result<DVector<f64>>)> = pending
            .par_iter()
            .map(|&row| (row, forward.eval(&row_vec(particles, row))))
            .collect();
        let mut failed = Vec::new();
        for (row, res) in results {
            match res {
                Ok(g) => {
                    if g.len() != q {
                        return Err(Error::DimensionMismatch {
                            expected: q,
                            got: g.len(),
                            context: "forward output",
                        });
                    }
                    values.row_mut(row).copy_from(&g.transpose());
                }
                Err(Error::Divergence { .. }) => failed.push(row),
                Err(e) => return Err(e),
            }
        }
        if failed.is_empty() {
            return Ok((values, resamples));
        }
        if attempt == max_resample {
            return Err(Error::Divergence { t_last: f64::NAN });
        }
        resamples += failed.len();
        for &row in &failed {
            for c in 0..p {
                particles[(row, c)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        pending = failed;
    }
    unreachable!()
}

/// Interaction term shared by both methods: returns `Dtilde * Uc` (the data
/// drift, with `Dtilde_jk = <G_k - Gbar, b_j>_Gamma / J` and `b_j` the j-th
/// innovation row) and `||Dtilde||_F`.
fn interaction(
    particles: &DMatrix<f64>,
    forwards: &DMatrix<f64>,
    innovations: &DMatrix<f64>,
    metric: &MatrixNormalModel,
) -> Result<(DMatrix<f64>, f64)> {
    let j = particles.nrows();
    let gc = center_rows(forwards);
    let mut gw = DMatrix::zeros(j, gc.ncols());
    let mut bw = DMatrix::zeros(j, gc.ncols());
    for r in 0..j {
        gw.row_mut(r)
            .copy_from(&metric.whiten_data(&row_vec(&gc, r))?.transpose());
        bw.row_mut(r)
            .copy_from(&metric.whiten_data(&row_vec(innovations, r))?.transpose());
    }
    let d = (&bw * gw.transpose()) / j as f64;
    let norm = d.norm();
    let uc = center_rows(particles);
    Ok((&d * uc, norm))
}

/// One explicit Euler(-Maruyama) EKI step.
pub fn eki_step<F: ForwardMap, R: Rng>(
    ens: &Ensemble,
    data: &DVector<f64>,
    metric: &MatrixNormalModel,
    dt: f64,
    noisy: bool,
    forward: &F,
    rng: &mut R,
    max_resample: usize,
) -> Result<Ensemble> {
    if ens.size() < 2 {
        return Err(Error::InvalidArgument("ensemble needs J >= 2".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument("dt must be > 0".into()));
    }
    let j = ens.size();
    let q = data.len();
    let mut innovations = DMatrix::zeros(j, q);
    for r in 0..j {
        let mut b = data - row_vec(&ens.forward_values, r);
        if noisy {
            b += metric.sample_noise(q, rng)? / dt.sqrt();
        }
        innovations.row_mut(r).copy_from(&b.transpose());
    }
    let (drift, _) = interaction(&ens.particles, &ens.forward_values, &innovations, metric)?;
    let mut particles = &ens.particles + drift * dt;
    let (forward_values, resampled) =
        evaluate_ensemble(forward, &mut particles, rng, max_resample)?;
    log_resamples(ens.iteration + 1, resampled);
    Ok(Ensemble {
        particles,
        forward_values,
        iteration: ens.iteration + 1,
        step_size: dt,
        resampled,
    })
}

fn log_resamples(iteration: usize, n: usize) {
    if n > 0 {
        log::debug!("iteration {iteration}: resampled {n} divergent particles");
    }
}

/// Deterministic pieces of one EKS step: data drift, prior drift, and the
/// step size picked by the adaptive rule.
fn eks_parts(
    ens: &Ensemble,
    data: &DVector<f64>,
    metric: &MatrixNormalModel,
    step: StepRule,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let j = ens.size();
    let q = data.len();
    let mut innovations = DMatrix::zeros(j, q);
    for r in 0..j {
        innovations
            .row_mut(r)
            .copy_from(&(data - row_vec(&ens.forward_values, r)).transpose());
    }
    let (data_drift, d_norm) = interaction(&ens.particles, &ens.forward_values, &innovations, metric)?;
    let uc = center_rows(&ens.particles);
    let cov = uc.transpose() * &uc / j as f64;
    let prior_drift = -(&ens.particles * &cov);
    let dt = match step {
        StepRule::Fixed { dt } => dt,
        StepRule::Adaptive { dt0, cap } => {
            let mut dt = dt0 / (d_norm + 1e-8);
            if let Some(cap) = cap {
                dt = dt.min(cap / (max_eig(&cov)? + 1e-8));
            }
            dt
        }
    };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument("EKS step size must be > 0".into()));
    }
    Ok((data_drift, prior_drift, cov, dt))
}

/// One explicit Euler-Maruyama EKS step with adaptive step size.
pub fn eks_step<F: ForwardMap, R: Rng>(
    ens: &Ensemble,
    data: &DVector<f64>,
    metric: &MatrixNormalModel,
    step: StepRule,
    forward: &F,
    rng: &mut R,
    max_resample: usize,
) -> Result<Ensemble> {
    if ens.size() < 2 {
        return Err(Error::InvalidArgument("ensemble needs J >= 2".into()));
    }
    let (data_drift, prior_drift, cov, dt) = eks_parts(ens, data, metric, step)?;
    let j = ens.size();
    let p = ens.particles.ncols();
    // The 1e-10 loading only guards sym_sqrt near degeneracy; a fully
    // collapsed ensemble has zero noise amplitude and must stay frozen.
    let noise_root = if max_eig(&cov)? <= 1e-14 {
        DMatrix::zeros(p, p)
    } else {
        let mut loaded = cov;
        for i in 0..p {
            loaded[(i, i)] += 1e-10;
        }
        sym_sqrt(&loaded)?
    };
    let xi = DMatrix::from_fn(j, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut particles =
        &ens.particles + (data_drift + prior_drift) * dt + xi * noise_root * (2.0 * dt).sqrt();
    let (forward_values, resampled) =
        evaluate_ensemble(forward, &mut particles, rng, max_resample)?;
    log_resamples(ens.iteration + 1, resampled);
    Ok(Ensemble {
        particles,
        forward_values,
        iteration: ens.iteration + 1,
        step_size: dt,
        resampled,
    })
}

/// Run a full calibration: prior ensemble plus `N` steps, returning the
/// complete history. Per-step failures stop the run early and are recorded
/// in [`EnkHistory::aborted`].
pub fn run_enk<F: ForwardMap>(problem: &EnkProblem<'_, F>, cfg: &EnkConfig) -> Result<EnkHistory> {
    if cfg.ensemble_size < 2 {
        return Err(Error::InvalidArgument("ensemble needs J >= 2".into()));
    }
    let p = problem.prior.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut particles = DMatrix::zeros(cfg.ensemble_size, p);
    for r in 0..cfg.ensemble_size {
        for c in 0..p {
            particles[(r, c)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (forward_values, resampled) =
        evaluate_ensemble(problem.forward, &mut particles, &mut rng, cfg.max_resample)?;
    let mut history = EnkHistory {
        ensembles: vec![Ensemble {
            particles,
            forward_values,
            iteration: 0,
            step_size: 0.0,
            resampled,
        }],
        rem: problem.truth.map(|_| Vec::new()),
        divergences: vec![resampled],
        aborted: None,
    };
    track_rem(&mut history, problem);

    for _ in 0..cfg.iterations {
        let current = history.ensembles.last().expect("nonempty history");
        let stepped = match cfg.method {
            EnkMethod::Eki => {
                let dt = match cfg.step {
                    StepRule::Fixed { dt } => Ok(dt),
                    StepRule::Adaptive { .. } => eks_parts(current, problem.data, problem.metric, cfg.step)
                        .map(|(_, _, _, dt)| dt),
                };
                dt.and_then(|dt| {
                    eki_step(
                        current,
                        problem.data,
                        problem.metric,
                        dt,
                        cfg.noisy,
                        problem.forward,
                        &mut rng,
                        cfg.max_resample,
                    )
                })
            }
            EnkMethod::Eks => eks_step(
                current,
                problem.data,
                problem.metric,
                cfg.step,
                problem.forward,
                &mut rng,
                cfg.max_resample,
            ),
        };
        match stepped {
            Ok(ens) => {
                history.divergences.push(ens.resampled);
                history.ensembles.push(ens);
                track_rem(&mut history, problem);
            }
            Err(e) => {
                history.aborted = Some(e.to_string());
                break;
            }
        }
    }
    Ok(history)
}

fn track_rem<F: ForwardMap>(history: &mut EnkHistory, problem: &EnkProblem<'_, F>) {
    if let (Some(rems), Some(truth)) = (history.rem.as_mut(), problem.truth) {
        let ens = history.ensembles.last().expect("nonempty history");
        let mean = ens.physical_mean(problem.prior);
        rems.push(rem(&mean, truth).unwrap_or(f64::INFINITY));
    }
}
