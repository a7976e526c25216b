//! Matrix-normal potentials under the static, time-averaged, and
//! spatiotemporal-GP covariance structures, plus the space/time kernels.
//!
//! All three likelihoods are negative log-densities of a matrix-normal
//! observation model `Y ~ MN(M, U, V)` and differ only in `(U, V)`:
//!
//! * static:        `U = sigma_eps^2 I`,  `V = I`
//! * time-averaged: `U = Gamma_obs`,      `V^- = 1 1' / J^2` (row-mean projection)
//! * STGP:          `U = C_x`,            `V = C_t`
//!
//! Potentials are evaluated through Cholesky solves; no explicit inverses are
//! formed. Kernel inputs are normalized coordinates: observation times are
//! rescaled to `[0, 1]` over the window and the `I` spatial components sit on
//! an equispaced unit grid, so the correlation lengths are meaningful on
//! O(1) scales regardless of the window length.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{time_average, TrajectoryMatrix};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor};

/// Which covariance structure a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Static,
    TimeAveraged,
    Stgp,
}

impl LikelihoodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LikelihoodKind::Static => "static",
            LikelihoodKind::TimeAveraged => "time_averaged",
            LikelihoodKind::Stgp => "stgp",
        }
    }
}

/// Kernel family for covariance construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    IdentityScaled,
}

/// Kernel over scalar (normalized) coordinates.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
    /// Relative diagonal loading.
    pub jitter: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscale: f64, variance: f64, jitter: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale,
            variance,
            jitter,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::InvalidArgument("kernel lengthscale must be > 0".into()));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidArgument("kernel variance must be > 0".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidArgument("kernel jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Covariance matrix of a kernel over the given points, with
/// `jitter * variance` added on the diagonal.
pub fn build_kernel_matrix(points: &[f64], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("kernel needs >= 1 point".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("kernel points must be finite".into()));
    }
    let n = points.len();
    let mut k = match spec.family {
        KernelFamily::SquaredExponential => DMatrix::from_fn(n, n, |i, j| {
            let d = points[i] - points[j];
            spec.variance * (-d * d / (2.0 * spec.lengthscale * spec.lengthscale)).exp()
        }),
        KernelFamily::IdentityScaled => DMatrix::from_diagonal_element(n, n, spec.variance),
    };
    for i in 0..n {
        k[(i, i)] += spec.jitter * spec.variance;
    }
    Ok(k)
}

/// Equispaced points on `[0, 1]` (a single point sits at 0).
pub fn unit_grid(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n.max(1)];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Rescale observation times affinely onto `[0, 1]`.
pub fn normalize_times(times: &[f64]) -> Vec<f64> {
    if times.len() <= 1 {
        return vec![0.0; times.len().max(1)];
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    times.iter().map(|t| (t - t0) / span).collect()
}

/// A matrix-normal data model with cached Cholesky factors.
///
/// Instances are immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub enum MatrixNormalModel {
    Static {
        rows: usize,
        sigma2_eps: f64,
    },
    TimeAveraged {
        gamma_obs: DMatrix<f64>,
        factor: CholeskyFactor,
    },
    Stgp {
        c_x: DMatrix<f64>,
        c_t: DMatrix<f64>,
        factor_x: CholeskyFactor,
        factor_t: CholeskyFactor,
    },
}

impl MatrixNormalModel {
    pub fn static_model(rows: usize, sigma2_eps: f64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidArgument("static model needs rows >= 1".into()));
        }
        if !(sigma2_eps > 0.0 && sigma2_eps.is_finite()) {
            return Err(Error::InvalidArgument("sigma2_eps must be > 0".into()));
        }
        Ok(MatrixNormalModel::Static { rows, sigma2_eps })
    }

    pub fn time_averaged(gamma_obs: DMatrix<f64>) -> Result<Self> {
        let factor = cholesky(&gamma_obs, None)
            .map_err(|_| Error::Singular("Gamma_obs is not positive definite".into()))?;
        Ok(MatrixNormalModel::TimeAveraged { gamma_obs, factor })
    }

    pub fn stgp(c_x: DMatrix<f64>, c_t: DMatrix<f64>) -> Result<Self> {
        let factor_x = cholesky(&c_x, None)
            .map_err(|_| Error::Singular("spatial kernel C_x is not positive definite".into()))?;
        let factor_t = cholesky(&c_t, None)
            .map_err(|_| Error::Singular("temporal kernel C_t is not positive definite".into()))?;
        Ok(MatrixNormalModel::Stgp {
            c_x,
            c_t,
            factor_x,
            factor_t,
        })
    }

    pub fn kind(&self) -> LikelihoodKind {
        match self {
            MatrixNormalModel::Static { .. } => LikelihoodKind::Static,
            MatrixNormalModel::TimeAveraged { .. } => LikelihoodKind::TimeAveraged,
            MatrixNormalModel::Stgp { .. } => LikelihoodKind::Stgp,
        }
    }

    /// Length of the data vector the model operates on, when fixed by the
    /// model itself (the static model accepts any column count).
    pub fn data_dim(&self) -> Option<usize> {
        match self {
            MatrixNormalModel::Static { .. } => None,
            MatrixNormalModel::TimeAveraged { gamma_obs, .. } => Some(gamma_obs.nrows()),
            MatrixNormalModel::Stgp { c_x, c_t, .. } => Some(c_x.nrows() * c_t.nrows()),
        }
    }

    fn reshape(&self, v: &DVector<f64>, context: &'static str) -> Result<DMatrix<f64>> {
        let rows = match self {
            MatrixNormalModel::Static { rows, .. } => *rows,
            MatrixNormalModel::Stgp { c_x, .. } => c_x.nrows(),
            MatrixNormalModel::TimeAveraged { gamma_obs, .. } => gamma_obs.nrows(),
        };
        if v.len() % rows != 0 || v.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: v.len(),
                context,
            });
        }
        if let Some(d) = self.data_dim() {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                    context,
                });
            }
        }
        Ok(DMatrix::from_column_slice(rows, v.len() / rows, v.as_slice()))
    }

    /// Potential of the residual matrix `R = Y - M` given as flattened
    /// column-major data (for the time-averaged model, `r` lives in the
    /// row-mean space already).
    pub fn potential_vec(&self, r: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * self.whiten_data(r)?.norm_squared())
    }

    /// Map a data vector through `Gamma^{-1/2}` (any fixed square root), so
    /// that `<a, b>_Gamma = whiten(a) . whiten(b)`.
    pub fn whiten_data(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            MatrixNormalModel::Static { sigma2_eps, .. } => Ok(v / sigma2_eps.sqrt()),
            MatrixNormalModel::TimeAveraged { gamma_obs, factor } => {
                if v.len() != gamma_obs.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: gamma_obs.nrows(),
                        got: v.len(),
                        context: "time-averaged data vector",
                    });
                }
                let mut half = v.clone();
                factor.lower().solve_lower_triangular_mut(&mut half);
                Ok(half)
            }
            MatrixNormalModel::Stgp {
                factor_x, factor_t, ..
            } => {
                let r = self.reshape(v, "stgp data vector")?;
                // tr[Ct^-1 R' Cx^-1 R] = ||Lx^-1 R Lt^-T||_F^2
                let mut w = r;
                factor_x.lower().solve_lower_triangular_mut(&mut w);
                let mut z = w.transpose();
                factor_t.lower().solve_lower_triangular_mut(&mut z);
                Ok(DVector::from_column_slice(z.as_slice()))
            }
        }
    }

    /// `Gamma^{-1} r` for the flattened residual.
    pub fn grad_vec(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            MatrixNormalModel::Static { sigma2_eps, .. } => Ok(r / *sigma2_eps),
            MatrixNormalModel::TimeAveraged { gamma_obs, factor } => {
                if r.len() != gamma_obs.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: gamma_obs.nrows(),
                        got: r.len(),
                        context: "time-averaged residual",
                    });
                }
                Ok(factor.solve_vec(r))
            }
            MatrixNormalModel::Stgp {
                factor_x, factor_t, ..
            } => {
                let m = self.reshape(r, "stgp residual")?;
                // Cx^-1 R Ct^-1, using Ct symmetry.
                let a = factor_x.solve_mat(&m);
                let g = factor_t.solve_mat(&a.transpose()).transpose();
                Ok(DVector::from_column_slice(g.as_slice()))
            }
        }
    }

    /// Draw one noise vector with covariance `Gamma` (used by the stochastic
    /// ensemble inversion variant).
    pub fn sample_noise<R: Rng>(&self, len: usize, rng: &mut R) -> Result<DVector<f64>> {
        if let Some(d) = self.data_dim() {
            if d != len {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: len,
                    context: "noise length",
                });
            }
        }
        let xi = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
        match self {
            MatrixNormalModel::Static { sigma2_eps, .. } => Ok(xi * sigma2_eps.sqrt()),
            MatrixNormalModel::TimeAveraged { factor, .. } => Ok(factor.apply_lower(&xi)),
            MatrixNormalModel::Stgp {
                factor_x, factor_t, ..
            } => {
                let i = factor_x.dim();
                let j = factor_t.dim();
                let m = DMatrix::from_column_slice(i, j, xi.as_slice());
                let out = factor_x.lower() * m * factor_t.lower().transpose();
                Ok(DVector::from_column_slice(out.as_slice()))
            }
        }
    }

    /// Potential of matrix-shaped observations against a matrix-shaped mean.
    /// The time-averaged model reduces both to row means first.
    pub fn potential_matrix(&self, y: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
        if y.shape() != m.shape() {
            return Err(Error::DimensionMismatch {
                expected: y.ncols(),
                got: m.ncols(),
                context: "potential mean shape",
            });
        }
        let r = y - m;
        match self {
            MatrixNormalModel::TimeAveraged { .. } => {
                let j = r.ncols() as f64;
                let means = DVector::from_fn(r.nrows(), |i, _| r.row(i).sum() / j);
                self.potential_vec(&means)
            }
            _ => self.potential_vec(&DVector::from_column_slice(r.as_slice())),
        }
    }

    pub fn stgp_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>, &CholeskyFactor, &CholeskyFactor)> {
        match self {
            MatrixNormalModel::Stgp {
                c_x,
                c_t,
                factor_x,
                factor_t,
            } => Some((c_x, c_t, factor_x, factor_t)),
            _ => None,
        }
    }
}

fn check_same_shape(y: &TrajectoryMatrix, m: &TrajectoryMatrix) -> Result<()> {
    if y.values.shape() != m.values.shape() {
        return Err(Error::DimensionMismatch {
            expected: y.n_times(),
            got: m.n_times(),
            context: "trajectory shapes",
        });
    }
    Ok(())
}

/// Static potential `||Y - M||_F^2 / (2 sigma_eps^2)`.
pub fn potential_static(y: &TrajectoryMatrix, m: &TrajectoryMatrix, sigma2_eps: f64) -> Result<f64> {
    check_same_shape(y, m)?;
    if !(sigma2_eps > 0.0 && sigma2_eps.is_finite()) {
        return Err(Error::InvalidArgument("sigma2_eps must be > 0".into()));
    }
    Ok(0.5 * (&y.values - &m.values).norm_squared() / sigma2_eps)
}

/// Time-averaged potential `r' Gamma_obs^{-1} r / 2` with
/// `r = rowmean(Y) - rowmean(M)`.
pub fn potential_time_averaged(
    y: &TrajectoryMatrix,
    m: &TrajectoryMatrix,
    gamma_obs: &DMatrix<f64>,
) -> Result<f64> {
    check_same_shape(y, m)?;
    if gamma_obs.nrows() != y.n_components() {
        return Err(Error::DimensionMismatch {
            expected: y.n_components(),
            got: gamma_obs.nrows(),
            context: "Gamma_obs",
        });
    }
    let factor = cholesky(gamma_obs, None)
        .map_err(|_| Error::Singular("Gamma_obs is not positive definite".into()))?;
    let r = time_average(y) - time_average(m);
    Ok(0.5 * factor.inv_quad(&r))
}

/// STGP potential `tr[Ct^{-1} (Y-M)' Cx^{-1} (Y-M)] / 2` via Cholesky solves.
pub fn potential_stgp(
    y: &TrajectoryMatrix,
    m: &TrajectoryMatrix,
    c_x: &DMatrix<f64>,
    c_t: &DMatrix<f64>,
) -> Result<f64> {
    check_same_shape(y, m)?;
    if c_x.nrows() != y.n_components() {
        return Err(Error::DimensionMismatch {
            expected: y.n_components(),
            got: c_x.nrows(),
            context: "C_x",
        });
    }
    if c_t.nrows() != y.n_times() {
        return Err(Error::DimensionMismatch {
            expected: y.n_times(),
            got: c_t.nrows(),
            context: "C_t",
        });
    }
    let model = MatrixNormalModel::stgp(c_x.clone(), c_t.clone())?;
    model.potential_matrix(&y.values, &m.values)
}

/// Maximum-likelihood scalar variance of the separable kernel:
/// `tr[Rt^{-1} (Y-M)' Rx^{-1} (Y-M)] / (I J)` for unit-diagonal correlation
/// matrices. Returns the floor `1e-12` when the residual vanishes.
pub fn estimate_stgp_variance(
    y: &TrajectoryMatrix,
    m: &TrajectoryMatrix,
    r_x: &DMatrix<f64>,
    r_t: &DMatrix<f64>,
) -> Result<f64> {
    check_same_shape(y, m)?;
    for (name, r) in [("R_x", r_x), ("R_t", r_t)] {
        if r.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-2) {
            return Err(Error::InvalidArgument(format!(
                "{name} must have unit diagonal"
            )));
        }
    }
    let model = MatrixNormalModel::stgp(r_x.clone(), r_t.clone())?;
    let quad = 2.0 * model.potential_matrix(&y.values, &m.values)?;
    let n = (y.n_components() * y.n_times()) as f64;
    Ok((quad / n).max(1e-12))
}

/// Grand variance of the trajectory around its row means; the default static
/// noise level for the chaotic benchmarks.
pub fn centered_grand_variance(y: &TrajectoryMatrix) -> f64 {
    let means = time_average(y);
    let mut acc = 0.0;
    for j in 0..y.n_times() {
        for i in 0..y.n_components() {
            let d = y.values[(i, j)] - means[i];
            acc += d * d;
        }
    }
    acc / (y.n_components() * y.n_times()) as f64
}

/// Configuration of the separable space-time kernel.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StgpConfig {
    pub ell_x: f64,
    pub ell_t: f64,
    pub jitter: f64,
    /// Joint variance; `None` estimates it from the data.
    pub variance: Option<f64>,
}

impl Default for StgpConfig {
    fn default() -> Self {
        StgpConfig {
            ell_x: 0.4,
            ell_t: 0.1,
            jitter: 1e-6,
            variance: None,
        }
    }
}

/// An STGP data model plus the kernel metadata needed to extend the temporal
/// covariance beyond the observation window (posterior prediction).
#[derive(Debug, Clone)]
pub struct StgpModel {
    pub model: MatrixNormalModel,
    /// Estimated (or supplied) joint variance; each kernel carries its
    /// square root.
    pub sigma2: f64,
    pub config: StgpConfig,
    t_start: f64,
    t_span: f64,
    times_normalized: Vec<f64>,
}

impl StgpModel {
    /// Normalized coordinate of a (possibly out-of-window) time.
    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.t_start) / self.t_span
    }

    /// Cross-covariance `k_t(t_star, t_j)` against the observation times and
    /// the marginal variance `k_t(t_star, t_star)`.
    pub fn temporal_cross(&self, t_star: f64) -> (DVector<f64>, f64) {
        let sigma_each = self.sigma2.sqrt();
        let tau = self.normalize_time(t_star);
        let ell2 = 2.0 * self.config.ell_t * self.config.ell_t;
        let cross = DVector::from_fn(self.times_normalized.len(), |j, _| {
            let d = tau - self.times_normalized[j];
            sigma_each * (-d * d / ell2).exp()
        });
        (cross, sigma_each * (1.0 + self.config.jitter))
    }
}

/// Build the STGP model for an observed trajectory, estimating the joint
/// variance from the time-centered data unless one is supplied.
pub fn build_stgp_model(y: &TrajectoryMatrix, cfg: &StgpConfig) -> Result<StgpModel> {
    let tau = normalize_times(&y.times);
    let xs = unit_grid(y.n_components());
    let r_x = build_kernel_matrix(&xs, &KernelSpec::squared_exponential(cfg.ell_x, 1.0, cfg.jitter))?;
    let r_t = build_kernel_matrix(&tau, &KernelSpec::squared_exponential(cfg.ell_t, 1.0, cfg.jitter))?;
    let sigma2 = match cfg.variance {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(_) => return Err(Error::InvalidArgument("stgp variance must be > 0".into())),
        None => {
            let means = time_average(y);
            let mut mean_mat = DMatrix::zeros(y.n_components(), y.n_times());
            for j in 0..y.n_times() {
                for i in 0..y.n_components() {
                    mean_mat[(i, j)] = means[i];
                }
            }
            let m = TrajectoryMatrix::new(mean_mat, y.times.clone(), y.component_labels.clone())?;
            estimate_stgp_variance(y, &m, &r_x, &r_t)?
        }
    };
    let sigma_each = sigma2.sqrt();
    let model = MatrixNormalModel::stgp(&r_x * sigma_each, &r_t * sigma_each)?;
    Ok(StgpModel {
        model,
        sigma2,
        config: *cfg,
        t_start: y.times[0],
        t_span: y.times[y.times.len() - 1] - y.times[0],
        times_normalized: tau,
    })
}

/// Build the static model, defaulting the noise level to the grand variance
/// of the centered observed trajectory.
pub fn build_static_model(
    y: &TrajectoryMatrix,
    sigma2_override: Option<f64>,
) -> Result<(MatrixNormalModel, f64)> {
    let sigma2 = match sigma2_override {
        Some(v) => v,
        None => centered_grand_variance(y),
    };
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(
            "static noise variance must be > 0 (constant trajectory?)".into(),
        ));
    }
    Ok((MatrixNormalModel::static_model(y.n_components(), sigma2)?, sigma2))
}

/// Build the time-averaged model from the (augmented) true trajectory.
pub fn build_time_averaged_model(y_aug: &TrajectoryMatrix, jitter: f64) -> Result<MatrixNormalModel> {
    let gamma = crate::dynamics::estimate_gamma_obs(y_aug, jitter)?;
    MatrixNormalModel::time_averaged(gamma)
}
