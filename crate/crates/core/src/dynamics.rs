//! Chaotic ODE systems, fixed-step RK4 integration, and windowed
//! spatiotemporal observations.
//!
//! The three built-in systems are observed on `J` equally spaced times in
//! `[t0, t0 + T]` after integrating through the spin-up `[0, t0]` at the same
//! nominal step. The requested step `h` is snapped down per segment so that
//! every observation time lands exactly on the integrator grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Physical parameter vector of a system (length 3 for all built-ins).
pub type ParameterVector = DVector<f64>;

/// Any state with a component beyond this magnitude counts as a blow-up.
pub const BLOWUP_LIMIT: f64 = 1e8;

/// Built-in chaotic systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Lorenz63,
    Rossler,
    Chen,
}

impl SystemName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemName::Lorenz63 => "lorenz63",
            SystemName::Rossler => "rossler",
            SystemName::Chen => "chen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lorenz63" => Ok(SystemName::Lorenz63),
            "rossler" => Ok(SystemName::Rossler),
            "chen" => Ok(SystemName::Chen),
            other => Err(Error::InvalidArgument(format!("unknown system {other:?}"))),
        }
    }
}

/// One of the built-in first-order systems `dx/dt = f(x; u)`.
#[derive(Debug, Clone, Copy)]
pub struct OdeSystem {
    pub name: SystemName,
}

impl OdeSystem {
    pub fn new(name: SystemName) -> Self {
        OdeSystem { name }
    }

    pub fn lorenz63() -> Self {
        Self::new(SystemName::Lorenz63)
    }

    pub fn rossler() -> Self {
        Self::new(SystemName::Rossler)
    }

    pub fn chen() -> Self {
        Self::new(SystemName::Chen)
    }

    pub fn dimension(&self) -> usize {
        3
    }

    /// Vector field `f(state; u)`.
    ///
    /// Parameter conventions: Lorenz63 `u = (sigma, rho, beta)`,
    /// Rossler and Chen `u = (a, b, c)`.
    pub fn eval_rhs(&self, state: &[f64], u: &ParameterVector) -> Result<Vec<f64>> {
        if state.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: state.len(),
                context: "eval_rhs state",
            });
        }
        if u.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: u.len(),
                context: "eval_rhs parameters",
            });
        }
        let mut out = vec![0.0; 3];
        rhs_builtin(self.name, [u[0], u[1], u[2]], state, &mut out);
        Ok(out)
    }

    /// Bind parameters, producing an integrable field.
    pub fn field(&self, u: &ParameterVector) -> Result<SystemField> {
        if u.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: u.len(),
                context: "system parameters",
            });
        }
        Ok(SystemField {
            name: self.name,
            params: [u[0], u[1], u[2]],
        })
    }
}

fn rhs_builtin(name: SystemName, p: [f64; 3], s: &[f64], out: &mut [f64]) {
    let (x, y, z) = (s[0], s[1], s[2]);
    match name {
        SystemName::Lorenz63 => {
            let (sigma, rho, beta) = (p[0], p[1], p[2]);
            out[0] = sigma * (y - x);
            out[1] = x * (rho - z) - y;
            out[2] = x * y - beta * z;
        }
        SystemName::Rossler => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = -y - z;
            out[1] = x + a * y;
            out[2] = b + z * (x - c);
        }
        SystemName::Chen => {
            let (a, b, c) = (p[0], p[1], p[2]);
            out[0] = a * (y - x);
            out[1] = (c - a) * x - x * z + c * y;
            out[2] = x * y - b * z;
        }
    }
}

/// A first-order vector field that the integrator can advance.
pub trait VectorField {
    fn dimension(&self) -> usize;
    fn rhs(&self, t: f64, state: &[f64], out: &mut [f64]);
}

/// A built-in system with bound parameters.
#[derive(Debug, Clone, Copy)]
pub struct SystemField {
    name: SystemName,
    params: [f64; 3],
}

impl VectorField for SystemField {
    fn dimension(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, state: &[f64], out: &mut [f64]) {
        rhs_builtin(self.name, self.params, state, out);
    }
}

/// Observation window: `J` equally spaced times in `[t0, t0 + T]`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ObservationConfig {
    /// Spin-up time discarded before the window opens.
    pub t0: f64,
    /// Window length `T`.
    pub window: f64,
    /// Number of observation times `J`.
    pub n_times: usize,
    /// Nominal integrator step `h`; snapped down per segment so observation
    /// times land exactly on the grid.
    pub step: f64,
    /// Initial state at `t = 0`.
    pub x0: Vec<f64>,
}

impl ObservationConfig {
    pub fn validate(&self, dimension: usize) -> Result<()> {
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return Err(Error::InvalidArgument("t0 must be >= 0".into()));
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(Error::InvalidArgument("window T must be > 0".into()));
        }
        if self.n_times < 2 {
            return Err(Error::InvalidArgument("J must be >= 2".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument("step h must be > 0".into()));
        }
        if self.x0.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                got: self.x0.len(),
                context: "initial state",
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("x0 must be finite".into()));
        }
        Ok(())
    }

    /// Observation times `t_j = t0 + T * j / (J - 1)`.
    pub fn observation_times(&self) -> Vec<f64> {
        let last = (self.n_times - 1) as f64;
        (0..self.n_times)
            .map(|j| self.t0 + self.window * (j as f64) / last)
            .collect()
    }
}

/// `I x J` matrix of observed state components at the observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMatrix {
    pub values: DMatrix<f64>,
    pub times: Vec<f64>,
    pub component_labels: Vec<String>,
}

impl TrajectoryMatrix {
    pub fn new(values: DMatrix<f64>, times: Vec<f64>, component_labels: Vec<String>) -> Result<Self> {
        if values.ncols() != times.len() {
            return Err(Error::DimensionMismatch {
                expected: values.ncols(),
                got: times.len(),
                context: "trajectory times",
            });
        }
        if values.nrows() != component_labels.len() {
            return Err(Error::DimensionMismatch {
                expected: values.nrows(),
                got: component_labels.len(),
                context: "trajectory labels",
            });
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs >= 1 time".into()));
        }
        if times.len() > 1 {
            let dt0 = times[1] - times[0];
            if dt0 <= 0.0 {
                return Err(Error::InvalidArgument("times must increase".into()));
            }
            let tol = 1e-9 * dt0.abs().max(1.0);
            for w in times.windows(2) {
                let dt = w[1] - w[0];
                if dt <= 0.0 || (dt - dt0).abs() > tol {
                    return Err(Error::InvalidArgument(
                        "times must be strictly increasing and equally spaced".into(),
                    ));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("trajectory has non-finite entries".into()));
        }
        Ok(TrajectoryMatrix {
            values,
            times,
            component_labels,
        })
    }

    pub fn n_components(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    /// Column-major flattening, matching the `V (x) U` covariance convention.
    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    /// CSV with a `time,<labels>` header, one row per observation time,
    /// 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time");
        for label in &self.component_labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for j in 0..self.n_times() {
            out.push_str(&format!("{:.16e}", self.times[j]));
            for i in 0..self.n_components() {
                out.push_str(&format!(",{:.16e}", self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    /// Add iid Gaussian observation noise (off by default in the pipeline).
    pub fn add_noise<R: Rng>(&mut self, std: f64, rng: &mut R) -> Result<()> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::InvalidArgument("noise std must be >= 0".into()));
        }
        if std > 0.0 {
            for v in self.values.iter_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(())
    }
}

fn default_labels(dim: usize) -> Vec<String> {
    if dim == 3 {
        vec!["x".into(), "y".into(), "z".into()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    }
}

struct Rk4Buffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Buffers {
    fn new(dim: usize) -> Self {
        Rk4Buffers {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Advance `state` from `t_start` over `n_steps` equal classical RK4 steps of
/// size `(t_end - t_start) / n_steps`, guarding against blow-up.
fn rk4_span<F: VectorField>(
    field: &F,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    state: &mut [f64],
    bufs: &mut Rk4Buffers,
) -> Result<()> {
    let h = (t_end - t_start) / n_steps as f64;
    let dim = state.len();
    for step in 0..n_steps {
        let t = t_start + h * step as f64;
        field.rhs(t, state, &mut bufs.k1);
        for i in 0..dim {
            bufs.tmp[i] = state[i] + 0.5 * h * bufs.k1[i];
        }
        field.rhs(t + 0.5 * h, &bufs.tmp, &mut bufs.k2);
        for i in 0..dim {
            bufs.tmp[i] = state[i] + 0.5 * h * bufs.k2[i];
        }
        field.rhs(t + 0.5 * h, &bufs.tmp, &mut bufs.k3);
        for i in 0..dim {
            bufs.tmp[i] = state[i] + h * bufs.k3[i];
        }
        field.rhs(t + h, &bufs.tmp, &mut bufs.k4);
        for i in 0..dim {
            state[i] += h / 6.0 * (bufs.k1[i] + 2.0 * bufs.k2[i] + 2.0 * bufs.k3[i] + bufs.k4[i]);
        }
        if state.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
            return Err(Error::Divergence { t_last: t });
        }
    }
    Ok(())
}

fn segment_steps(span: f64, h: f64) -> usize {
    ((span / h) - 1e-9).ceil().max(1.0) as usize
}

/// Integrate `field` from `x0` over `[0, t0 + T]` with fixed-step RK4 and
/// return the observed window.
///
/// The spin-up `[0, t0]` is integrated at the same nominal step and
/// discarded. Within the window, each inter-observation interval is covered
/// by `ceil(interval / h)` equal substeps, so the effective step never
/// exceeds `h` and observation times are hit exactly.
pub fn integrate<F: VectorField>(field: &F, cfg: &ObservationConfig) -> Result<TrajectoryMatrix> {
    let state = state_at_window_start(field, cfg)?;
    integrate_window(field, &state, cfg)
}

/// State at `t0` after integrating the spin-up from `x0`.
pub fn state_at_window_start<F: VectorField>(
    field: &F,
    cfg: &ObservationConfig,
) -> Result<Vec<f64>> {
    let dim = field.dimension();
    cfg.validate(dim)?;
    let mut state = cfg.x0.clone();
    if cfg.t0 > 0.0 {
        let mut bufs = Rk4Buffers::new(dim);
        let n_spin = segment_steps(cfg.t0, cfg.step);
        rk4_span(field, 0.0, cfg.t0, n_spin, &mut state, &mut bufs)?;
    }
    Ok(state)
}

/// Integrate the observation window `[t0, t0 + T]` only, starting from a
/// known state at `t0`.
///
/// This is the forward map of the identification problem once the window
/// start state is part of the data: repeated evaluations share the state and
/// vary only the parameters.
pub fn integrate_window<F: VectorField>(
    field: &F,
    state_at_t0: &[f64],
    cfg: &ObservationConfig,
) -> Result<TrajectoryMatrix> {
    let dim = field.dimension();
    cfg.validate(dim)?;
    if state_at_t0.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: state_at_t0.len(),
            context: "window start state",
        });
    }
    let times = cfg.observation_times();
    let mut state = state_at_t0.to_vec();
    let mut bufs = Rk4Buffers::new(dim);
    let mut values = DMatrix::zeros(dim, cfg.n_times);
    for i in 0..dim {
        values[(i, 0)] = state[i];
    }
    for j in 1..cfg.n_times {
        let (a, b) = (times[j - 1], times[j]);
        let n_sub = segment_steps(b - a, cfg.step);
        rk4_span(field, a, b, n_sub, &mut state, &mut bufs)?;
        for i in 0..dim {
            values[(i, j)] = state[i];
        }
    }
    TrajectoryMatrix::new(values, times, default_labels(dim))
}

/// Second-order augmentation of a 3-component trajectory:
/// rows `(x, y, z, x^2, y^2, z^2, xy, xz, yz)`.
pub fn augment_second_order(x: &TrajectoryMatrix) -> Result<TrajectoryMatrix> {
    if x.n_components() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: x.n_components(),
            context: "augment_second_order",
        });
    }
    let j = x.n_times();
    let mut values = DMatrix::zeros(9, j);
    for col in 0..j {
        let (a, b, c) = (x.values[(0, col)], x.values[(1, col)], x.values[(2, col)]);
        let aug = [a, b, c, a * a, b * b, c * c, a * b, a * c, b * c];
        for (row, v) in aug.iter().enumerate() {
            values[(row, col)] = *v;
        }
    }
    let labels = ["x", "y", "z", "x2", "y2", "z2", "xy", "xz", "yz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    TrajectoryMatrix::new(values, x.times.clone(), labels)
}

/// Row means `X 1_J / J`.
pub fn time_average(x: &TrajectoryMatrix) -> DVector<f64> {
    let j = x.n_times() as f64;
    let mut out = DVector::zeros(x.n_components());
    for i in 0..x.n_components() {
        out[i] = x.values.row(i).sum() / j;
    }
    out
}

/// Empirical covariance of the time-averaged observable:
/// `X [I_J - 1 1'/J] X'` plus `jitter * mean(diag)` loading.
///
/// The result must pass a Cholesky factorization; a constant trajectory with
/// zero jitter is singular.
pub fn estimate_gamma_obs(x_truth: &TrajectoryMatrix, jitter: f64) -> Result<DMatrix<f64>> {
    if x_truth.n_times() < 2 {
        return Err(Error::InvalidArgument("gamma_obs needs J >= 2".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidArgument("jitter must be >= 0".into()));
    }
    let i = x_truth.n_components();
    let means = time_average(x_truth);
    let mut centered = x_truth.values.clone();
    for col in 0..centered.ncols() {
        for row in 0..i {
            centered[(row, col)] -= means[row];
        }
    }
    let mut gamma = &centered * centered.transpose();
    // Symmetrize away rounding before the definiteness check.
    gamma = (&gamma + gamma.transpose()) * 0.5;
    let mean_diag = gamma.diagonal().sum() / i as f64;
    for d in 0..i {
        gamma[(d, d)] += jitter * mean_diag;
    }
    linalg::cholesky(&gamma, None)
        .map_err(|_| Error::Singular("gamma_obs is not positive definite".into()))?;
    Ok(gamma)
}
