//! Bayesian inverse problems with spatiotemporal observations of chaotic
//! dynamics.
//!
//! The crate covers the full calibration-emulation-sampling pipeline:
//!
//! * [`dynamics`] - the Lorenz63/Rossler/Chen systems, RK4 integration, and
//!   windowed observations;
//! * [`likelihood`] - matrix-normal potentials (static, time-averaged,
//!   spatiotemporal GP) plus kernels;
//! * [`prior`] - log-normal priors and the whitened parameterization;
//! * [`calibrate`] - ensemble Kalman inversion/sampling with history capture;
//! * [`emulate`] - GP emulation of the forward map over whitened parameters;
//! * [`sample`] - pCN and one-step Langevin MCMC on (emulated) potentials;
//! * [`analyze`] - error metrics, Fisher-information order checks, and
//!   forward/posterior prediction;
//! * [`linalg`] - shared factorizations with uniform jitter semantics.

pub mod analyze;
pub mod calibrate;
pub mod dynamics;
pub mod emulate;
pub mod error;
pub mod likelihood;
pub mod linalg;
pub mod prior;
pub mod sample;

pub use analyze::{
    check_loewner, fisher_matrix, predict_forward, predict_posterior_stgp, rem, verify_theorem_1,
    verify_theorem_2, FisherSpec, ForwardPrediction, LoewnerCheck, PosteriorPrediction,
    TheoremReport,
};
pub use calibrate::{
    eki_step, eks_step, run_enk, ChaoticForward, EnkConfig, EnkHistory, EnkMethod, EnkProblem,
    Ensemble, ForwardMap, ForwardOutput, StepRule,
};
pub use dynamics::{
    augment_second_order, estimate_gamma_obs, integrate, time_average, ObservationConfig,
    OdeSystem, ParameterVector, SystemName, TrajectoryMatrix, VectorField,
};
pub use emulate::{emulated_potential, fit as fit_emulator, EmulatedPotential, GpEmulator, GpHyper};
pub use error::{Error, Result};
pub use likelihood::{
    build_kernel_matrix, build_static_model, build_stgp_model, build_time_averaged_model,
    estimate_stgp_variance, potential_static, potential_stgp, potential_time_averaged, KernelSpec,
    LikelihoodKind, MatrixNormalModel, StgpConfig, StgpModel,
};
pub use prior::LogNormalPrior;
pub use sample::{
    inf_mala_step, pcn_step, run_chain, ChainConfig, PosteriorChain, Potential, Sampler,
};
