//! Shared fixtures for the pipeline benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stip_core::dynamics::{
    integrate_window, state_at_window_start, ObservationConfig, OdeSystem, TrajectoryMatrix,
};
use stip_core::emulate::{fit, GpEmulator, GpHyper};
use stip_core::likelihood::{build_stgp_model, StgpConfig, StgpModel};

pub fn lorenz_observation() -> ObservationConfig {
    ObservationConfig {
        t0: 100.0,
        window: 10.0,
        n_times: 100,
        step: 0.01,
        x0: vec![1.0, 1.0, 1.0],
    }
}

pub fn lorenz_truth() -> DVector<f64> {
    DVector::from_vec(vec![10.0, 28.0, 8.0 / 3.0])
}

/// Truth window trajectory plus the shared state at the window start.
pub fn lorenz_window() -> (TrajectoryMatrix, Vec<f64>) {
    let system = OdeSystem::lorenz63();
    let cfg = lorenz_observation();
    let field = system.field(&lorenz_truth()).expect("field");
    let start = state_at_window_start(&field, &cfg).expect("spin-up");
    let traj = integrate_window(&field, &start, &cfg).expect("window");
    (traj, start)
}

pub fn lorenz_stgp(traj: &TrajectoryMatrix) -> StgpModel {
    build_stgp_model(
        traj,
        &StgpConfig {
            ell_x: 0.4,
            ell_t: 0.01,
            jitter: 1e-6,
            variance: None,
        },
    )
    .expect("stgp model")
}

/// A small GP emulator over random training data (n x p -> n x q).
pub fn random_emulator(n: usize, p: usize, q: usize, seed: u64) -> GpEmulator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let outputs = DMatrix::from_fn(n, q, |i, j| {
        (inputs[(i, j % p)] * (1.0 + j as f64 / q as f64)).sin()
    });
    fit(&inputs, &outputs, &GpHyper::default()).expect("fit")
}
