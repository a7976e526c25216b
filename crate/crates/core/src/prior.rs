//! Log-normal priors over physical parameters with the whitened
//! representation used by every inference algorithm.
//!
//! All samplers and ensemble methods operate on `v = (log u - mu0) / sigma0`,
//! which is standard normal under the prior; forward evaluation maps back
//! with `u = exp(mu0 + sigma0 * v)`. This keeps physical parameters positive
//! and makes the Gaussian-prior assumptions of the ensemble sampler and pCN
//! exact.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::ParameterVector;
use crate::error::{Error, Result};

/// Componentwise log-normal prior `log u ~ N(mu0, diag(sigma0^2))`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogNormalPrior {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl LogNormalPrior {
    pub fn new(mu0: Vec<f64>, sigma0: Vec<f64>) -> Result<Self> {
        if mu0.len() != sigma0.len() {
            return Err(Error::DimensionMismatch {
                expected: mu0.len(),
                got: sigma0.len(),
                context: "prior sigma0",
            });
        }
        if mu0.is_empty() {
            return Err(Error::InvalidArgument("prior must have p >= 1".into()));
        }
        if sigma0.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma0 must be strictly positive".into()));
        }
        if mu0.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mu0 must be finite".into()));
        }
        Ok(LogNormalPrior { mu0, sigma0 })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Draw `n` physical parameter vectors `u = exp(mu0 + sigma0 * xi)`.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<ParameterVector> {
        (0..n)
            .map(|_| {
                let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                self.unwhiten(&xi)
            })
            .collect()
    }

    /// `v = (log u - mu0) / sigma0`; requires strictly positive `u`.
    pub fn whiten(&self, u: &ParameterVector) -> Result<DVector<f64>> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
                context: "whiten",
            });
        }
        if u.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidArgument(
                "whiten requires strictly positive parameters".into(),
            ));
        }
        Ok(DVector::from_fn(self.dim(), |i, _| {
            (u[i].ln() - self.mu0[i]) / self.sigma0[i]
        }))
    }

    /// Exact inverse of [`whiten`](Self::whiten).
    pub fn unwhiten(&self, v: &DVector<f64>) -> ParameterVector {
        DVector::from_fn(self.dim(), |i, _| {
            (self.mu0[i] + self.sigma0[i] * v[i]).exp()
        })
    }

    /// Whitened-space prior log-density `-||v||^2 / 2`, additive constant
    /// dropped.
    pub fn log_density_whitened(&self, v: &DVector<f64>) -> f64 {
        -0.5 * v.norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lorenz_benchmark_prior() -> LogNormalPrior {
        LogNormalPrior::new(vec![2.0, 1.2, 3.3], vec![0.2, 0.5, 0.15]).unwrap()
    }

    #[test]
    fn degenerate_prior_collapses_to_median() {
        let prior = LogNormalPrior::new(vec![2.0, 1.2, 3.3], vec![1e-12, 1e-12, 1e-12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for u in prior.sample(&mut rng, 20) {
            for (ui, mi) in u.iter().zip(&prior.mu0) {
                assert!((ui - mi.exp()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn empirical_median_matches_exp_mu0() {
        let prior = lorenz_benchmark_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let samples = prior.sample(&mut rng, n);
        for i in 0..3 {
            let mut comp: Vec<f64> = samples.iter().map(|u| u[i]).collect();
            comp.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = comp[n / 2];
            let want = prior.mu0[i].exp();
            assert!(
                (median - want).abs() / want < 0.02,
                "component {i}: median {median} vs {want}"
            );
        }
    }

    #[test]
    fn samples_are_strictly_positive() {
        let prior = lorenz_benchmark_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(prior
            .sample(&mut rng, 1000)
            .iter()
            .all(|u| u.iter().all(|x| *x > 0.0)));
    }

    #[test]
    fn whiten_unwhiten_examples() {
        let prior = lorenz_benchmark_prior();
        let median = DVector::from_vec(vec![2.0f64.exp(), 1.2f64.exp(), 3.3f64.exp()]);
        let v = prior.whiten(&median).unwrap();
        assert!(v.norm() < 1e-12);
        let back = prior.unwhiten(&DVector::zeros(3));
        for (b, w) in back.iter().zip(median.iter()) {
            assert!((b - w).abs() < 1e-12 * w);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let prior = lorenz_benchmark_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for u in prior.sample(&mut rng, 100) {
            let v = prior.whiten(&u).unwrap();
            let back = prior.unwhiten(&v);
            for (b, orig) in back.iter().zip(u.iter()) {
                assert!((b - orig).abs() < 1e-12 * orig.abs().max(1.0));
            }
        }
    }

    #[test]
    fn whiten_rejects_nonpositive() {
        let prior = lorenz_benchmark_prior();
        assert!(prior.whiten(&DVector::from_vec(vec![1.0, -0.5, 2.0])).is_err());
        assert!(prior.whiten(&DVector::from_vec(vec![1.0, 0.0, 2.0])).is_err());
    }

    #[test]
    fn log_density_examples() {
        let prior = lorenz_benchmark_prior();
        assert_eq!(prior.log_density_whitened(&DVector::zeros(3)), 0.0);
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(prior.log_density_whitened(&v), -0.5);
    }

    #[test]
    fn log_density_gradient_matches_finite_differences() {
        // The gradient of -||v||^2/2 is -v.
        let prior = lorenz_benchmark_prior();
        let v = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let h = 1e-6;
        for i in 0..3 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += h;
            vm[i] -= h;
            let fd =
                (prior.log_density_whitened(&vp) - prior.log_density_whitened(&vm)) / (2.0 * h);
            assert!((fd + v[i]).abs() < 1e-6, "component {i}: {fd} vs {}", -v[i]);
        }
    }

    #[test]
    fn whitened_samples_are_standard_normal() {
        let prior = lorenz_benchmark_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let samples = prior.sample(&mut rng, n);
        for i in 0..3 {
            let vs: Vec<f64> = samples
                .iter()
                .map(|u| prior.whiten(u).unwrap()[i])
                .collect();
            let mean = vs.iter().sum::<f64>() / n as f64;
            let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn constructor_validates() {
        assert!(LogNormalPrior::new(vec![1.0], vec![0.0]).is_err());
        assert!(LogNormalPrior::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(LogNormalPrior::new(vec![], vec![]).is_err());
    }
}
