//! Property-based invariants over randomized inputs.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stip_core::dynamics::TrajectoryMatrix;
use stip_core::likelihood::{
    build_kernel_matrix, potential_static, potential_stgp, potential_time_averaged, KernelSpec,
};
use stip_core::linalg::{cholesky, kron, min_eig, sym_sqrt};
use stip_core::prior::LogNormalPrior;

fn traj(values: DMatrix<f64>) -> TrajectoryMatrix {
    let times: Vec<f64> = (0..values.ncols()).map(|j| j as f64).collect();
    let labels = (0..values.nrows()).map(|i| format!("c{i}")).collect();
    TrajectoryMatrix::new(values, times, labels).unwrap()
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix_strategy(n, n).prop_map(move |m| &m * m.transpose() + DMatrix::identity(n, n) * 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stgp_trace_form_matches_kronecker_form(
        y in matrix_strategy(3, 4),
        m in matrix_strategy(3, 4),
        c_x in spd_strategy(3),
        c_t in spd_strategy(4),
    ) {
        let yt = traj(y);
        let mt = traj(m);
        let got = potential_stgp(&yt, &mt, &c_x, &c_t).unwrap();
        let big = kron(&c_t, &c_x);
        let r = DVector::from_column_slice((&yt.values - &mt.values).as_slice());
        let want = 0.5 * r.dot(&big.lu().solve(&r).unwrap());
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn potentials_are_nonnegative_and_quadratic(
        y in matrix_strategy(3, 5),
        m in matrix_strategy(3, 5),
        gamma in spd_strategy(3),
        scale in 1.1f64..4.0,
    ) {
        let yt = traj(y.clone());
        let mt = traj(m.clone());
        let scaled = traj(&m + (&y - &m) * scale);

        let p = potential_static(&yt, &mt, 1.7).unwrap();
        let p_scaled = potential_static(&scaled, &mt, 1.7).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!((p_scaled - scale * scale * p).abs() <= 1e-9 * p_scaled.max(1.0));

        let p = potential_time_averaged(&yt, &mt, &gamma).unwrap();
        let p_scaled = potential_time_averaged(&scaled, &mt, &gamma).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!((p_scaled - scale * scale * p).abs() <= 1e-8 * p_scaled.max(1.0));
    }

    #[test]
    fn potential_zero_iff_equal(
        y in matrix_strategy(2, 3),
        c_x in spd_strategy(2),
        c_t in spd_strategy(3),
    ) {
        let yt = traj(y.clone());
        prop_assert_eq!(potential_stgp(&yt, &yt, &c_x, &c_t).unwrap(), 0.0);
        let mut shifted = y.clone();
        shifted[(0, 0)] += 0.5;
        let st = traj(shifted);
        prop_assert!(potential_stgp(&yt, &st, &c_x, &c_t).unwrap() > 0.0);
    }

    #[test]
    fn whiten_round_trip(
        mu in proptest::collection::vec(-2.0f64..3.0, 3),
        sigma in proptest::collection::vec(0.05f64..1.0, 3),
        xi in proptest::collection::vec(-3.0f64..3.0, 3),
    ) {
        let prior = LogNormalPrior::new(mu, sigma).unwrap();
        let v = DVector::from_vec(xi);
        let u = prior.unwhiten(&v);
        let back = prior.whiten(&u).unwrap();
        prop_assert!((back - &v).norm() < 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn kernels_are_positive_definite(
        points in proptest::collection::vec(0.0f64..1.0, 2..12),
        lengthscale in 0.05f64..2.0,
        variance in 0.1f64..5.0,
    ) {
        let spec = KernelSpec::squared_exponential(lengthscale, variance, 1e-6);
        let k = build_kernel_matrix(&points, &spec).unwrap();
        prop_assert!(min_eig(&k).unwrap() > 0.0);
    }

    #[test]
    fn sym_sqrt_squares_back(a in spd_strategy(4)) {
        let s = sym_sqrt(&a).unwrap();
        prop_assert!(((&s * &s) - &a).norm() <= 1e-9 * a.norm());
    }

    #[test]
    fn cholesky_solves_random_systems(
        a in spd_strategy(5),
        b in proptest::collection::vec(-3.0f64..3.0, 5),
    ) {
        let rhs = DVector::from_vec(b);
        let f = cholesky(&a, None).unwrap();
        let x = f.solve_vec(&rhs);
        prop_assert!((&a * x - &rhs).norm() <= 1e-9 * rhs.norm().max(1.0));
    }
}
