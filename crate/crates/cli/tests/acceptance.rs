//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`; the test name itself reports
//! the verdict otherwise).
//!
//! The statistical criteria drive the same pipeline the CLI uses; the
//! command-level criteria exercise the `stip` binary itself.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stip_cli::config::{ExperimentConfig, StepRuleKind};
use stip_cli::pipeline::{repeat_seed, Experiment};
use stip_core::calibrate::EnkMethod;
use stip_core::dynamics::{integrate, integrate_window, ObservationConfig, SystemName};
use stip_core::likelihood::{
    build_kernel_matrix, potential_stgp, potential_time_averaged, KernelSpec, LikelihoodKind,
};
use stip_core::sample::{run_chain, ChainConfig, PosteriorChain, Sampler, WithGradient};
use stip_core::{verify_theorem_1, verify_theorem_2};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn stip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stip"))
}

fn bench_config(
    system: SystemName,
    kind: LikelihoodKind,
    method: EnkMethod,
    ensemble: usize,
) -> ExperimentConfig {
    let mut config = ExperimentConfig::default_for(system);
    config.likelihood.kind = kind;
    config.calibration.method = method;
    config.calibration.ensemble_size = ensemble;
    config.calibration.iterations = 50;
    config.calibration.step_rule = StepRuleKind::Adaptive;
    config.calibration.dt = 2.0;
    config.calibration.dt_cap = Some(0.5);
    config
}

fn best_rems(config: &ExperimentConfig, repeats: usize) -> Vec<f64> {
    let exp = Experiment::build(config.clone()).expect("experiment");
    (0..repeats)
        .map(|r| {
            let history = exp
                .run_calibration(repeat_seed(config.seed, r))
                .expect("calibration");
            assert!(
                history.aborted.is_none(),
                "repeat {r} aborted: {:?}",
                history.aborted
            );
            history.best_rem().expect("rem trace").1
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// 1. Theorem verification: 1000 random small instances per condition, zero
//    Loewner-order violations at tolerance 1e-8, in under a minute.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_01_theorem_verification() {
    let start = Instant::now();
    let t1 = verify_theorem_1(1000, 1001, false).unwrap();
    let t2 = verify_theorem_2(1000, 1002, false).unwrap();
    let violations = t1.total_violations() + t2.total_violations();
    let elapsed = start.elapsed();

    let out = tempfile::tempdir().unwrap();
    let status = stip()
        .args(["fisher", "--trials", "1000", "--seed", "77"])
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();

    report(
        "01 theorem verification",
        violations == 0 && status.success() && elapsed.as_secs() < 60,
        &format!(
            "{} violations across {} comparisons, fisher exit {:?}, {:.2?}",
            violations,
            t1.comparisons.len() + t2.comparisons.len(),
            status.code(),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Potential-form equivalences on random 3x4 instances: the solve-based
//    STGP trace form against a hand-rolled dense Kronecker quadratic form,
//    and the time-averaged mean form against the rank-one trace form.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_02_potential_form_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut traj = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let values = DMatrix::from_fn(i, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        let times: Vec<f64> = (0..j).map(|t| t as f64).collect();
        let labels = (0..i).map(|c| format!("c{c}")).collect();
        stip_core::TrajectoryMatrix::new(values, times, labels).unwrap()
    };
    let spd = |n: usize, rng: &mut ChaCha8Rng| {
        let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.7
    };
    // Dense Kronecker product assembled with explicit loops, independent of
    // the library helper.
    let kron = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        let mut out = DMatrix::zeros(ar * br, ac * bc);
        for i in 0..ar {
            for j in 0..ac {
                for k in 0..br {
                    for l in 0..bc {
                        out[(i * br + k, j * bc + l)] = a[(i, j)] * b[(k, l)];
                    }
                }
            }
        }
        out
    };

    let mut worst_stgp = 0.0f64;
    let mut worst_tavg = 0.0f64;
    for _ in 0..100 {
        let (i, j) = (3usize, 4usize);
        let y = traj(i, j, &mut rng);
        let m = traj(i, j, &mut rng);
        let c_x = spd(i, &mut rng);
        let c_t = spd(j, &mut rng);
        let got = potential_stgp(&y, &m, &c_x, &c_t).unwrap();
        let big = kron(&c_t, &c_x);
        let r = DVector::from_column_slice((&y.values - &m.values).as_slice());
        let want = 0.5 * r.dot(&big.lu().solve(&r).unwrap());
        worst_stgp = worst_stgp.max((got - want).abs() / want.abs().max(1e-30));

        let gamma = spd(i, &mut rng);
        let got = potential_time_averaged(&y, &m, &gamma).unwrap();
        // Trace form tr[(1 1'/J^2) X0' G^-1 X0] / 2 evaluated directly.
        let x0 = &y.values - &m.values;
        let ginv_x0 = gamma.clone().lu().solve(&x0).unwrap();
        let inner = x0.transpose() * ginv_x0;
        let want = 0.5 * inner.iter().sum::<f64>() / (j * j) as f64;
        worst_tavg = worst_tavg.max((got - want).abs() / want.abs().max(1e-30));
    }
    report(
        "02 potential-form equivalences",
        worst_stgp < 1e-9 && worst_tavg < 1e-10,
        &format!("worst relative error stgp {worst_stgp:.2e}, time-averaged {worst_tavg:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Lorenz calibration accuracy: STGP+EKS, J=500, N=50, t0=100, T=10;
//    best-iteration ensemble-mean REM below 0.05 in at least 9 of 10 seeded
//    repeats.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_03_lorenz_calibration_accuracy() {
    let config = bench_config(
        SystemName::Lorenz63,
        LikelihoodKind::Stgp,
        EnkMethod::Eks,
        500,
    );
    let rems = best_rems(&config, 10);
    let below = rems.iter().filter(|r| **r < 0.05).count();
    report(
        "03 lorenz calibration accuracy",
        below >= 9,
        &format!(
            "{below}/10 repeats below 0.05, median {:.2e}, worst {:.2e}",
            median(&rems),
            rems.iter().cloned().fold(0.0, f64::max)
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Model-comparison ordering: STGP best REM <= time-averaged best REM in
//    at least 8 of 10 seed-paired repeats, per system and EnK method.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_04_model_comparison_ordering() {
    let cases = [
        (SystemName::Lorenz63, 500usize),
        (SystemName::Rossler, 200),
        (SystemName::Chen, 500),
    ];
    let mut all_pass = true;
    let mut details = Vec::new();
    for (system, ensemble) in cases {
        for method in [EnkMethod::Eki, EnkMethod::Eks] {
            let stgp = best_rems(
                &bench_config(system, LikelihoodKind::Stgp, method, ensemble),
                10,
            );
            let tavg = best_rems(
                &bench_config(system, LikelihoodKind::TimeAveraged, method, ensemble),
                10,
            );
            let wins = stgp
                .iter()
                .zip(tavg.iter())
                .filter(|(s, t)| s <= t)
                .count();
            let pass = wins >= 8;
            all_pass &= pass;
            details.push(format!(
                "{}/{:?}: {wins}/10 (stgp med {:.1e} vs tavg med {:.1e})",
                system.as_str(),
                method,
                median(&stgp),
                median(&tavg)
            ));
        }
    }
    report(
        "04 model-comparison ordering",
        all_pass,
        &details.join("; "),
    );
}

// ---------------------------------------------------------------------------
// 5. Window efficiency: the spatiotemporal model at T=1 matches or beats the
//    time-averaged model at T=4 (median best REM over 10 paired repeats).
// ---------------------------------------------------------------------------
#[test]
fn acceptance_05_window_efficiency() {
    let mut stgp_cfg = bench_config(
        SystemName::Lorenz63,
        LikelihoodKind::Stgp,
        EnkMethod::Eks,
        500,
    );
    stgp_cfg.observation.window = 1.0;
    let mut tavg_cfg = bench_config(
        SystemName::Lorenz63,
        LikelihoodKind::TimeAveraged,
        EnkMethod::Eks,
        500,
    );
    tavg_cfg.observation.window = 4.0;
    let stgp = median(&best_rems(&stgp_cfg, 10));
    let tavg = median(&best_rems(&tavg_cfg, 10));
    report(
        "05 window efficiency",
        stgp <= tavg,
        &format!("median stgp REM at T=1 {stgp:.2e} vs time-averaged at T=4 {tavg:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 6. Sampler correctness: pCN and the Langevin variant preserve the standard
//    normal prior under a flat potential and recover the conjugate Gaussian
//    posterior variance 1/2 within 5%.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_06_sampler_correctness() {
    let moments = |chain: &PosteriorChain, d: usize| {
        let n = chain.samples.len() as f64;
        let mean = chain.samples.iter().map(|v| v[d]).sum::<f64>() / n;
        let var = chain
            .samples
            .iter()
            .map(|v| (v[d] - mean) * (v[d] - mean))
            .sum::<f64>()
            / n;
        (mean, var)
    };
    let flat = WithGradient(
        |_: &DVector<f64>| 0.0,
        |v: &DVector<f64>| DVector::zeros(v.len()),
    );
    let gaussian = WithGradient(
        |v: &DVector<f64>| 0.5 * v.norm_squared(),
        |v: &DVector<f64>| v.clone(),
    );
    let mut ok = true;
    let mut details = Vec::new();
    for sampler in [Sampler::Pcn, Sampler::InfMala] {
        let cfg = ChainConfig {
            sampler,
            n_samples: 100_000,
            n_burnin: 1000,
            adapt: false,
            step: 0.5,
            seed: 6,
        };
        let chain = run_chain(&flat, &cfg, DVector::zeros(3)).unwrap();
        for d in 0..3 {
            let (mean, var) = moments(&chain, d);
            ok &= mean.abs() < 0.05 && (var - 1.0).abs() < 0.05;
        }
        let (_, var0) = moments(&chain, 0);
        let conj = run_chain(&gaussian, &cfg, DVector::zeros(1)).unwrap();
        let (_, var) = moments(&conj, 0);
        ok &= (var - 0.5).abs() < 0.025;
        details.push(format!(
            "{sampler:?}: prior var {var0:.3}, posterior var {var:.3}"
        ));
    }
    report("06 sampler correctness", ok, &details.join("; "));
}

// ---------------------------------------------------------------------------
// Shared CES fixture for criteria 7 and 8: full pipeline on the Lorenz
// benchmark with the GP emulator and 10^4 pCN samples.
// ---------------------------------------------------------------------------
struct CesFixture {
    exp: Experiment,
    chain: PosteriorChain,
}

fn ces_fixture() -> &'static CesFixture {
    static FIXTURE: OnceLock<CesFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = bench_config(
            SystemName::Lorenz63,
            LikelihoodKind::Stgp,
            EnkMethod::Eks,
            500,
        );
        let exp = Experiment::build(config).expect("experiment");
        let history = exp.run_calibration(exp.config.seed).expect("calibration");
        let emulator = exp
            .fit_emulator(&history, &exp.config.emulation)
            .expect("emulator");
        let (_, _, init) = exp.best_iteration_mean(&history).expect("init");
        let chain = exp
            .run_sampling(&emulator, &exp.config.sampling, init, exp.config.seed)
            .expect("chain");

        // Diagnostic, not an assertion: the final ensemble spread is
        // expected to underestimate the pCN posterior standard deviation
        // (the collapse that motivates the sampling stage).
        let last = history.ensembles.last().expect("history");
        let n = chain.samples.len() as f64;
        for d in 0..exp.prior.dim() {
            let col = last.particles.column(d);
            let ens_mean = col.sum() / last.size() as f64;
            let ens_sd = (col.iter().map(|v| (v - ens_mean).powi(2)).sum::<f64>()
                / last.size() as f64)
                .sqrt();
            let chain_mean = chain.samples.iter().map(|v| v[d]).sum::<f64>() / n;
            let chain_sd = (chain
                .samples
                .iter()
                .map(|v| (v[d] - chain_mean).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            println!(
                "diagnostic ensemble collapse v{}: EKS spread {ens_sd:.3e} vs pCN posterior sd {chain_sd:.3e}{}",
                d + 1,
                if ens_sd < chain_sd { " (underestimates)" } else { "" }
            );
        }
        CesFixture { exp, chain }
    })
}

// ---------------------------------------------------------------------------
// 7. Posterior concentration: unwhitened marginal posterior medians within
//    5% of the Lorenz truth (10, 28, 8/3) after the full CES pipeline.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_07_posterior_concentration() {
    let fixture = ces_fixture();
    let n = fixture.chain.samples.len();
    let mut ok = true;
    let mut details = Vec::new();
    for d in 0..3 {
        let mut comp: Vec<f64> = fixture
            .chain
            .samples
            .iter()
            .map(|v| fixture.exp.prior.unwhiten(v)[d])
            .collect();
        comp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = comp[n / 2];
        let truth = fixture.exp.truth[d];
        let rel = (med - truth).abs() / truth;
        ok &= rel < 0.05;
        details.push(format!("u{}: {med:.3} vs {truth:.3} ({:.2}%)", d + 1, rel * 100.0));
    }
    report("07 posterior concentration", ok, &details.join(", "));
}

// ---------------------------------------------------------------------------
// 8. Prediction: the forward-prediction mean from 100 posterior samples
//    tracks the truth trajectory with pointwise (per-time-column) relative
//    error below 0.1 on [t0, t0 + 3].
// ---------------------------------------------------------------------------
#[test]
fn acceptance_08_prediction_horizon() {
    let fixture = ces_fixture();
    let exp = &fixture.exp;
    let samples = exp.physical_samples(&fixture.chain, 100);
    let horizon = ObservationConfig {
        t0: exp.obs_cfg.t0,
        window: 15.0,
        n_times: 151,
        step: exp.obs_cfg.step,
        x0: exp.obs_cfg.x0.clone(),
    };
    let pred = stip_core::predict_forward(&samples, &exp.system, &horizon, Some(&exp.window_start))
        .expect("prediction");
    let field = exp.system.field(&exp.truth).unwrap();
    let truth = integrate_window(&field, &exp.window_start, &horizon).unwrap();
    let mut worst: f64 = 0.0;
    for (j, t) in pred.times.iter().enumerate() {
        if *t > exp.obs_cfg.t0 + 3.0 + 1e-9 {
            break;
        }
        let err = (pred.mean.column(j) - truth.values.column(j)).norm()
            / truth.values.column(j).norm();
        worst = worst.max(err);
    }
    report(
        "08 prediction horizon",
        worst < 0.1 && pred.dropped == 0,
        &format!(
            "max relative error {worst:.3e} on [{}, {}], dropped {}",
            exp.obs_cfg.t0,
            exp.obs_cfg.t0 + 3.0,
            pred.dropped
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Numerical kernel suite: RK4 order, kernel positive-definiteness,
//    Cholesky reconstruction, and emulator gradients against finite
//    differences.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_09_numerical_kernels() {
    // RK4 order on the analytic exponential.
    struct Decay;
    impl stip_core::VectorField for Decay {
        fn dimension(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, s: &[f64], out: &mut [f64]) {
            out[0] = -s[0];
        }
    }
    let err_for = |h: f64| {
        let cfg = ObservationConfig {
            t0: 0.0,
            window: 1.0,
            n_times: 2,
            step: h,
            x0: vec![1.0],
        };
        (integrate(&Decay, &cfg).unwrap().values[(0, 1)] - (-1.0f64).exp()).abs()
    };
    let ratio = err_for(0.1) / err_for(0.05);
    let rk4_ok = (12.0..=20.0).contains(&ratio);

    // Kernel positive-definiteness with jitter.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let k = build_kernel_matrix(&points, &KernelSpec::squared_exponential(0.1, 1.0, 1e-6)).unwrap();
    let kernel_min = stip_core::linalg::min_eig(&k).unwrap();

    // Cholesky reconstruction at 1e-10 relative.
    let m = DMatrix::from_fn(8, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spd = &m * m.transpose() + DMatrix::identity(8, 8);
    let factor = stip_core::linalg::cholesky(&spd, None).unwrap();
    let recon = (factor.lower() * factor.lower().transpose() - &spd).norm() / spd.norm();

    // Emulator gradient against central finite differences at 1e-4 relative.
    let inputs = DMatrix::from_fn(30, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let outputs = DMatrix::from_fn(30, 2, |i, j| {
        let (a, b) = (inputs[(i, 0)], inputs[(i, 1)]);
        if j == 0 {
            (a * b).sin()
        } else {
            a * a - b
        }
    });
    let em = stip_core::fit_emulator(&inputs, &outputs, &Default::default()).unwrap();
    let h = 1e-5;
    let mut grad_worst = 0.0f64;
    for _ in 0..50 {
        let v = DVector::from_fn(2, |_, _| 0.8 * rng.sample::<f64, _>(StandardNormal));
        let jac = em.predict_gradient(&v).unwrap();
        for d in 0..2 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[d] += h;
            vm[d] -= h;
            let fd = (em.predict_mean(&vp).unwrap() - em.predict_mean(&vm).unwrap()) / (2.0 * h);
            for q in 0..2 {
                grad_worst =
                    grad_worst.max((jac[(q, d)] - fd[q]).abs() / jac[(q, d)].abs().max(1.0));
            }
        }
    }

    report(
        "09 numerical kernel suite",
        rk4_ok && kernel_min > 0.0 && recon < 1e-10 && grad_worst < 1e-4,
        &format!(
            "rk4 ratio {ratio:.1}, kernel min eig {kernel_min:.1e}, cholesky recon {recon:.1e}, grad fd {grad_worst:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism: re-running commands with identical config and seed
//     produces byte-identical artifacts.
// ---------------------------------------------------------------------------
#[test]
fn acceptance_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut run_all = || {
        for args in [
            vec!["simulate", "--system", "chen", "--seed", "5"],
            vec![
                "calibrate",
                "--system",
                "chen",
                "--seed",
                "5",
                "--repeats",
                "2",
                "--set",
                "calibration.J_ensemble=30",
                "--set",
                "calibration.N=8",
            ],
            vec!["fisher", "--trials", "100", "--seed", "5"],
        ] {
            let status = stip().args(args).arg("--out").arg(dir.path()).status().unwrap();
            assert!(status.success());
        }
        let mut files: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
            .collect::<Vec<_>>()
    };
    let first = run_all();
    let second = run_all();
    let identical = first.len() == second.len()
        && first
            .iter()
            .zip(second.iter())
            .all(|((pa, a), (pb, b))| pa == pb && a == b);
    report(
        "10 determinism",
        identical,
        &format!("{} artifacts byte-compared", first.len()),
    );
}
