use gsens::sensitivity::{
    asymptotic_bias_linear, closed_form_linear, compose_alpha, fit_g_estimator, relevance_check,
    sweep_alpha, sweep_alpha_with, FitStatus, SweepOptions, ROOT_RESIDUAL_TOLERANCE,
};
use gsens::simulation::{calibrate_logistic, generate_logistic, FixedCoefficients};
use gsens::smm::build_stacked_system;
use gsens::{Dataset, Matrix, SmmSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

fn confounded(n: usize, seed: u64, alpha_star: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y, mut x, mut z) = (vec![], vec![], vec![]);
    for _ in 0..n {
        let zi = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let u: f64 = rng.sample(StandardNormal);
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        let xi = 0.5 + 0.9 * zi + u + ex;
        y.push(1.0 + 0.4 * xi + alpha_star * zi + u + ey);
        x.push(xi);
        z.push(zi);
    }
    Dataset::new(y, x, z).unwrap()
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - ma) * (q - mb))
        .sum::<f64>()
        / n
}

#[test]
fn ols_coefficient_of_instrument_recovers_least_squares_slope() {
    // Y depends on X and Z with no unmeasured confounding
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut y, mut x, mut z) = (vec![], vec![], vec![]);
    for _ in 0..2000 {
        let zi = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
        let xi = 0.2 + 1.1 * zi + rng.sample::<f64, _>(StandardNormal);
        y.push(0.5 + 0.8 * xi + 0.3 * zi + rng.sample::<f64, _>(StandardNormal));
        x.push(xi);
        z.push(zi);
    }
    let d = Dataset::new(y.clone(), x.clone(), z.clone()).unwrap();
    // OLS of Y on (1, X, Z) through centred normal equations
    let sxx = cov(&x, &x);
    let sxz = cov(&x, &z);
    let szz = cov(&z, &z);
    let sxy = cov(&x, &y);
    let szy = cov(&z, &y);
    let det = sxx * szz - sxz * sxz;
    let slope_x = (szz * sxy - sxz * szy) / det;
    let slope_z = (sxx * szy - sxz * sxy) / det;
    let g = fit_g_estimator(&d, &SmmSpec::identity(), slope_z).unwrap();
    assert!(
        (g.psi.unwrap() - slope_x).abs() < 1e-6,
        "{:?} vs {slope_x}",
        g.psi
    );
}

#[test]
fn two_instrument_functions_cannot_separate_psi_and_alpha() {
    // three-level instrument with E[X|Z] exactly linear in the sample
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let levels = [(0.0, 300), (1.0, 500), (2.0, 200)];
    let (mut y, mut x, mut z) = (vec![], vec![], vec![]);
    for &(level, count) in &levels {
        let noise: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
        let centre = noise.iter().sum::<f64>() / count as f64;
        for e in noise {
            let xi = 1.0 + 0.7 * level + (e - centre);
            y.push(0.3 + 0.5 * xi + rng.sample::<f64, _>(StandardNormal));
            x.push(xi);
            z.push(level);
        }
    }
    let n = z.len() as f64;
    let zbar = z.iter().sum::<f64>() / n;
    let z2bar = z.iter().map(|v| v * v).sum::<f64>() / n;
    // rows: D1 = Z − E Z, D2 = Z² − E Z²; columns: coefficients of ψ and α
    let mut m = Matrix::zeros(2, 2);
    for i in 0..z.len() {
        let d = [z[i] - zbar, z[i] * z[i] - z2bar];
        for k in 0..2 {
            m[(k, 0)] += d[k] * x[i] / n;
            m[(k, 1)] += d[k] * z[i] / n;
        }
    }
    let eig = m.transpose().matmul(&m).symmetric_eigenvalues();
    let condition = if eig[0] <= 0.0 {
        f64::INFINITY
    } else {
        (eig[1] / eig[0]).sqrt()
    };
    assert!(condition > 1e8, "condition number {condition:.3e}");
}

#[test]
fn bias_of_uncorrected_estimator_examples() {
    assert_eq!(asymptotic_bias_linear(0.0, 0.4).unwrap(), 0.0);
    assert_eq!(asymptotic_bias_linear(0.5, 0.25).unwrap(), 2.0);
    assert!(asymptotic_bias_linear(0.5, 0.0).is_err());
    assert_eq!(compose_alpha(0.0, 0.0), 0.0);
    assert_eq!(compose_alpha(0.3, 0.2), 0.5);
}

#[test]
fn relevance_under_the_null_is_calibrated() {
    let dist = FisherSnedecor::new(1.0, 9998.0).unwrap();
    let critical = dist.inverse_cdf(0.99);
    let mut below = 0;
    for r in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + r);
        let n = 10_000;
        let z: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let d = Dataset::new(vec![0.0; n], x, z).unwrap();
        let check = relevance_check(&d).unwrap();
        assert_eq!(check.df, (1, n - 2));
        if check.f_stat < critical {
            below += 1;
        }
    }
    assert!(below >= 190, "{below} of 200 below the 99th percentile");
}

#[test]
fn relevance_matches_least_squares_by_hand() {
    let d = confounded(500, 3, 0.0);
    let check = relevance_check(&d).unwrap();
    let slope = cov(d.x(), d.z()) / cov(d.z(), d.z());
    assert!((check.coef - slope).abs() < 1e-12);
    let n = d.n() as f64;
    let xbar = d.x().iter().sum::<f64>() / n;
    let zbar = d.z().iter().sum::<f64>() / n;
    let rss: f64 = d
        .rows()
        .map(|r| (r.x - xbar - slope * (r.z - zbar)).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / (cov(d.z(), d.z()) * n)).sqrt();
    assert!((check.f_stat - (slope / se).powi(2)).abs() < 1e-8);
    assert!(check.ci.0 < slope && slope < check.ci.1);
}

#[test]
fn logit_sweep_is_schedule_independent() {
    let c = calibrate_logistic(0.5, 0.0, 0.5, 0.6, 0.3, &FixedCoefficients::default()).unwrap();
    let d = generate_logistic(&c, 800, 4).unwrap();
    let grid: Vec<f64> = (0..21).map(|k| -0.2 + 0.02 * k as f64).collect();
    let serial = sweep_alpha(&d, &SmmSpec::logit(), &grid).unwrap();
    let parallel = sweep_alpha_with(
        &d,
        &SmmSpec::logit(),
        &grid,
        &SweepOptions {
            parallel: true,
            ..Default::default()
        },
    )
    .unwrap();
    for (a, b) in serial.entries.iter().zip(&parallel.entries) {
        assert_eq!(a.psi.map(f64::to_bits), b.psi.map(f64::to_bits));
        assert_eq!(a.ci.map(|c| c.0.to_bits()), b.ci.map(|c| c.0.to_bits()));
    }
}

#[test]
fn singleton_sweep_matches_single_fit() {
    let d = confounded(300, 9, 0.2);
    let s = sweep_alpha(&d, &SmmSpec::identity(), &[0.0]).unwrap();
    let g = fit_g_estimator(&d, &SmmSpec::identity(), 0.0).unwrap();
    assert_eq!(s.entries[0].psi, g.psi);
    assert_eq!(s.entries[0].ci, g.ci);
    assert_eq!(s.solvable_range, Some((0.0, 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn g_estimate_equals_closed_form(seed in 0u64..100_000, alpha in -1.0f64..1.0) {
        let d = confounded(500, seed, 0.3);
        let g = fit_g_estimator(&d, &SmmSpec::identity(), alpha).unwrap();
        prop_assert_eq!(g.status, FitStatus::Solved);
        let oracle = (cov(d.y(), d.z()) - alpha * cov(d.z(), d.z())) / cov(d.x(), d.z());
        prop_assert!((g.psi.unwrap() - oracle).abs() <= 1e-8);
        prop_assert!((closed_form_linear(&d, alpha).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn sweep_is_affine_in_alpha(seed in 0u64..100_000, start in -1.0f64..0.0, step in 0.01f64..0.2) {
        let d = confounded(400, seed, 0.0);
        let grid: Vec<f64> = (0..8).map(|k| start + step * k as f64).collect();
        let s = sweep_alpha(&d, &SmmSpec::identity(), &grid).unwrap();
        let slope = -1.0 / (cov(d.x(), d.z()) / cov(d.z(), d.z()));
        let psi0 = s.entries[0].psi.unwrap();
        for e in &s.entries {
            prop_assert!((e.psi.unwrap() - (psi0 + slope * (e.alpha - start))).abs() <= 1e-8);
        }
    }

    #[test]
    fn solved_estimates_satisfy_their_equations(seed in 0u64..100_000, alpha in -0.3f64..0.3) {
        let c = calibrate_logistic(0.5, 0.0, 0.5, 0.6, 0.3, &FixedCoefficients::default()).unwrap();
        let d = generate_logistic(&c, 600, seed).unwrap();
        let spec = SmmSpec::logit();
        let g = fit_g_estimator(&d, &spec, alpha).unwrap();
        if g.status == FitStatus::Solved {
            let system = build_stacked_system(&d, &spec).unwrap();
            let resid = system.residual(&d, &g.theta, alpha).unwrap();
            prop_assert!(resid <= ROOT_RESIDUAL_TOLERANCE, "{}", resid);
            let (lo, hi) = g.ci.unwrap();
            prop_assert!(lo <= g.psi.unwrap() && g.psi.unwrap() <= hi);
        }
    }
}
