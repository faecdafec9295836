use std::f64::consts::PI;
use std::sync::Arc;

use ignorability::estimators::{ridge_posterior, Dataset};
use ignorability::gp::semipar::{self, gp_plus_linear_posterior};
use ignorability::gp::*;
use ignorability::linalg;
use ignorability::rng::{self, Stream};
use ignorability::stats;
use ignorability::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn logistic_oracle() -> ignorability::selection_bias::Surface {
    Arc::new(|x: &[f64]| 0.1 + 0.8 / (1.0 + (-x[0]).exp()))
}

/// Binary-exposure data with `Y = 1 + x₁ + τ A + noise`.
fn binary_data(n: usize, p: usize, tau: f64, noise: f64, s: &mut Stream) -> Dataset {
    let x = linalg::normal_matrix(n, p, s);
    let f = logistic_oracle();
    let mut a = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().cloned().collect();
        a[i] = f64::from(s.random::<f64>() < f(&row));
        let e: f64 = s.sample(StandardNormal);
        y[i] = 1.0 + row[0] + tau * a[i] + noise * e;
    }
    Dataset::new(x, a, y).unwrap().with_oracle(f)
}

fn points(data: &Dataset) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    let rows = (0..data.n()).map(|i| data.x.row(i).iter().cloned().collect()).collect();
    let phi = data.propensity_oracle.as_ref().map(|_| data.oracle_values().unwrap().iter().cloned().collect());
    (rows, phi)
}

fn gram(spec: &KernelSpec, data: &Dataset, spline: Option<&SplineBasis>) -> DMatrix<f64> {
    let (rows, phi) = points(data);
    let n = data.n();
    DMatrix::from_fn(n, n, |i, j| {
        let u = GpPoint { a: data.a[i], x: &rows[i], phi: phi.as_ref().map(|p| p[i]) };
        let v = GpPoint { a: data.a[j], x: &rows[j], phi: phi.as_ref().map(|p| p[j]) };
        kernel_eval(spec, &u, &v, spline).unwrap()
    })
}

#[test]
fn marginal_loglik_single_observation() {
    let x = DMatrix::from_row_slice(1, 2, &[0.4, -0.3]);
    let data = Dataset::new(x, DVector::from_element(1, 1.0), DVector::from_element(1, 2.5)).unwrap();
    let spec = KernelSpec::new(KernelVariant::Naive, 0.8, 1.3);
    let s = 0.7;
    let v = 100.0 * 2.0 + 0.8;
    let total = v + s * s;
    let want = -0.5 * (2.0 * PI * total).ln() - 2.5 * 2.5 / (2.0 * total);
    let got = gp_marginal_loglik(&spec, &data, s).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn marginal_loglik_quadratic_scaling() {
    let mut s = rng::stream(11);
    let data = binary_data(15, 3, 1.0, 1.0, &mut s);
    let spec = KernelSpec::new(KernelVariant::SopGp, 2.0, 0.3);
    let with_y = |y: DVector<f64>| {
        let d = Dataset::new(data.x.clone(), data.a.clone(), y).unwrap().with_oracle(logistic_oracle());
        gp_marginal_loglik(&spec, &d, 0.9).unwrap()
    };
    let base = with_y(DVector::zeros(15));
    let q1 = with_y(data.y.clone()) - base;
    for c in [0.5, 3.0, -2.0] {
        let qc = with_y(&data.y * c) - base;
        assert!((qc - c * c * q1).abs() < 1e-9 * q1.abs().max(1.0), "c={c}: {qc} vs {}", c * c * q1);
    }
}

#[test]
fn marginal_loglik_matches_dense_solve() {
    let mut s = rng::stream(5);
    let data = binary_data(3, 2, 2.0, 1.0, &mut s);
    for variant in [KernelVariant::Naive, KernelVariant::Ipw] {
        let spec = KernelSpec::new(variant, 1.7, 0.6);
        let noise = 0.45;
        let mut c = gram(&spec, &data, None);
        for i in 0..3 {
            c[(i, i)] += noise * noise;
        }
        let lu = c.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse().unwrap();
        let quad = data.y.dot(&(&inv * &data.y));
        let want = -0.5 * quad - 0.5 * det.ln() - 1.5 * (2.0 * PI).ln();
        let got = gp_marginal_loglik(&spec, &data, noise).unwrap();
        assert!((got - want).abs() < 1e-8, "{variant:?}: {got} vs {want}");
    }
}

#[test]
fn gram_is_symmetric_and_factorizable_for_all_variants() {
    let mut s = rng::stream(21);
    let data = binary_data(40, 4, 1.0, 1.0, &mut s);
    let phi: Vec<f64> = data.oracle_values().unwrap().iter().cloned().collect();
    let basis = spline_basis(&phi, 10).unwrap();
    for variant in KernelVariant::ALL {
        let spec = KernelSpec::new(variant, 0.9, 0.4);
        let g = gram(&spec, &data, Some(&basis));
        assert!(linalg::asymmetry(&g) < 1e-12);
        let (_, jitter) = linalg::cholesky_jittered(&g).unwrap();
        assert!(jitter <= 1e-6, "{variant:?} needed jitter {jitter}");
    }
}

#[test]
fn spline_knots_at_deciles_of_uniform_values() {
    let values: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let basis = spline_basis(&values, 10).unwrap();
    for (j, k) in basis.knots().iter().enumerate() {
        assert!((k - j as f64 / 9.0).abs() < 1e-12, "knot {j} = {k}");
    }
}

#[test]
fn spline_needs_enough_distinct_values() {
    let values = [0.2, 0.2, 0.3, 0.3, 0.4];
    assert!(matches!(
        spline_basis(&values, 4),
        Err(Error::DegenerateKnots { distinct: 3, required: 4 })
    ));
}

#[test]
fn spline_is_linear_beyond_boundary_knots() {
    let basis = SplineBasis::from_knots(vec![0.1, 0.2, 0.4, 0.5, 0.7, 0.9]).unwrap();
    for start in [-3.0, 0.95, 2.0] {
        let h = 0.37;
        let (f0, f1, f2) = (basis.eval(start), basis.eval(start + h), basis.eval(start + 2.0 * h));
        for k in 0..basis.len() {
            let second = f2[k] - 2.0 * f1[k] + f0[k];
            assert!(second.abs() < 1e-9 * (1.0 + f0[k].abs()), "basis {k} at {start}: {second}");
        }
    }
}

/// Least-squares fit of `target` on the basis; returns the max residual on
/// a grid including points beyond the knots.
fn projection_residual(basis: &SplineBasis, target: impl Fn(f64) -> f64) -> f64 {
    let lo = basis.knots()[0] - 0.2;
    let hi = basis.knots()[basis.len() - 1] + 0.2;
    let grid: Vec<f64> = (0..200).map(|i| lo + (hi - lo) * i as f64 / 199.0).collect();
    let b = DMatrix::from_fn(grid.len(), basis.len() + 1, |i, j| {
        if j == 0 { 1.0 } else { basis.eval(grid[i])[j - 1] }
    });
    let t = DVector::from_iterator(grid.len(), grid.iter().map(|g| target(*g)));
    let coef = b.clone().svd(true, true).solve(&t, 1e-12).unwrap();
    (b * coef - t).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spline_reproduces_linear_functions(
        raw in prop::collection::vec(0.0f64..1.0, 12..60),
        slope in -5.0f64..5.0,
        icpt in -5.0f64..5.0,
    ) {
        let distinct = stats::sorted(&raw).windows(2).filter(|w| w[1] > w[0]).count() + 1;
        prop_assume!(distinct >= 10);
        let basis = spline_basis(&raw, 10).unwrap();
        prop_assume!(basis.knots().windows(2).all(|w| w[1] - w[0] > 1e-6));
        let r = projection_residual(&basis, |t| slope * t + icpt);
        prop_assert!(r < 1e-8, "residual {}", r);
    }

    #[test]
    fn kernel_is_symmetric(
        a in 0.0f64..1.0, b in 0.0f64..1.0,
        x in prop::collection::vec(-2.0f64..2.0, 3),
        y in prop::collection::vec(-2.0f64..2.0, 3),
        p in 0.05f64..0.95, q in 0.05f64..0.95,
        amp in 0.01f64..10.0, bw in 0.01f64..10.0,
    ) {
        let basis = SplineBasis::from_knots(vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        let u = GpPoint { a: a.round(), x: &x, phi: Some(p) };
        let v = GpPoint { a: b.round(), x: &y, phi: Some(q) };
        for variant in KernelVariant::ALL {
            let spec = KernelSpec::new(variant, amp, bw);
            let k1 = kernel_eval(&spec, &u, &v, Some(&basis)).unwrap();
            let k2 = kernel_eval(&spec, &v, &u, Some(&basis)).unwrap();
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.abs().max(1.0));
        }
    }

    #[test]
    fn random_grams_are_psd(seed in 0u64..10_000, n in 5usize..25, p in 1usize..5) {
        let mut s = rng::stream(seed);
        let data = binary_data(n, p, 1.0, 1.0, &mut s);
        let phi: Vec<f64> = data.oracle_values().unwrap().iter().cloned().collect();
        let k = 4.min(n);
        let basis = spline_basis(&phi, k).unwrap();
        for variant in KernelVariant::ALL {
            let amp = s.random_range(0.01..10.0);
            let bw = s.random_range(0.01..10.0);
            let g = gram(&KernelSpec { knots: k, ..KernelSpec::new(variant, amp, bw) }, &data, Some(&basis));
            prop_assert!(linalg::asymmetry(&g) < 1e-12);
            let (_, jitter) = linalg::cholesky_jittered(&g).unwrap();
            prop_assert!(jitter <= 1e-6);
        }
    }
}

#[test]
fn eb_recovers_generating_hyperparameters() {
    let (amp, bw, eps) = (2.0f64, 0.5f64, 0.5f64);
    let n = 200;
    let mut hits = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let mut s = rng::stream(1000 + seed);
        let x = linalg::normal_matrix(n, 2, &mut s);
        let a = DVector::from_fn(n, |_, _| f64::from(s.random::<f64>() < 0.5));
        let data0 = Dataset::new(x.clone(), a.clone(), DVector::zeros(n)).unwrap();
        let spec = KernelSpec::new(KernelVariant::Naive, amp, bw);
        let mut k = gram(&spec, &data0, None);
        for i in 0..n {
            k[(i, i)] += eps * eps;
        }
        let (chol, _) = linalg::cholesky_jittered(&k).unwrap();
        let y = linalg::mvn_from_factor(&chol.l(), &mut s);
        let data = Dataset::new(x, a, y).unwrap();
        let fit = eb_optimize(KernelVariant::Naive, &data).unwrap();
        let ok = (fit.spec.amplitude / amp).ln().abs() < 1.0
            && (fit.spec.inv_bandwidth / bw).ln().abs() < 1.0
            && (fit.noise_sd / eps).ln().abs() < 1.0;
        hits += usize::from(ok);
    }
    assert!(hits * 10 >= seeds as usize * 8, "recovered in {hits} of {seeds} seeds");
}

#[test]
fn eb_result_dominates_grid() {
    let mut s = rng::stream(77);
    let data = binary_data(40, 3, 2.0, 1.0, &mut s);
    for variant in KernelVariant::ALL {
        let fit = eb_optimize(variant, &data).unwrap();
        assert!(fit.loglik >= fit.grid_loglik);
        let grid = [1e-2, 1e-1, 1.0, 1e1, 1e2];
        for &amp in &grid {
            for &b in &grid {
                for &e in &grid {
                    if let Ok(v) = fit.loglik_at(amp, b, e) {
                        assert!(fit.loglik >= v - 1e-9, "{variant:?} grid ({amp},{b},{e}) beats fit");
                    }
                }
            }
        }
    }
}

#[test]
fn sop_fit_ignores_bandwidth() {
    let mut s = rng::stream(8);
    let data = binary_data(30, 2, 1.0, 1.0, &mut s);
    let fit = eb_optimize(KernelVariant::Sop, &data).unwrap();
    let l1 = fit.loglik_at(0.3, 0.01, fit.noise_sd).unwrap();
    let l2 = fit.loglik_at(7.0, 50.0, fit.noise_sd).unwrap();
    assert_eq!(l1, l2);
    assert!((l1 - fit.loglik).abs() < 1e-9);
}

#[test]
fn fitted_hyperparameters_are_local_maxima() {
    let mut s = rng::stream(31);
    let data = binary_data(50, 3, 2.0, 1.0, &mut s);
    let fit = eb_optimize(KernelVariant::SopGp, &data).unwrap();
    let base = [fit.spec.amplitude.ln(), fit.spec.inv_bandwidth.ln(), fit.noise_sd.ln()];
    for _ in 0..10 {
        let d: Vec<f64> = (0..3).map(|_| s.sample::<f64, _>(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = 0.3;
        let p: Vec<f64> = (0..3).map(|j| (base[j] + step * d[j] / norm).exp()).collect();
        let v = fit.loglik_at(p[0], p[1], p[2]).unwrap();
        assert!(v < fit.loglik, "perturbation increased loglik: {v} vs {}", fit.loglik);
    }
}

#[test]
fn ate_is_invariant_to_outcome_shift() {
    let mut s = rng::stream(41);
    let data = binary_data(40, 2, 2.0, 1.0, &mut s);
    for variant in KernelVariant::ALL {
        let fit = eb_optimize(variant, &data).unwrap();
        let shifted = Dataset::new(data.x.clone(), data.a.clone(), data.y.add_scalar(5.0))
            .unwrap()
            .with_oracle(logistic_oracle());
        let fit2 = eb_optimize(variant, &shifted).unwrap();
        let (m1, s1) = ate_posterior(&fit, &data.x).unwrap();
        let (m2, s2) = ate_posterior(&fit2, &data.x).unwrap();
        assert!((m1 - m2).abs() < 1e-6, "{variant:?}: {m1} vs {m2}");
        assert!((s1 - s2).abs() < 1e-6);
    }
}

#[test]
fn homogeneous_effect_recovered_within_three_sds() {
    let mut s = rng::stream(51);
    let data = binary_data(120, 2, 3.0, 1.0, &mut s);
    let fit = eb_optimize(KernelVariant::Naive, &data).unwrap();
    let (m, sd) = ate_posterior(&fit, &data.x).unwrap();
    assert!((m - 3.0).abs() < 3.0 * sd, "mean {m}, sd {sd}");
}

#[test]
fn single_point_ate_is_pointwise_contrast() {
    let mut s = rng::stream(61);
    let data = binary_data(30, 2, 1.5, 1.0, &mut s);
    let fit = eb_optimize(KernelVariant::Ipw, &data).unwrap();
    let x0 = DMatrix::from_row_slice(1, 2, &[0.3, -0.4]);
    let (m, sd) = ate_posterior(&fit, &x0).unwrap();

    // dense joint predictive of β(1, x₀) and β(0, x₀)
    let (rows, phi) = points(&data);
    let phi = phi.unwrap();
    let phi0 = logistic_oracle()(&[0.3, -0.4]);
    let x0r = [0.3, -0.4];
    let spec = fit.spec;
    let n = data.n();
    let mut c = gram(&spec, &data, None);
    for i in 0..n {
        c[(i, i)] += fit.noise_sd * fit.noise_sd;
    }
    let test = [GpPoint { a: 1.0, x: &x0r, phi: Some(phi0) }, GpPoint { a: 0.0, x: &x0r, phi: Some(phi0) }];
    let kx = DMatrix::from_fn(n, 2, |i, t| {
        let u = GpPoint { a: data.a[i], x: &rows[i], phi: Some(phi[i]) };
        kernel_eval(&spec, &u, &test[t], None).unwrap()
    });
    let ktt = DMatrix::from_fn(2, 2, |i, j| kernel_eval(&spec, &test[i], &test[j], None).unwrap());
    let cinv = c.try_inverse().unwrap();
    let yc = data.y.add_scalar(-data.y.mean());
    let mean = kx.transpose() * &cinv * yc;
    let cov = ktt - kx.transpose() * &cinv * &kx;
    let want_m = mean[0] - mean[1];
    let want_v = cov[(0, 0)] + cov[(1, 1)] - 2.0 * cov[(0, 1)];
    assert!((m - want_m).abs() < 1e-6 * want_m.abs().max(1.0), "{m} vs {want_m}");
    assert!((sd - want_v.sqrt()).abs() < 1e-5 * sd.max(1.0), "{sd} vs {}", want_v.sqrt());
}

#[test]
fn ipw_clips_and_counts_extreme_propensities() {
    let mut s = rng::stream(71);
    let base = binary_data(30, 2, 1.0, 1.0, &mut s);
    let oracle: ignorability::selection_bias::Surface =
        Arc::new(|x: &[f64]| if x[0] > 0.0 { 0.995 } else { 0.5 });
    let data = Dataset::new(base.x.clone(), base.a.clone(), base.y.clone()).unwrap().with_oracle(oracle);
    let fit = eb_optimize(KernelVariant::Ipw, &data).unwrap();
    let expected = (0..30).filter(|&i| base.x[(i, 0)] > 0.0).count();
    assert_eq!(fit.clip_count, expected);
    let r = fit_gp_method(&data, KernelVariant::Ipw).unwrap();
    assert_eq!(r.diagnostics["clip_count"], expected as f64);
}

#[test]
fn missing_oracle_is_an_argument_error() {
    let mut s = rng::stream(72);
    let d = binary_data(20, 2, 1.0, 1.0, &mut s);
    let data = Dataset::new(d.x, d.a, d.y).unwrap();
    for v in [KernelVariant::Ipw, KernelVariant::Sop, KernelVariant::SopGp] {
        assert!(matches!(fit_gp_method(&data, v), Err(Error::InvalidArgument(_))));
    }
    assert!(fit_gp_method(&data, KernelVariant::Naive).is_ok());
}

#[test]
fn small_samples_rejected() {
    let mut s = rng::stream(73);
    let d = binary_data(9, 2, 1.0, 1.0, &mut s);
    assert!(matches!(eb_optimize(KernelVariant::Naive, &d), Err(Error::InsufficientSample { .. })));
}

#[test]
fn stage_two_matches_ridge_on_linear_kernel() {
    let mut s = rng::stream(81);
    let n = 25;
    let z = linalg::normal_matrix(n, 4, &mut s);
    let b = linalg::normal_matrix(n, 2, &mut s);
    let y = linalg::normal_vector(n, &mut s);
    let s2 = 0.7;
    let k = &z * z.transpose() * s2;
    let post = gp_plus_linear_posterior(&b, &k, 1.0, 100.0, &y).unwrap();
    let design = linalg::hstack(&[&b, &z]);
    let pen = [0.01, 0.01, 1.0 / s2, 1.0 / s2, 1.0 / s2, 1.0 / s2];
    let ridge = ridge_posterior(&design, &y, &pen, 1.0).unwrap();
    for i in 0..2 {
        assert!((post.mean[i] - ridge.mean[i]).abs() < 1e-8);
        for j in 0..2 {
            assert!((post.covariance[(i, j)] - ridge.covariance[(i, j)]).abs() < 1e-8);
        }
    }
}

#[test]
fn constant_pilot_is_degenerate() {
    let mut s = rng::stream(82);
    let x = linalg::normal_matrix(30, 3, &mut s);
    let a = DVector::from_element(30, 0.7);
    let y = linalg::normal_vector(30, &mut s);
    let data = Dataset::new(x, a, y).unwrap();
    assert!(matches!(semipar::fit_semipar_direct(&data), Err(Error::DegeneratePilot)));
}

#[test]
fn direct_matches_naive_without_confounding() {
    let reps = 24;
    let n = 60;
    let mut diffs = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut s = rng::stream(900 + r as u64);
        let x = linalg::normal_matrix(n, 2, &mut s);
        let a = linalg::normal_vector(n, &mut s);
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = s.sample(StandardNormal);
            (x[(i, 0)]).sin() + 0.5 * x[(i, 1)] + a[i] + e
        });
        let data = Dataset::new(x, a, y).unwrap();
        let d = semipar::fit_semipar_direct(&data).unwrap();
        let nv = semipar::fit_semipar_naive(&data).unwrap();
        diffs.push(d.estimate - nv.estimate);
    }
    let m = stats::mean(&diffs);
    let se = stats::mcse(&diffs);
    assert!(m.abs() <= 2.0 * se + 1e-12, "mean difference {m}, mcse {se}");
}
