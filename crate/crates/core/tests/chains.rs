use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use freelunch::baselines::{self, OptimizerConfig};
use freelunch::chains::{self, ChainConfig};
use freelunch::conditioning::{Conditioning, ConditioningKind};
use freelunch::harness::dgp;
use freelunch::inference;
use freelunch::models::{ObjectiveModel, Ols, Probit};
use freelunch::resampling::{ResamplePlan, RngStream};

fn ols(n: usize, seed: u64) -> Ols {
    dgp::ols_design(n, &[1.0, 1.0], &mut RngStream::new(seed, 0).rng()).unwrap()
}

fn probit(n: usize, seed: u64) -> Probit {
    dgp::probit_design(n, &[0.0, 1.0, 1.0], &mut RngStream::new(seed, 0).rng()).unwrap()
}

/// Intercept plus a regressor with standard deviation `scale`.
fn stretched_ols(n: usize, scale: f64, seed: u64) -> Ols {
    let mut rng = RngStream::new(seed, 0).rng();
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { scale * rng.sample::<f64, _>(StandardNormal) });
    let y = DVector::from_fn(n, |i, _| 1.0 + 0.1 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal));
    Ols::new(&x, &y).unwrap()
}

#[test]
fn gradient_chain_follows_its_linear_recursion() {
    // θ_{b+1} − θ̂ = (I − γH_b)(θ_b − θ̂) + γH_b(θ̂_m − θ̂) holds exactly for least squares.
    let model = ols(300, 1);
    let hat = model.fit().unwrap();
    let gamma = 0.1;
    let start = &hat + DVector::from_vec(vec![1.0, -1.0]);
    let cfg = ChainConfig::new(gamma, 300, start.clone(), ResamplePlan::iid(300, 100).unwrap(), RngStream::new(2, 0))
        .with_conditioning(Conditioning::new(ConditioningKind::Identity))
        .with_burn(0)
        .with_rejection_factor(f64::INFINITY);
    let h = chains::run_resampled_chain(&model, &cfg).unwrap();
    let stream = h.echo.stream();
    let rows = h.all_draws();
    let eye = DMatrix::<f64>::identity(2, 2);
    let mut prev = start;
    for (b, id) in h.all_batch_ids().iter().enumerate() {
        let batch = h.plan.draw_batch(&stream, *id);
        let hb = model.evaluate(&prev, &batch).unwrap().hessian;
        let batch_hat = model.fit_batch(&batch).unwrap();
        let predicted = &hat + (&eye - &hb * gamma) * (&prev - &hat) + &hb * (batch_hat - &hat) * gamma;
        let actual = rows.row(b).transpose();
        assert!((&actual - &predicted).amax() < 1e-10, "draw {b}");
        prev = actual;
    }
}

#[test]
fn unit_rate_newton_draws_are_the_batch_estimates() {
    let model = ols(200, 3);
    let cfg = ChainConfig::new(1.0, 100, DVector::zeros(2), ResamplePlan::iid(200, 200).unwrap(), RngStream::new(4, 0)).with_burn(0);
    let h = chains::run_resampled_chain(&model, &cfg).unwrap();
    let stream = h.echo.stream();
    for (b, id) in h.batch_ids.iter().enumerate() {
        let batch_hat = model.fit_batch(&h.plan.draw_batch(&stream, *id)).unwrap();
        assert!((h.draws.row(b).transpose() - batch_hat).amax() < 1e-10);
    }
}

#[test]
fn unit_rate_draws_are_serially_uncorrelated() {
    let model = ols(200, 5);
    let cfg = ChainConfig::new(1.0, 2000, model.fit().unwrap(), ResamplePlan::iid(200, 200).unwrap(), RngStream::new(6, 0));
    let h = chains::run_resampled_chain(&model, &cfg).unwrap();
    let diag = inference::ar1_diagnostic(&h.draws, 1.0).unwrap();
    assert_eq!(diag.target, 0.0);
    assert!(diag.pass.iter().all(|p| *p), "{:?}", diag.coefficients);
}

#[test]
fn free_lunch_matches_least_squares_inference() {
    let model = ols(500, 7);
    let hat = model.fit().unwrap();
    let se = model.homoskedastic_se().unwrap();
    let cfg = ChainConfig::new(0.3, 4000, DVector::zeros(2), ResamplePlan::iid(500, 500).unwrap(), RngStream::new(8, 0))
        .with_conditioning(Conditioning::new(ConditioningKind::Identity));
    let (h, rep) = chains::run_free_lunch(&model, &cfg, 0.05).unwrap();
    assert_eq!(h.echo.conditioning.kind, ConditioningKind::InverseHessian);
    for j in 0..2 {
        assert!((rep.theta_bar[j] - hat[j]).abs() < se[j], "coordinate {j}");
        let ratio = rep.se[j] / se[j];
        assert!((0.8..1.25).contains(&ratio), "coordinate {j}: ratio {ratio}");
    }
}

#[test]
fn newton_solves_a_quadratic_in_one_step() {
    let model = ols(100, 9);
    let r = chains::classical_newton(&model, &DVector::from_vec(vec![5.0, -5.0]), 1.0, 50, 1e-10).unwrap();
    assert!(r.converged);
    assert_eq!(r.iterations, 1);
    assert!((r.theta - model.fit().unwrap()).amax() < 1e-10);
}

#[test]
fn newton_reaches_the_probit_root() {
    let model = probit(500, 10);
    let r = chains::classical_newton(&model, &DVector::zeros(3), 1.0, 100, 1e-12).unwrap();
    assert!(r.converged);
    assert!(r.gradient_norm <= 1e-8, "{}", r.gradient_norm);
}

#[test]
fn gradient_descent_contracts_at_the_predicted_rate() {
    let model = ols(200, 11);
    let hat = model.fit().unwrap();
    let h = model.evaluate(&hat, &model.full_batch()).unwrap().hessian;
    let gamma = 0.2;
    let bound = (DMatrix::<f64>::identity(2, 2) - &h * gamma).symmetric_eigen().eigenvalues.amax();
    assert!(bound < 1.0);
    let mut theta = &hat + DVector::from_vec(vec![3.0, 3.0]);
    for _ in 0..20 {
        let next = chains::classical_gd(&model, &theta, gamma, 1, 1e-300).unwrap().theta;
        assert!((&next - &hat).norm() <= bound * (&theta - &hat).norm() * (1.0 + 1e-12));
        theta = next;
    }
}

#[test]
fn gradient_descent_is_slow_when_ill_conditioned() {
    let model = stretched_ols(400, 30.0, 12);
    let start = DVector::from_vec(vec![3.0, -3.0]);
    let h = model.evaluate(&start, &model.full_batch()).unwrap().hessian;
    let top = h.symmetric_eigen().eigenvalues.amax();
    let nr = chains::classical_newton(&model, &start, 1.0, 100, 1e-8).unwrap();
    let gd = chains::classical_gd(&model, &start, 1.0 / top, 1_000_000, 1e-8).unwrap();
    assert!(nr.converged && gd.converged);
    assert!(gd.iterations > 100 * nr.iterations, "gd {} vs nr {}", gd.iterations, nr.iterations);
}

#[test]
fn sgd_iterates_follow_the_decaying_rate() {
    let model = ols(300, 13);
    let plan = ResamplePlan::iid(300, 10).unwrap();
    let stream = RngStream::new(14, 0);
    let theta0 = DVector::from_vec(vec![0.0, 0.0]);
    let r = chains::sgd_polyak(&model, &theta0, 0.3, 0.75, &plan, 50, &stream).unwrap();
    let mut prev = theta0;
    for k in 1..=50 {
        let g = model.gradient(&prev, &plan.draw_batch(&stream, (k - 1) as u64)).unwrap();
        let expected = &prev - g * chains::sgd_rate(0.3, 0.75, k);
        let actual = r.trace.row(k - 1).transpose();
        assert!((&actual - &expected).amax() < 1e-12);
        prev = actual;
    }
    assert_eq!(prev, r.last);
}

#[test]
fn averaged_sgd_approaches_the_estimate() {
    let model = ols(2000, 15);
    let hat = model.fit().unwrap();
    let theta0 = &hat + DVector::from_vec(vec![2.0, -2.0]);
    let plan = ResamplePlan::iid(2000, 10).unwrap();
    let r = chains::sgd_polyak(&model, &theta0, 2.0, 0.75, &plan, 5000, &RngStream::new(16, 0)).unwrap();
    let initial = (&theta0 - &hat).norm();
    let err = (r.average - &hat).norm();
    assert!(err < initial / 10.0, "{err} vs {initial}");
}

#[test]
fn many_newton_steps_reproduce_the_m_of_n_bootstrap() {
    let model = probit(500, 17);
    let hat = chains::classical_newton(&model, &DVector::zeros(3), 1.0, 100, 1e-12).unwrap().theta;
    let plan = ResamplePlan::iid(500, 250).unwrap();
    let stream = RngStream::new(18, 0);
    let dmk = baselines::dmk_draws(&model, &hat, 50, 100, &plan, &stream).unwrap();
    let opt = OptimizerConfig { tol: 1e-13, ..OptimizerConfig::default() };
    let mofn = baselines::m_of_n_bootstrap(&model, &hat, &plan, opt, 100, &stream).unwrap();
    assert_eq!(dmk.replication_ids, mofn.replication_ids);
    assert!((&dmk.draws - &mofn.draws).amax() < 1e-6);
}

#[test]
fn draws_do_not_depend_on_the_thread_count() {
    let model = probit(400, 19);
    let hat = chains::classical_newton(&model, &DVector::zeros(3), 1.0, 100, 1e-12).unwrap().theta;
    let plan = ResamplePlan::iid(400, 400).unwrap();
    let stream = RngStream::new(20, 0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| baselines::dmk_draws(&model, &hat, 3, 200, &plan, &stream).unwrap().draws)
    };
    assert_eq!(run(1), run(4));
}
