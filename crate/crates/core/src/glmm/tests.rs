use super::oracle::{fit_by_quadrature, gauss_hermite, oracle_loglik};
use super::*;
use crate::glm::{fit_glm, GlmSpec};
use crate::prep::FrameRow;
use rand_distr::{Distribution, Normal};

/// Random two-level frame; `tau` holds the intercept and slope SDs. Cluster
/// sizes vary around `per_cluster` so that `n_j` is not constant.
fn simulate(seed: u64, clusters: usize, per_cluster: usize, beta: [f64; 2], tau: [f64; 2]) -> ItemFrame {
    simulate_with_theta(seed, clusters, per_cluster, beta, tau, 0.8)
}

fn simulate_with_theta(
    seed: u64,
    clusters: usize,
    per_cluster: usize,
    beta: [f64; 2],
    tau: [f64; 2],
    theta_coef: f64,
) -> ItemFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    for j in 0..clusters {
        let u0 = tau[0] * z.sample(&mut rng);
        let u1 = tau[1] * z.sample(&mut rng);
        let center = -2.0 + 4.0 * j as f64 / clusters.max(2) as f64;
        for _ in 0..per_cluster + j % 3 {
            let g = rng.random_range(0..2u8);
            let theta = center + 0.3 * z.sample(&mut rng);
            let eta = beta[0] + u0 + (beta[1] + u1) * g as f64 + theta_coef * theta;
            let y = u8::from(rng.random::<f64>() < inv_logit(eta));
            rows.push(FrameRow { y, g, theta_k: theta, theta_s: center, j: 10 + 3 * j });
        }
    }
    ItemFrame::new("sim", rows)
}

#[test]
fn icc_values() {
    assert_eq!(icc(0.0), 0.0);
    assert!((icc(LOGISTIC_VARIANCE) - 0.5).abs() < 1e-15);
    assert!((icc(3.28987) - 0.5).abs() < 1e-4);
    assert!(icc(0.2) < icc(0.21));
}

#[test]
fn hermite_rule_moments() {
    let (x, w) = gauss_hermite(61);
    let sp = std::f64::consts::PI.sqrt();
    assert!((w.iter().sum::<f64>() - sp).abs() < 1e-10);
    let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
    assert!((m2 - sp / 2.0).abs() < 1e-10);
    assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-10);
}

#[test]
fn quadrature_with_zero_variance_is_glm_loglik() {
    let frame = simulate(1, 6, 15, [0.2, 0.4], [0.0, 0.0]);
    for name in [ModelName::M1, ModelName::M5] {
        let spec = GlmmSpec::named(name).unwrap();
        let (x, _) = model::design_matrix(&frame, &spec.fixed).unwrap();
        let beta = vec![0.3, -0.2];
        let chol = vec![0.0; spec.n_cov_params()];
        let q = oracle_loglik(&frame, &spec, &GlmmParams { beta: beta.clone(), cholesky: chol }).unwrap();
        let direct = crate::glm::log_likelihood(&x, &model::response(&frame), &beta);
        assert!((q - direct).abs() < 1e-9, "{name}: {q} vs {direct}");
    }
}

#[test]
fn quadrature_matches_trapezoid_integration() {
    let frame = simulate(2, 3, 4, [0.1, 0.5], [1.0, 0.0]);
    let spec = GlmmSpec::named(ModelName::M1).unwrap();
    let params = GlmmParams { beta: vec![0.1, 0.5], cholesky: vec![1.3] };
    let quad = oracle_loglik(&frame, &spec, &params).unwrap();

    let step = 1e-4;
    let n = (16.0 / step) as usize;
    let mut total = 0.0;
    for j in frame.cluster_sizes.keys() {
        let rows: Vec<&FrameRow> = frame.rows.iter().filter(|r| r.j == *j).collect();
        let f = |v: f64| {
            let dens = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let lik: f64 = rows
                .iter()
                .map(|r| bernoulli_loglik(r.y as f64, 0.1 + 0.5 * r.g as f64 + 1.3 * v))
                .sum();
            dens * lik.exp()
        };
        let mut s = 0.5 * (f(-8.0) + f(8.0));
        for k in 1..n {
            s += f(-8.0 + k as f64 * step);
        }
        total += (s * step).ln();
    }
    assert!((quad - total).abs() < 1e-6, "{quad} vs {total}");
}

#[test]
fn quadrature_rejects_large_frames() {
    let frame = simulate(3, 21, 2, [0.0, 0.0], [0.5, 0.0]);
    let spec = GlmmSpec::named(ModelName::M1).unwrap();
    let params = GlmmParams { beta: vec![0.0, 0.0], cholesky: vec![0.5] };
    assert!(matches!(oracle_loglik(&frame, &spec, &params), Err(Error::TooLarge { limit: 20, actual: 21 })));
    let frame = simulate(3, 11, 3, [0.0, 0.0], [0.5, 0.0]);
    let spec = GlmmSpec::named(ModelName::M5).unwrap();
    let params = GlmmParams { beta: vec![0.0, 0.0], cholesky: vec![0.5, 0.0, 0.5] };
    assert!(matches!(oracle_loglik(&frame, &spec, &params), Err(Error::TooLarge { limit: 10, .. })));
}

#[test]
fn laplace_close_to_quadrature_per_cluster() {
    for seed in 0..6 {
        let (name, chol) = if seed % 2 == 0 {
            (ModelName::M1, vec![0.9])
        } else {
            (ModelName::M5, vec![0.8, 0.2, 0.6])
        };
        let frame = simulate(10 + seed, 8, 12, [0.0, 0.3], [0.8, 0.5]);
        let spec = GlmmSpec::named(name).unwrap();
        let params = GlmmParams { beta: vec![-0.1, 0.4], cholesky: chol };
        let lap = laplace_loglik(&frame, &spec, &params).unwrap();
        let quad = oracle_loglik(&frame, &spec, &params).unwrap();
        assert!((lap - quad).abs() < 0.1 * frame.n_intervals() as f64, "{lap} vs {quad}");
    }
}

#[test]
fn laplace_fit_agrees_with_quadrature_fit() {
    let frame = simulate_with_theta(21, 8, 30, [-0.2, 0.5], [0.7, 0.0], 0.0);
    let spec = GlmmSpec::named(ModelName::M1).unwrap();
    let fit = fit_glmm(&frame, &spec).unwrap();
    let quad = oracle_loglik(&frame, &spec, &fit.params()).unwrap();
    assert!((fit.loglik - quad).abs() < 0.05, "{} vs {quad}", fit.loglik);
    let (best, _) = fit_by_quadrature(&frame, &spec, &fit.params()).unwrap();
    for (a, b) in fit.coefficients.iter().zip(&best.beta) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

#[test]
fn zero_covariance_reproduces_glm() {
    let frame = simulate(4, 12, 25, [0.3, -0.4], [0.6, 0.3]);
    for (mname, sname) in [(ModelName::M1, None), (ModelName::M3, Some(ModelName::S1)), (ModelName::M6, None)] {
        let spec = GlmmSpec::named(mname).unwrap();
        let zero = vec![0.0; spec.n_cov_params()];
        let fit = fit_glmm_fixed_cov(&frame, &spec, &zero).unwrap();
        let glm_spec = match sname {
            Some(s) => GlmSpec::named(s).unwrap(),
            None => GlmSpec { name: ModelName::S1, terms: spec.fixed.clone() },
        };
        let glm = fit_glm(&frame, &glm_spec).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&glm.coefficients) {
            assert!((a - b).abs() < 1e-6, "{mname}: {a} vs {b}");
        }
        assert!((fit.deviance - glm.deviance).abs() < 1e-6);
        for (a, b) in fit.std_errors.iter().zip(&glm.std_errors) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fit.icc, 0.0);
    }
}

#[test]
fn no_cluster_effect_recovers_single_level_fit() {
    let frame = simulate_with_theta(5, 15, 40, [0.2, 0.5], [0.0, 0.0], 0.0);
    let spec = GlmmSpec::named(ModelName::M1).unwrap();
    let fit = fit_glmm(&frame, &spec).unwrap();
    assert!(fit.converged);
    assert!(fit.tau0_sq < 0.02, "tau0 {}", fit.tau0_sq);
    let glm = fit_glm(&frame, &GlmSpec { name: ModelName::S1, terms: spec.fixed.clone() }).unwrap();
    for (a, b) in fit.coefficients.iter().zip(&glm.coefficients) {
        assert!((a - b).abs() < 0.02);
    }
}

#[test]
fn identical_cluster_rates_give_zero_variance() {
    let mut rows = Vec::new();
    for j in 0..6 {
        for k in 0..20 {
            rows.push(FrameRow { y: u8::from(k % 4 != 0), g: (k % 2) as u8, theta_k: 0.0, theta_s: 0.0, j });
        }
    }
    let frame = ItemFrame::new("flat", rows);
    let fit = fit_glmm(&frame, &GlmmSpec::named(ModelName::Empty).unwrap()).unwrap();
    assert!(fit.tau0_sq < 1e-4, "{}", fit.tau0_sq);
    assert!((fit.coefficients[0] - 3f64.ln()).abs() < 1e-4);
    assert!(fit.boundary && fit.converged);
}

#[test]
fn separated_clusters_have_high_icc() {
    let mut rows = Vec::new();
    for (j, rate) in [(1, 0.9), (2, 0.1)] {
        for k in 0..200 {
            let y = u8::from((k as f64) < rate * 200.0);
            rows.push(FrameRow { y, g: (k % 2) as u8, theta_k: 0.0, theta_s: 0.0, j });
        }
    }
    let frame = ItemFrame::new("two", rows);
    let spec = GlmmSpec::named(ModelName::Empty).unwrap();
    let fit = fit_glmm(&frame, &spec).unwrap();
    assert!(fit.icc > 0.2, "{}", fit.icc);
    let (best, _) = fit_by_quadrature(&frame, &spec, &fit.params()).unwrap();
    assert!(icc(best.cholesky[0].powi(2)) > 0.2);
}

#[test]
fn optimum_is_local_and_inner_solution_stationary() {
    let frame = simulate(6, 14, 20, [0.0, 0.4], [0.7, 0.4]);
    for name in [ModelName::M2, ModelName::M6] {
        let spec = GlmmSpec::named(name).unwrap();
        let fit = fit_glmm(&frame, &spec).unwrap();
        assert!(fit.converged, "{name}");
        let pr = Problem::new(&frame, &spec).unwrap();
        let profile = |chol: &[f64]| {
            let v0 = vec![0.0; pr.clusters.len() * pr.q];
            let sol = pirls(&pr, &Lambda::from_params(chol), &vec![0.0; pr.p], &v0, false);
            assert!(sol.gradient < 1e-6);
            sol.loglik
        };
        let base = profile(&fit.cholesky);
        assert!((base - fit.loglik).abs() < 1e-9);
        for k in 0..fit.cholesky.len() {
            for d in [-1e-3, 1e-3] {
                let mut c = fit.cholesky.clone();
                c[k] += d;
                assert!(profile(&c) - base < 1e-5, "{name} param {k} {d}");
            }
        }
        let (t0, t1, t10) = (fit.tau0_sq, fit.tau1_sq.unwrap_or(0.0), fit.tau10.unwrap_or(0.0));
        assert!(t10.abs() <= (t0 * t1).sqrt() + 1e-12);
        assert!((0.0..1.0).contains(&fit.icc));
        assert!(fit.r2_marginal <= fit.r2_conditional);
        let k = (spec.fixed.len() + spec.n_cov_params()) as f64;
        assert!((fit.aic - fit.deviance - 2.0 * k).abs() < 1e-9);
        assert!((fit.bic - fit.deviance - k * (fit.n_level1 as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn slope_model_reports_covariance_terms() {
    let frame = simulate(7, 10, 30, [0.0, 0.4], [0.6, 0.6]);
    let fit = fit_glmm(&frame, &GlmmSpec::named(ModelName::M5).unwrap()).unwrap();
    assert!(fit.tau1_sq.is_some() && fit.tau10.is_some());
    assert_eq!(fit.n_level2, 10);
    assert_eq!(fit.n_level1, 309);
    let wald = fit.wald("g").unwrap();
    assert!((0.0..=1.0).contains(&wald.p_value));
    assert!(matches!(fit.wald("theta_s"), Err(Error::UnknownTerm(_))));
}

#[test]
fn screen_over_items() {
    let mut frames = BTreeMap::new();
    frames.insert("A".to_string(), simulate(8, 10, 30, [0.0, 0.0], [0.0, 0.0]));
    frames.insert("B".to_string(), simulate(9, 10, 30, [0.0, 0.0], [2.0, 0.0]));
    let screen = icc_screen(&frames);
    assert_eq!(screen.summary.n_items, 2);
    assert!(screen.rho["A"] < screen.rho["B"]);
    assert!(screen.summary.share_above_0_2 > 0.0);
}
