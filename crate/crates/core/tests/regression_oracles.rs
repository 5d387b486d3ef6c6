use nalgebra::{DMatrix, DVector};
use tempered_core::alpha_posterior::{conjugate_alpha_posterior, ConjugatePrior};
use tempered_core::experiments::median;
use tempered_core::gauss::hellinger_sq_gaussian;
use tempered_core::regression::*;
use tempered_core::robustness::{exact_expected_kl, exact_expected_kl_with, MisspecTarget};
use tempered_core::sampling::{derive_seed, rng_from_seed, standard_normal_vector};
use tempered_core::variational::gmf_project_gaussian;
use tempered_core::GaussianDist;

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn ols_unbiased_without_omitted_variable() {
    let mut dgp = RegressionDGP::example();
    dgp.gamma0 = DVector::zeros(1);
    let est: Vec<f64> = (0..500)
        .map(|r| {
            let ds = simulate(&dgp, 40, derive_seed(41, &[r])).unwrap();
            ols(&ds.w, &ds.y).unwrap()[0]
        })
        .collect();
    let (m, se) = mean_se(&est);
    assert!((m - dgp.theta0[0]).abs() < 3.0 * se);
}

#[test]
fn large_sample_moments() {
    let dgp = RegressionDGP::example();
    let ds = simulate(&dgp, 100_000, 42).unwrap();
    let x = ds.full_design();
    let emp = x.tr_mul(&x) / ds.n() as f64;
    assert!((emp - dgp.joint_cov()).norm() < 0.02);
    let emp_v = &ds.stats().sum_ww / (ds.n() as f64 * dgp.sigma_u.powi(2));
    assert!((emp_v - curvature(&dgp)).norm() < 0.02);

    // The projection residual is independent of W, so the sandwich reduces to
    // σ_u²/cov_WW.
    let se = (sandwich_covariance(&ds).unwrap()[(0, 0)]).sqrt();
    assert!((se * se * ds.n() as f64 / 1.75 - 1.0).abs() < 0.05);
    let theta_hat = ols(&ds.w, &ds.y).unwrap()[0];
    assert!((theta_hat - pseudo_true(&dgp)[0]).abs() < 3.0 * se);
}

#[test]
fn lan_remainder_sup_shrinks() {
    let dgp = RegressionDGP::example();
    let medians: Vec<f64> = [100usize, 1000, 10_000]
        .iter()
        .map(|&n| {
            let v: Vec<f64> = (0..200)
                .map(|r| {
                    let ds = simulate(&dgp, n, derive_seed(43, &[n as u64, r])).unwrap();
                    lan_residual_sup(&ds, &dgp, 3.0, 13).unwrap()
                })
                .collect();
            median(&v)
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}

#[test]
fn prior_term_matches_monte_carlo_integral() {
    let dgp = RegressionDGP::example();
    let ds = simulate(&dgp, 200, 44).unwrap();
    let prior = ConjugatePrior::new(DVector::from_element(1, 0.4), DMatrix::from_element(1, 1, 2.0)).unwrap();
    let mu = DVector::from_element(1, 1.45);
    let sigma = DMatrix::from_element(1, 1, 0.02);
    let (term, _) = assumption2_terms(&mu, &sigma, &dgp, &prior, &ds).unwrap();

    let n = ds.n() as f64;
    let star = pseudo_true(&dgp);
    let log_prior = |t: f64| -0.5 * 2.0 * (t - 0.4).powi(2) / dgp.sigma_u.powi(2);
    let q = GaussianDist::new(mu, sigma).unwrap();
    let mut rng = rng_from_seed(45);
    let samples: Vec<f64> = (0..100_000)
        .map(|_| {
            let theta = q.sample(&mut rng)[0];
            let h = n.sqrt() * (theta - star[0]);
            log_prior(star[0] + h / n.sqrt()) - log_prior(star[0])
        })
        .collect();
    let (m, se) = mean_se(&samples);
    assert!((term - m).abs() < 3.0 * se, "{term} vs {m} ± {se}");
}

#[test]
fn mean_field_conjugate_matches_closed_form_projection() {
    let dgp = RegressionDGP::new(
        DVector::from_vec(vec![1.0, 2.0, -1.0]),
        DVector::from_vec(vec![0.5]),
        1.0,
        DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.4, 1.0, 0.3, 0.1, 0.3, 1.0]),
        DMatrix::from_row_slice(3, 1, &[0.2, 0.0, 0.1]),
        DMatrix::identity(1, 1),
        None,
    )
    .unwrap();
    let ds = simulate(&dgp, 150, 46).unwrap();
    let prior = ConjugatePrior::new(DVector::zeros(3), DMatrix::identity(3, 3) * 0.5).unwrap();
    let q = variational_conjugate_cov(&ds, &prior, dgp.sigma_u, 0.6).unwrap();
    let post = conjugate_alpha_posterior(&ds.w, &ds.y, &prior, dgp.sigma_u, 0.6).unwrap();
    let closed = gmf_project_gaussian(&post);
    assert!((&q.var - &closed.var).amax() < 1e-12 * closed.var.amax());
    assert_eq!(q.mean, closed.mean);
}

#[test]
fn true_posterior_collapses_with_known_nuisance() {
    let dgp = RegressionDGP::example();
    let ds = simulate(&dgp, 120, 47).unwrap();
    let s2 = dgp.sigma_eps.powi(2);
    let tau = 0.8;
    let mut prec = DMatrix::zeros(2, 2);
    prec[(0, 0)] = tau;
    prec[(1, 1)] = 1e12;
    let full = FullPrior::new(DVector::from_vec(vec![0.0, dgp.gamma0[0]]), prec).unwrap();
    let post = true_posterior_theta(&ds, &full, dgp.sigma_eps).unwrap().theta;
    let y_adj = &ds.y - &ds.z * &dgp.gamma0;
    let reduced = ConjugatePrior::new(DVector::zeros(1), DMatrix::from_element(1, 1, tau * s2)).unwrap();
    let oracle = conjugate_alpha_posterior(&ds.w, &y_adj, &reduced, dgp.sigma_eps, 1.0).unwrap();
    assert!((post.mean() - oracle.mean()).amax() < 1e-8);
    assert!((post.cov() - oracle.cov()).amax() < 1e-8 * oracle.cov().amax());
}

#[test]
fn flat_true_posterior_mean_is_partitioned_least_squares() {
    let dgp = RegressionDGP::example();
    let ds = simulate(&dgp, 90, 48).unwrap();
    let post = true_posterior_theta(&ds, &FullPrior::isotropic(2, 0.0).unwrap(), 1.0).unwrap();
    // Residualize W and Y on Z, then regress residuals.
    let zz = ds.z.tr_mul(&ds.z);
    let proj = |v: &DMatrix<f64>| v - &ds.z * zz.clone().try_inverse().unwrap() * ds.z.tr_mul(v);
    let w_res = proj(&ds.w);
    let y_res = proj(&DMatrix::from_column_slice(ds.n(), 1, ds.y.as_slice()));
    let beta = (w_res.tr_mul(&y_res))[(0, 0)] / (w_res.tr_mul(&w_res))[(0, 0)];
    assert!((post.theta.mean()[0] - beta).abs() < 1e-10);
}

#[test]
fn scaled_true_posterior_covariance_stabilizes() {
    let dgp = RegressionDGP::example();
    let prior = FullPrior::isotropic(2, 1.0).unwrap();
    let omega = |n: usize, r: u64| {
        let ds = simulate(&dgp, n, derive_seed(49, &[n as u64, r])).unwrap();
        true_posterior_theta(&ds, &prior, 1.0).unwrap().omega_hat
    };
    let rel: Vec<f64> = (0..100)
        .map(|r| {
            let (a, b) = (omega(1000, r), omega(10_000, r));
            (&a - &b).norm() / b.norm()
        })
        .collect();
    assert!(median(&rel) < 0.05, "{}", median(&rel));
    let b = omega(10_000, 0);
    assert!((&b - population_omega(&dgp).unwrap()).norm() / b.norm() < 0.05);
}

#[test]
fn markov_bound_dominates_exact_probability() {
    use tempered_core::alpha_posterior::{concentration_probability, Posterior};
    let dgp = RegressionDGP::example();
    let star = pseudo_true(&dgp);
    let prior = ConjugatePrior::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let mut rng = rng_from_seed(50);
    for r in 0..50 {
        let n = 100 * (r + 1);
        let ds = simulate(&dgp, n, derive_seed(50, &[r as u64])).unwrap();
        let post = conjugate_alpha_posterior(&ds.w, &ds.y, &prior, dgp.sigma_u, 0.5).unwrap();
        let r_n = (n as f64).ln();
        let bound = concentration_markov_bound(post.mean(), post.cov(), &star, r_n, n).unwrap();
        let exact = concentration_probability(Posterior::Gaussian(&post), &star, n, r_n, &mut rng).unwrap();
        assert!(bound >= exact);
    }
}

#[test]
fn failure_case_stabilizes_at_its_closed_form_limit() {
    let mut dgp = RegressionDGP::example();
    dgp.sigma_u = 1.0;
    let prior = ConjugatePrior::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let pts = failure_case_hellinger(&dgp, &prior, AlphaSchedule::InverseN(1.0), &[10_000, 100_000], 51).unwrap();
    let (a, b) = (pts[0].hellinger_sq, pts[1].hellinger_sq);
    assert!(a > 0.001 && b > 0.001);
    assert!((a - b).abs() / b < 0.1);
    assert!(pts.iter().all(|p| p.affinity < 1.0));
    // With α_n n = 1 the posterior tends to N(θ*/2, 1/2) and the nominal
    // limit to N(θ*, 1).
    let star = pseudo_true(&dgp)[0];
    let limit = hellinger_sq_gaussian(
        &GaussianDist::univariate(star / 2.0, 0.5).unwrap(),
        &GaussianDist::univariate(star, 1.0).unwrap(),
    )
    .unwrap();
    assert!((b - limit).abs() < 0.01, "{b} vs {limit}");

    let control = failure_case_hellinger(&dgp, &prior, AlphaSchedule::Constant(1.0), &[100, 10_000], 51).unwrap();
    assert!(control[1].hellinger_sq < control[0].hellinger_sq && control[1].hellinger_sq < 1e-3);
}

#[test]
fn dataset_csv_round_trip_on_disk() {
    let dgp = RegressionDGP::example();
    let ds = simulate(&dgp, 25, 52).unwrap();
    let dir = std::env::temp_dir().join(format!("tempered-core-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("data.csv");
    ds.write_csv_path(&path).unwrap();
    let back = RegressionDataset::read_csv(std::fs::File::open(&path).unwrap()).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!(back.y, ds.y);
    assert_eq!(ols(&back.w, &back.y).unwrap(), ols(&ds.w, &ds.y).unwrap());
}

#[test]
fn sandwich_target_swaps_only_the_covariance() {
    let mut rng = rng_from_seed(53);
    let truth = GaussianDist::new(standard_normal_vector(&mut rng, 1), DMatrix::from_element(1, 1, 0.3)).unwrap();
    let reported = GaussianDist::univariate(0.2, 0.5).unwrap();
    let regular = GaussianDist::univariate(0.1, 0.4).unwrap();
    let cov = DMatrix::from_element(1, 1, 0.7);
    let swapped = exact_expected_kl_with(&truth, &reported, &regular, 0.2, MisspecTarget::Sandwich(&cov)).unwrap();
    let manual = GaussianDist::new(truth.mean().clone(), cov.clone()).unwrap();
    assert_eq!(swapped, exact_expected_kl(&manual, &reported, &regular, 0.2).unwrap());
}
