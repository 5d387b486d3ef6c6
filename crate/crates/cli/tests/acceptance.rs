//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tempered_core::experiments::{self as ex, median, quantile, Settings};
use tempered_core::gauss::{hellinger_sq_gaussian, kl_gaussian, tv_gaussian, TvMethod};
use tempered_core::optim::{golden_section, GOLDEN_TOL};
use tempered_core::regression::{pseudo_true, RegressionDGP};
use tempered_core::robustness::*;
use tempered_core::sampling::{random_spd, rng_from_seed, standard_normal_vector, SimRng};
use tempered_core::variational::gmf_project_gaussian;
use tempered_core::GaussianDist;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn decreasing(v: &[(usize, f64)]) -> bool {
    v.windows(2).all(|w| w[1].1 < w[0].1)
}

fn at(v: &[(usize, f64)], n: usize) -> f64 {
    v.iter().find(|(m, _)| *m == n).map(|(_, x)| *x).unwrap_or(f64::NAN)
}

fn fmt_series(v: &[(usize, f64)]) -> String {
    v.iter().map(|(n, x)| format!("{n}:{x:.4}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// 1. Gaussian divergences against independent oracles.

fn oracle_log_pdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let k = mean.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let d = x - mean;
    -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + (d.transpose() * inv * &d)[(0, 0)])
}

fn random_gaussian(rng: &mut SimRng, dim: usize) -> GaussianDist {
    GaussianDist::new(standard_normal_vector(rng, dim), random_spd(rng, dim, 0.3, 3.0)).unwrap()
}

fn divergences() -> Outcome {
    let mut rng = rng_from_seed(101);
    let mut worst_z: f64 = 0.0;
    for dim in 1..=3 {
        let p = random_gaussian(&mut rng, dim);
        let q = random_gaussian(&mut rng, dim);
        let l = p.cov().clone().cholesky().unwrap().l();
        let draws = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let x = p.mean() + &l * standard_normal_vector(&mut rng, dim);
            let v = oracle_log_pdf(p.mean(), p.cov(), &x) - oracle_log_pdf(q.mean(), q.cov(), &x);
            s += v;
            s2 += v * v;
        }
        let m = s / draws as f64;
        let se = ((s2 / draws as f64 - m * m) / draws as f64).sqrt();
        let z = (kl_gaussian(&p, &q).unwrap() - m).abs() / se;
        worst_z = worst_z.max(z);
        check(z < 3.0, format!("KL dim {dim} off by {z:.2} SE"))?;
    }

    let pdf = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let mut worst_h: f64 = 0.0;
    for _ in 0..20 {
        let (m1, m2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (v1, v2) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let (lo, hi, k) = (-25.0, 25.0, 50_001);
        let h = (hi - lo) / (k - 1) as f64;
        let bc: f64 = (0..k)
            .map(|i| {
                let x = lo + h * i as f64;
                let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
                w * h * (pdf(x, m1, v1) * pdf(x, m2, v2)).sqrt()
            })
            .sum();
        let h2 = hellinger_sq_gaussian(&GaussianDist::univariate(m1, v1).unwrap(), &GaussianDist::univariate(m2, v2).unwrap()).unwrap();
        worst_h = worst_h.max((h2 - (1.0 - bc)).abs());
    }
    check(worst_h < 1e-6, format!("Hellinger off by {worst_h:e}"))?;

    let phi = Normal::new(0.0, 1.0).unwrap();
    let mut worst_tv: f64 = 0.0;
    for (delta, var) in [(0.3, 1.0), (1.0, 2.0), (2.5, 0.5), (4.0, 1.0)] {
        let exact = 2.0 * phi.cdf(delta / (2.0 * f64::sqrt(var))) - 1.0;
        let p = GaussianDist::univariate(0.0, var).unwrap();
        let q = GaussianDist::univariate(delta, var).unwrap();
        let tv = tv_gaussian(&p, &q, TvMethod::Quadrature, 4001, &mut rng).unwrap().value;
        worst_tv = worst_tv.max((tv - exact).abs());
    }
    check(worst_tv < 1e-6, format!("TV off by {worst_tv:e}"))?;

    let mut violations = 0;
    for i in 0..1000 {
        let dim = 1 + i % 2;
        let p = random_gaussian(&mut rng, dim);
        let q = random_gaussian(&mut rng, dim);
        let kl = kl_gaussian(&p, &q).unwrap();
        let h2 = hellinger_sq_gaussian(&p, &q).unwrap();
        let tv = tv_gaussian(&p, &q, TvMethod::Quadrature, if dim == 1 { 2001 } else { 301 }, &mut rng).unwrap().value;
        if tv > (kl / 2.0).sqrt() + 1e-9 || h2 > tv + 1e-9 {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} Pinsker / H²≤TV violations"))?;
    Ok(format!("KL worst {worst_z:.2} SE, H² err {worst_h:.1e}, TV err {worst_tv:.1e}, 1000 pairs ok"))
}

// ---------------------------------------------------------------------------
// 2–3. Large-sample Gaussian limits of the α-posterior and its mean-field projection.

fn bvm_settings() -> Settings {
    Settings {
        seed: 202,
        replications: 100,
        n_grid: vec![50, 200, 1000, 5000],
        alphas: vec![0.5, 1.0],
        ..Settings::default()
    }
}

fn bvm() -> Outcome {
    let rows = ex::bvm_convergence(&bvm_settings()).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for alpha in [0.5, 1.0] {
        let m = ex::medians_by_n(&rows, |r| r.n, |r| r.alpha == alpha, |r| r.tv);
        check(decreasing(&m), format!("α={alpha}: TV medians not decreasing: {}", fmt_series(&m)))?;
        check(at(&m, 5000) < 0.05, format!("α={alpha}: TV median {:.4} at n=5000", at(&m, 5000)))?;
        notes.push(format!("α={alpha} [{}]", fmt_series(&m)));
    }
    Ok(format!("median TV {}", notes.join("; ")))
}

fn vbvm() -> Outcome {
    let rows = ex::vbvm_convergence(&bvm_settings()).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for alpha in [0.5, 1.0] {
        let m = ex::medians_by_n(&rows, |r| r.n, |r| r.alpha == alpha, |r| r.kl);
        check(at(&m, 5000) < 0.01, format!("α={alpha}: KL median {:.4} at n=5000", at(&m, 5000)))?;
        check(decreasing(&m), format!("α={alpha}: KL medians not decreasing: {}", fmt_series(&m)))?;
        notes.push(format!("α={alpha} KL@5000={:.1e}", at(&m, 5000)));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------
// 4. Closed-form mean-field projection against a numeric KL minimizer.

/// Minimizes `KL(N(μ, diag v) ‖ N(m, Σ))` by cyclic golden-section search over
/// each `μ_j` and `log v_j`, using an explicit inverse of `Σ`.
fn numeric_projection(target: &GaussianDist) -> (DVector<f64>, DVector<f64>) {
    let p = target.dim();
    let prec = target.cov().clone().try_inverse().unwrap();
    let m = target.mean().clone();
    let kl = |mu: &DVector<f64>, lv: &DVector<f64>| {
        let d = mu - &m;
        let tr: f64 = (0..p).map(|j| prec[(j, j)] * lv[j].exp()).sum();
        0.5 * (tr + (d.transpose() * &prec * &d)[(0, 0)] - lv.sum())
    };
    let mut mu = DVector::zeros(p);
    let mut lv = DVector::zeros(p);
    for _ in 0..500 {
        let before = (mu.clone(), lv.clone());
        for j in 0..p {
            let (x, _) = golden_section(
                |t| {
                    let mut c = mu.clone();
                    c[j] = t;
                    kl(&c, &lv)
                },
                -50.0,
                50.0,
                1e-12,
            );
            mu[j] = x;
            let (x, _) = golden_section(
                |t| {
                    let mut c = lv.clone();
                    c[j] = t;
                    kl(&mu, &c)
                },
                -20.0,
                20.0,
                1e-12,
            );
            lv[j] = x;
        }
        if (&mu - &before.0).amax() < 1e-11 && (&lv - &before.1).amax() < 1e-11 {
            break;
        }
    }
    (mu, lv.map(f64::exp))
}

fn projection() -> Outcome {
    let mut rng = rng_from_seed(404);
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let dim = 2 + i % 4;
        let target = GaussianDist::new(standard_normal_vector(&mut rng, dim), random_spd(&mut rng, dim, 0.3, 3.0)).unwrap();
        let q = gmf_project_gaussian(&target);
        let (mu, var) = numeric_projection(&target);
        let err = (&q.mean - &mu).amax().max((&q.var - &var).amax());
        worst = worst.max(err);
        check(err < 1e-5, format!("target {i}: closed form vs numeric differ by {err:e}"))?;
        for j in 0..dim {
            check(q.var[j] <= target.cov()[(j, j)] * (1.0 + 1e-12), format!("target {i}: variance not understated"))?;
        }
        let v = target.cov();
        let vinv = v.clone().try_inverse().unwrap();
        let tr = (DMatrix::from_diagonal(&v.diagonal()) * vinv).trace();
        check(tr >= dim as f64 - 1e-9, format!("target {i}: tr(ṼV⁻¹) = {tr} < p"))?;
    }
    Ok(format!("500 targets, max abs diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Optimal tempering.

fn random_scenario(rng: &mut SimRng, zero_bias: bool) -> (MisspecScenario, FiniteSampleInputs) {
    let p = rng.random_range(1..=4);
    let theta0 = standard_normal_vector(rng, p);
    let star = if zero_bias { theta0.clone() } else { standard_normal_vector(rng, p) };
    let s = MisspecScenario::new(
        theta0,
        star,
        random_spd(rng, p, 0.2, 5.0),
        random_spd(rng, p, 0.2, 5.0),
        rng.random_range(0.1..5.0),
    )
    .unwrap();
    let n = rng.random_range(10..100_000);
    let f = FiniteSampleInputs::new(
        standard_normal_vector(rng, p),
        standard_normal_vector(rng, p),
        n,
        s.eps / n as f64,
    )
    .unwrap();
    (s, f)
}

fn optimal_tempering() -> Outcome {
    let mut rng = rng_from_seed(505);
    let mut worst_argmin: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    for _ in 0..200 {
        let (s, f) = random_scenario(&mut rng, false);
        let (x, _) = golden_section(|a| r_star(a, &s, &f).unwrap(), 1e-6, 50.0, GOLDEN_TOL);
        let err = (x - optimal_alpha(&s, &f).unwrap()).abs();
        worst_argmin = worst_argmin.max(err);
        check(err < 1e-6, format!("argmin differs by {err:e}"))?;
        check(limit_alpha_star(&s) < 1.0 && limit_alpha_tilde(&s) < 1.0, "limit not < 1 with d ≠ 0")?;
        let big = FiniteSampleInputs::at_limits(&s, 1_000_000).unwrap();
        let gap = (optimal_alpha(&s, &big).unwrap() - limit_alpha_star(&s)).abs();
        worst_limit = worst_limit.max(gap);
        check(gap < 1e-4, format!("α*_n at n=10⁶ is {gap:e} from the limit"))?;
    }
    for _ in 0..50 {
        let (s, _) = random_scenario(&mut rng, true);
        check(limit_alpha_star(&s) == 1.0, format!("d = 0 gives α* = {}", limit_alpha_star(&s)))?;
        check(limit_alpha_tilde(&s) <= 1.0, "d = 0 gives α̃* > 1")?;
    }
    Ok(format!("argmin err {worst_argmin:.1e}, n=10⁶ gap {worst_limit:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. Regular vs optimized limit growth.

fn growth() -> Outcome {
    let mut prev_regular: Option<f64> = None;
    for d in [1.0, 2.0, 4.0, 8.0] {
        let s = MisspecScenario::new(
            DVector::from_element(1, d),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        let dq = s.d_quad();
        let regular = 2.0 * r_infinity(1.0, 1, 1.0, dq).map_err(|e| e.to_string())?;
        let optimized = 2.0 * optimized_limit_kl(&s);
        check((regular - d * d).abs() < 1e-12, format!("‖d‖={d}: 2r∞(1) = {regular}"))?;
        check((optimized - (1.0 + d * d).ln()).abs() < 1e-12, format!("‖d‖={d}: 2·optimized = {optimized}"))?;
        if let Some(prev) = prev_regular {
            check(((regular / prev) - 4.0f64).abs() < 1e-12, "regular limit not quadratic in ‖d‖")?;
        }
        prev_regular = Some(regular);
    }
    Ok("2r∞(1) = ε·d_quad and 2·optimized = log(1+ε·d_quad) at ‖d‖ ∈ {1,2,4,8}".into())
}

// ---------------------------------------------------------------------------
// 7. Regression example suite.

fn appendix_suite() -> Outcome {
    let base = Settings {
        seed: 707,
        replications: 200,
        ..Settings::default()
    };
    let mut notes = Vec::new();

    // Concentration, entropic limit, boundedness and variational-defect diagnostics.
    let s = Settings {
        n_grid: vec![100, 1000, 5000, 10_000, 100_000],
        alphas: vec![0.5, 1.0],
        ..base.clone()
    };
    let rows = ex::assumption_checks(&s).map_err(|e| e.to_string())?;
    check(rows.iter().all(|r| r.markov_bound >= r.concentration_prob), "Markov bound below exact probability")?;
    for alpha in [0.5, 1.0] {
        let keep = |r: &ex::AssumptionRow| r.alpha == alpha;
        let markov = ex::medians_by_n(&rows, |r| r.n, keep, |r| r.markov_bound);
        check(decreasing(&markov), format!("concentration α={alpha}: {}", fmt_series(&markov)))?;
        let kl = ex::medians_by_n(&rows, |r| r.n, keep, |r| r.bvm_kl);
        check(at(&kl, 5000) < 0.01, format!("entropic limit α={alpha}: KL median {:.4} at n=5000", at(&kl, 5000)))?;
        check(decreasing(&kl), format!("entropic limit α={alpha}: {}", fmt_series(&kl)))?;
        let cov = ex::medians_by_n(&rows, |r| r.n, keep, |r| r.cov_rel_err);
        check(at(&cov, 10_000) < 0.02, format!("nΣ rel err {:.4} at n=10⁴", at(&cov, 10_000)))?;
        if alpha == 1.0 {
            notes.push(format!("markov [{}]", fmt_series(&markov)));
            notes.push(format!("limit KL@5000={:.1e}", at(&kl, 5000)));
        }
    }
    let a2_ns = [100usize, 1000, 10_000];
    let a2_keep = |r: &ex::AssumptionRow| r.alpha == 1.0 && a2_ns.contains(&r.n);
    for (name, vals) in [
        ("prior_defect", ex::medians_by_n(&rows, |r| r.n, a2_keep, |r| r.prior_defect.abs())),
        ("lan_defect", ex::medians_by_n(&rows, |r| r.n, a2_keep, |r| r.lan_defect.abs())),
        ("lan_sup", ex::medians_by_n(&rows, |r| r.n, a2_keep, |r| r.lan_sup)),
    ] {
        check(decreasing(&vals), format!("defect {name}: {}", fmt_series(&vals)))?;
        notes.push(format!("|{name}| [{}]", fmt_series(&vals)));
    }
    let lemma_ns = [100usize, 1000, 10_000];
    for (name, f) in [
        ("mean", (|r: &ex::AssumptionRow| r.scaled_mean_dev) as fn(&ex::AssumptionRow) -> f64),
        ("cov", |r: &ex::AssumptionRow| r.scaled_cov_norm),
    ] {
        let q: Vec<f64> = lemma_ns
            .iter()
            .map(|&n| {
                let v: Vec<f64> = rows.iter().filter(|r| r.n == n && r.alpha == 1.0).map(f).collect();
                quantile(&v, 0.95)
            })
            .collect();
        let (lo, hi) = q.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        check(hi <= 2.0 * lo, format!("boundedness {name}: 95th percentiles {q:?}"))?;
    }

    // Failure case with α_n = α₀/n against the constant-α control.
    let s = Settings {
        n_grid: vec![100, 10_000, 100_000],
        ..base.clone()
    };
    let rows = ex::failure_case(&s).map_err(|e| e.to_string())?;
    let inv = ex::medians_by_n(&rows, |r| r.n, |r| r.schedule == "inverse-n", |r| r.hellinger_sq);
    let (a, b) = (at(&inv, 10_000), at(&inv, 100_000));
    check(a > 0.001 && b > 0.001 && (a - b).abs() / b < 0.1, format!("inverse-n H²: {}", fmt_series(&inv)))?;
    check(
        rows.iter().filter(|r| r.schedule == "inverse-n").all(|r| r.affinity < 1.0),
        "failure-case affinity not < 1",
    )?;
    let ctl = ex::medians_by_n(&rows, |r| r.n, |r| r.schedule == "constant", |r| r.hellinger_sq);
    check(decreasing(&ctl) && at(&ctl, 100_000) < 1e-3, format!("control H²: {}", fmt_series(&ctl)))?;
    notes.push(format!("failure H² {a:.4}/{b:.4} vs control {:.1e}", at(&ctl, 100_000)));

    // Exact criterion against its surrogate.
    let s = Settings {
        n_grid: vec![5000],
        ..base.clone()
    };
    let rows = ex::surrogate_fidelity(&s).map_err(|e| e.to_string())?;
    for alpha in [0.25, 0.5, 0.75, 1.0] {
        let d: Vec<f64> = rows.iter().filter(|r| r.alpha == alpha).map(|r| r.abs_diff).collect();
        check(median(&d) < 0.02, format!("surrogate α={alpha}: median |r − r*| = {:.4}", median(&d)))?;
    }
    let curve = ex::robustness_curve(&s).map_err(|e| e.to_string())?;
    let best = curve
        .iter()
        .min_by(|x, y| x.r_exact.total_cmp(&y.r_exact))
        .map(|r| r.alpha)
        .unwrap();
    let lim = limit_alpha_star(&ex::scenario(&s).map_err(|e| e.to_string())?);
    check((best - lim).abs() <= 0.05, format!("exact argmin {best} vs limit {lim}"))?;
    notes.push(format!("exact argmin {best:.2} vs α*={lim:.4}"));

    let theta_star = pseudo_true(&RegressionDGP::example());
    check(theta_star[0] == 1.5, "unexpected default pseudo-true value")?;
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// 8. CLI determinism.

fn run_cli(experiment: &str, config: &Path, out: &Path, threads: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tempered"));
    cmd.arg(experiment).arg("--config").arg(config).arg("--out").arg(out);
    if let Some(t) = threads {
        cmd.arg("--threads").arg(t);
    }
    let status = cmd.output().map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{experiment}: {}", String::from_utf8_lossy(&status.stderr)));
    }
    std::fs::read(out.join(format!("{experiment}.csv"))).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 808\nreplications = 4\nn_grid = [50, 500]\nalphas = [0.5, 1.0]\ngrid_nodes = 201\n[curve]\nlo = 0.1\nhi = 1.5\npoints = 15\n",
    )
    .map_err(|e| e.to_string())?;
    let names = [
        "bvm-convergence",
        "vbvm-convergence",
        "robustness-curve",
        "optimal-alpha",
        "failure-case",
        "assumption-checks",
        "surrogate-fidelity",
    ];
    for name in names {
        let a = run_cli(name, &config, &dir.path().join("a"), None)?;
        let b = run_cli(name, &config, &dir.path().join("b"), None)?;
        let c = run_cli(name, &config, &dir.path().join("c"), Some("1"))?;
        check(a == b && a == c, format!("{name}: CSV bodies differ between runs"))?;
        check(a.len() > 40, format!("{name}: CSV unexpectedly short"))?;
    }
    Ok(format!("{} experiments byte-identical across 3 runs", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("Gaussian divergence kernel", divergences, Duration::from_secs(60)),
        ("α-posterior BvM (grid, Laplace prior)", bvm, Duration::from_secs(180)),
        ("mean-field BvM", vbvm, Duration::from_secs(180)),
        ("closed-form mean-field projection", projection, Duration::from_secs(60)),
        ("optimal tempering", optimal_tempering, Duration::from_secs(60)),
        ("regular vs optimized growth", growth, Duration::from_secs(1)),
        ("regression example suite", appendix_suite, Duration::from_secs(300)),
        ("CLI determinism", determinism, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > *budget => Err(format!("{msg} (took {elapsed:.1?}, budget {budget:?})")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("criterion {} PASS [{name}] {msg} ({elapsed:.1?})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} FAIL [{name}] {msg} ({elapsed:.1?})", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
