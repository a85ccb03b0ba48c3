//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing the test harness capture) and then asserts the verdict.
//!
//! Tests hold a shared lock so that runtime limits are measured without
//! interference from each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use transmix::contrast::{quad_nodes, ContrastConfig, ContrastTarget, NoiseCf};
use transmix::density::{
    em_step, hellinger_sq, l1_distance, marginal_loglik, select_p, GaussianMixtureDensity, GridSpec, SieveBounds,
    SieveConfig,
};
use transmix::ecf::{ecf_at, ecf_grid, Series};
use transmix::estimate::{fit_compact, select_order, two_stage_fixed_k, CompactSpec, SelectionConfig};
use transmix::inference::{bootstrap_sigma, confidence_intervals, default_block_len, ks_normality};
use transmix::model::{boundary_penalty, marginal_mu, ThetaParams};
use transmix::optimize::OptimOptions;
use transmix::pipeline::{emit_plot_data, run_pipeline, InputDigest, PipelineConfig, Stages};
use transmix::rng::{derive_seed, stream};
use transmix::simulate::{q_star, sample, HmmSimConfig, InitLaw, NoiseLaw};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance criterion {id} [{name}]: {verdict} ({detail}; {:.1} s)\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn info(id: u32, detail: &str) {
    let _ = std::io::stderr().write_all(format!("acceptance criterion {id} [info]: {detail}\n").as_bytes());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const REFERENCE_TRANSITION: [[f64; 2]; 2] = [[0.8, 0.2], [0.3, 0.7]];

fn reference_sim(noise: NoiseLaw, n: usize, seed: u64) -> HmmSimConfig {
    HmmSimConfig {
        transition: REFERENCE_TRANSITION.iter().map(|r| r.to_vec()).collect(),
        translations: vec![0.0, 2.0],
        noise,
        init: InitLaw::Stationary,
        n,
        seed,
    }
}

fn reference_theta() -> ThetaParams {
    let q = q_star(&REFERENCE_TRANSITION.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    ThetaParams::new(vec![0.0, 2.0], &q).unwrap()
}

fn reference_contrast() -> ContrastConfig {
    ContrastConfig::new(2.0, 32).unwrap()
}

fn empirical_target(series: &Series, ccfg: &ContrastConfig) -> ContrastTarget {
    let rule = quad_nodes(ccfg).unwrap();
    let grid = ecf_grid(series, &rule.nodes, &rule.nodes).unwrap();
    ContrastTarget::empirical(&grid, ccfg).unwrap()
}

/// Perturbations of the reference parameter: five directions in free
/// coordinates (translation up/down, `Q11` up/down, `Q12` up, with `Q22`
/// absorbing the mass change) at five magnitudes.
fn perturbation_grid(star: &ThetaParams) -> Vec<ThetaParams> {
    let x = star.free_coords();
    let mut out = Vec::new();
    for delta in [0.10, 0.12, 0.14, 0.16, 0.18] {
        for (coord, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)] {
            let mut y = x.clone();
            y[coord] += sign * delta;
            out.push(ThetaParams::from_free_coords(2, &y));
        }
    }
    out
}

#[test]
fn criterion_1_contrast_identifiability() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let star = reference_theta();
    let oracle = ContrastTarget::population(&star, &NoiseCf::gaussian(1.0), &reference_contrast()).unwrap();
    let at_star = oracle.value(&star);
    let grid = perturbation_grid(&star);
    let mut min_far = f64::INFINITY;
    let mut far_points = 0;
    for theta in &grid {
        assert!(theta.is_interior());
        if star.distance(theta).unwrap() >= 0.1 - 1e-12 {
            far_points += 1;
            min_far = min_far.min(oracle.value(theta));
        }
    }
    let elapsed = start.elapsed();
    let pass = at_star <= 1e-18 && far_points == 25 && min_far >= 1e-6 && elapsed < Duration::from_secs(10);
    report(
        1,
        "contrast identifiability",
        pass,
        &format!("M(θ*) = {at_star:.3e}, min over {far_points} perturbations = {min_far:.3e}"),
        elapsed,
    );
    assert!(pass);
}

fn random_interior_theta(k: usize, rng: &mut transmix::rng::StreamRng) -> ThetaParams {
    use rand::Rng;
    loop {
        let mut m = vec![0.0];
        for _ in 1..k {
            m.push(m.last().unwrap() + rng.random_range(0.3..2.0));
        }
        let raw: Vec<f64> = (0..k * k)
            .map(|e| rng.random_range(0.05..1.0) + if e / k == e % k { 1.0 } else { 0.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        let rows: Vec<Vec<f64>> = raw.chunks(k).map(|r| r.iter().map(|v| v / total).collect()).collect();
        let theta = ThetaParams::new(m, &rows).unwrap();
        if theta.is_interior() {
            return theta;
        }
    }
}

#[test]
fn criterion_2_derivatives() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let ccfg = reference_contrast();
    let (series, _) = sample(&reference_sim(NoiseLaw::Gaussian { sigma: 1.0 }, 2000, 11)).unwrap();
    let target = empirical_target(&series, &ccfg);
    let mut rng = stream(2024);
    let mut worst_grad = 0.0_f64;
    for i in 0..50 {
        let k = 2 + i % 2;
        let theta = random_interior_theta(k, &mut rng);
        let g = target.gradient(&theta);
        let x = theta.free_coords();
        let h = 1e-5;
        let fd: Vec<f64> = (0..x.len())
            .map(|c| {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[c] += h;
                xm[c] -= h;
                (target.value(&ThetaParams::from_free_coords(k, &xp))
                    - target.value(&ThetaParams::from_free_coords(k, &xm)))
                    / (2.0 * h)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(diff / norm);
    }

    let star = reference_theta();
    let oracle = ContrastTarget::population(&star, &NoiseCf::gaussian(1.0), &ccfg).unwrap();
    let hess = oracle.gauss_newton_hessian(&star);
    let x = star.free_coords();
    let d = x.len();
    let h = 1e-3;
    let eval = |dx: &[(usize, f64)]| {
        let mut y = x.clone();
        for &(c, v) in dx {
            y[c] += v;
        }
        oracle.value(&ThetaParams::from_free_coords(2, &y))
    };
    let mut fd = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            fd[(i, j)] = (eval(&[(i, h), (j, h)]) - eval(&[(i, h), (j, -h)]) - eval(&[(i, -h), (j, h)])
                + eval(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
        }
    }
    let hess_err = (&fd - &hess).norm() / hess.norm();
    let min_eig = hess.clone().symmetric_eigen().eigenvalues.min();
    let elapsed = start.elapsed();
    let pass = worst_grad <= 1e-5 && hess_err <= 1e-4 && min_eig > 0.0 && elapsed < Duration::from_secs(30);
    report(
        2,
        "derivative correctness",
        pass,
        &format!(
            "worst gradient rel. error {worst_grad:.2e}, Hessian rel. error {hess_err:.2e}, smallest eigenvalue {min_eig:.3e}"
        ),
        elapsed,
    );
    assert!(pass);
}

fn known_order_fit(series: &Series, seed: u64) -> ThetaParams {
    let ccfg = reference_contrast();
    let rule = quad_nodes(&ccfg).unwrap();
    let grid = ecf_grid(series, &rule.nodes, &rule.nodes).unwrap();
    let scfg = SelectionConfig {
        multistart: 5,
        seed,
        ..Default::default()
    };
    fit_compact(2, &CompactSpec::default(), &grid, Some(series), &ccfg, &scfg).unwrap()
}

#[test]
fn criterion_3_root_n_trend() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let star = reference_theta();
    let noise = NoiseLaw::Laplace { scale: 1.0 };
    let errors = |n: usize| -> Vec<f64> {
        (0..100u64)
            .into_par_iter()
            .map(|s| {
                let (series, _) = sample(&reference_sim(noise.clone(), n, derive_seed(3, s))).unwrap();
                known_order_fit(&series, s).distance(&star).unwrap()
            })
            .collect()
    };
    let (small, large) = (median(errors(1000)), median(errors(4000)));
    let ratio = small / large;
    let elapsed = start.elapsed();
    let pass = (1.6..=2.6).contains(&ratio) && elapsed < Duration::from_secs(600);
    report(
        3,
        "root-n consistency trend",
        pass,
        &format!("median error {small:.4} at n=1000, {large:.4} at n=4000, ratio {ratio:.2}"),
        elapsed,
    );

    // The two-stage estimator with the order fixed at 2, for comparison.
    let ccfg = reference_contrast();
    let two_stage = |n: usize| -> f64 {
        median(
            (0..20u64)
                .into_par_iter()
                .map(|s| {
                    let (series, _) = sample(&reference_sim(noise.clone(), n, derive_seed(3, s))).unwrap();
                    let target = empirical_target(&series, &ccfg);
                    let scfg = SelectionConfig { multistart: 5, seed: s, ..Default::default() };
                    let (_, hat) = two_stage_fixed_k(2, &target, Some(&series), n, &scfg).unwrap();
                    hat.distance(&star).unwrap()
                })
                .collect(),
        )
    };
    info(
        3,
        &format!(
            "two-stage refit with λ coefficient 0.5 (20 seeds): median error {:.4} at n=1000, {:.4} at n=4000",
            two_stage(1000),
            two_stage(4000)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_order_selection() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let ccfg = reference_contrast();
    let scfg = |seed| SelectionConfig {
        k_max: 4,
        lambda_coeff: 0.5,
        multistart: 5,
        seed,
        ..Default::default()
    };
    let rate = |sim: &(dyn Fn(u64) -> HmmSimConfig + Sync), want: usize| -> f64 {
        let hits: usize = (0..50u64)
            .into_par_iter()
            .map(|s| {
                let (series, _) = sample(&sim(s)).unwrap();
                let rule = quad_nodes(&ccfg).unwrap();
                let grid = ecf_grid(&series, &rule.nodes, &rule.nodes).unwrap();
                let fit = select_order(&grid, Some(&series), &ccfg, &scfg(s)).unwrap();
                usize::from(fit.k_hat == want)
            })
            .sum();
        hits as f64 / 50.0
    };
    let two = rate(&|s| reference_sim(NoiseLaw::Gaussian { sigma: 1.0 }, 4000, derive_seed(4, s)), 2);
    let one = rate(
        &|s| HmmSimConfig {
            transition: vec![vec![1.0]],
            translations: vec![0.0],
            noise: NoiseLaw::Gaussian { sigma: 1.0 },
            init: InitLaw::Stationary,
            n: 4000,
            seed: derive_seed(40, s),
        },
        1,
    );
    let elapsed = start.elapsed();
    // The margin k = 2 must overcome: the population contrast of the best
    // one-regime fit against the extra penalty paid at the truth.
    let star = reference_theta();
    let oracle = ContrastTarget::population(&star, &NoiseCf::gaussian(1.0), &ccfg).unwrap();
    let lambda = scfg(0).lambda(4000);
    info(
        4,
        &format!(
            "population contrast of the one-regime fit {:.2e}; extra penalty of k = 2 at the truth λ(1 + I) = {:.3} (λ = {lambda:.4})",
            oracle.value(&ThetaParams::trivial()),
            lambda * (1.0 + boundary_penalty(&star)),
        ),
    );
    let pass = two >= 0.8 && one >= 0.95 && elapsed < Duration::from_secs(900);
    report(
        4,
        "order selection",
        pass,
        &format!("k̂ = 2 in {:.0}% of two-regime runs, k̂ = 1 in {:.0}% of one-regime runs", two * 100.0, one * 100.0),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_5_bootstrap() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let n = 4000;
    let star = reference_theta().free_coords();
    let ccfg = reference_contrast();
    let spec = CompactSpec::default();
    let opts = OptimOptions::default();
    let run = |seed: u64| {
        let (series, _) = sample(&reference_sim(NoiseLaw::Gaussian { sigma: 1.0 }, n, derive_seed(5, seed))).unwrap();
        let hat = known_order_fit(&series, seed);
        let cov = bootstrap_sigma(&series, &hat, &spec, &ccfg, &opts, 200, default_block_len(n), seed).unwrap();
        (hat, cov)
    };

    let (hat, cov) = run(0);
    let m2: Vec<f64> = cov.draws.iter().map(|d| (n as f64).sqrt() * (d[0] - hat.free_coords()[0])).collect();
    let (_, ks_p) = ks_normality(&m2).unwrap();

    let mut covered = vec![0usize; star.len()];
    for seed in 0..100 {
        let (hat, cov) = run(seed);
        let ci = confidence_intervals(&hat, &cov, n, 0.95).unwrap();
        for (c, (iv, v)) in covered.iter_mut().zip(ci.iter().zip(&star)) {
            *c += usize::from(iv.contains(*v));
        }
    }
    let coverage: Vec<f64> = covered.iter().map(|&c| c as f64 / 100.0).collect();
    let elapsed = start.elapsed();
    let pass = ks_p > 0.01
        && coverage.iter().all(|c| (0.85..=0.99).contains(c))
        && elapsed < Duration::from_secs(1800);
    report(
        5,
        "bootstrap normality and coverage",
        pass,
        &format!("KS p-value on the translation {ks_p:.3}, per-coordinate coverage {coverage:?}"),
        elapsed,
    );
    assert!(pass);
}

fn brute_force_loglik(f: &GaussianMixtureDensity, y: &[f64], theta: &ThetaParams) -> f64 {
    let k = theta.k();
    let mu: Vec<f64> = (0..k).map(|i| (0..k).map(|j| theta.q_at(i, j)).sum()).collect();
    let mut total = 0.0;
    for &yt in y {
        let mut s = 0.0;
        for (mu_j, m_j) in mu.iter().zip(theta.m()) {
            for i in 0..f.p() {
                let z = (yt - m_j - f.alpha[i]) / f.u[i];
                s += mu_j * f.pi[i] * (-0.5 * z * z).exp() / (f.u[i] * (2.0 * std::f64::consts::PI).sqrt());
            }
        }
        total += s.ln();
    }
    total / y.len() as f64
}

#[test]
fn criterion_6_em_correctness() {
    use rand::Rng;
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = stream(6);
    let mut worst_drop = 0.0_f64;
    let mut checked_steps = 0;
    for run in 0..100 {
        let k = 1 + run % 3;
        let theta = if k == 1 { ThetaParams::trivial() } else { random_interior_theta(k, &mut rng) };
        let n = rng.random_range(50..300);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..6.0)).collect();
        let series = Series::new(y).unwrap();
        let p = rng.random_range(2..6);
        let bounds = SieveBounds { a_p: rng.random_range(0.5..4.0), b_p: 0.1, big_b: 4.0 };
        let raw: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut f = GaussianMixtureDensity::new(
            raw.iter().map(|v| v / total).collect(),
            (0..p).map(|_| rng.random_range(-bounds.a_p..bounds.a_p)).collect(),
            (0..p).map(|_| rng.random_range(0.2..2.0)).collect(),
        )
        .unwrap();
        let mut ll = marginal_loglik(&f, &series, &theta);
        for _ in 0..100 {
            let (next, trunc) = em_step(&f, &series, &theta, &bounds);
            let next_ll = marginal_loglik(&next, &series, &theta);
            if !trunc.any() {
                checked_steps += 1;
                worst_drop = worst_drop.max(ll - next_ll);
            }
            f = next;
            ll = next_ll;
        }
    }

    let mut worst_oracle = 0.0_f64;
    for case in 0..20 {
        let k = 1 + case % 3;
        let theta = if k == 1 { ThetaParams::trivial() } else { random_interior_theta(k, &mut rng) };
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..4.0)).collect();
        let raw: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..1.0)).collect();
        let f = GaussianMixtureDensity::new(
            raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect(),
            (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..2).map(|_| rng.random_range(0.3..2.0)).collect(),
        )
        .unwrap();
        let direct = brute_force_loglik(&f, &y, &theta);
        let fast = marginal_loglik(&f, &Series::new(y).unwrap(), &theta);
        worst_oracle = worst_oracle.max((direct - fast).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst_drop <= 1e-9 && worst_oracle <= 1e-12 && elapsed < Duration::from_secs(60);
    report(
        6,
        "EM correctness",
        pass,
        &format!(
            "largest decrease over {checked_steps} untruncated steps {worst_drop:.2e}, brute-force discrepancy {worst_oracle:.2e}"
        ),
        elapsed,
    );
    assert!(pass);
}

/// Medians of the density error over 30 seeds at each sample size.
fn density_trend(transition: [[f64; 2]; 2], use_l1: bool, tag: u64) -> Vec<f64> {
    let noise = NoiseLaw::Laplace { scale: 1.0 };
    let spec = GridSpec::new(-25.0, 27.0);
    [500, 2000, 8000]
        .iter()
        .map(|&n| {
            let errs: Vec<f64> = (0..30u64)
                .into_par_iter()
                .map(|s| {
                    let sim = HmmSimConfig {
                        transition: transition.iter().map(|r| r.to_vec()).collect(),
                        ..reference_sim(noise.clone(), n, derive_path_seed(tag, n as u64, s))
                    };
                    let star = sim.theta_star().unwrap();
                    let (series, _) = sample(&sim).unwrap();
                    let hat = known_order_fit(&series, s);
                    let cfg = SieveConfig { p_max: 8, restarts: 2, ..Default::default() };
                    let fit = select_p(&series, &hat, &cfg, s).unwrap();
                    if use_l1 {
                        l1_distance(|x| noise.density(x).unwrap(), |x| fit.f_hat.eval(x), &spec)
                    } else {
                        let mu = marginal_mu(&star);
                        let m = star.m().to_vec();
                        let s_star = |x: f64| -> f64 {
                            mu.iter().zip(&m).map(|(w, mj)| w * noise.density(x - mj).unwrap()).sum()
                        };
                        let s_hat = fit.marginal();
                        hellinger_sq(s_star, |x| s_hat.eval(x), &spec)
                    }
                })
                .collect();
            median(errs)
        })
        .collect()
}

fn derive_path_seed(tag: u64, n: u64, s: u64) -> u64 {
    transmix::rng::derive_path(tag, &[n, s])
}

#[test]
fn criterion_7_density_convergence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let hellinger = density_trend([[0.8, 0.2], [0.3, 0.7]], false, 7);
    let l1 = density_trend([[0.85, 0.15], [0.35, 0.65]], true, 77);
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let elapsed = start.elapsed();
    let pass = decreasing(&hellinger) && decreasing(&l1) && elapsed < Duration::from_secs(1800);
    report(
        7,
        "density convergence",
        pass,
        &format!("median squared Hellinger {hellinger:.5?}, median L1 {l1:.4?} at n = 500, 2000, 8000"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_8_closed_form_oracles() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let normal = |mean: f64| move |x: f64| (-(x - mean).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let h = hellinger_sq(normal(0.0), normal(2.0), &GridSpec::new(-14.0, 16.0));
    let h_ok = (h - (1.0 - (-0.5f64).exp())).abs() <= 1e-6;

    let sym = q_star(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
    let refq = q_star(&REFERENCE_TRANSITION.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let close = |a: &[Vec<f64>], b: [[f64; 2]; 2]| a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= 1e-15);
    let q_ok = close(&sym, [[0.45, 0.05], [0.05, 0.45]])
        && close(&refq, [[0.48, 0.12], [0.12, 0.28]])
        && q_star(&[vec![1.0]]).unwrap() == vec![vec![1.0]];

    let mut rng = stream(8);
    let y: Vec<f64> = (0..257).map(|_| rand::Rng::random_range(&mut rng, -4.0..4.0)).collect();
    let series = Series::new(y).unwrap();
    let origin = ecf_at(&series, 0.0, 0.0);
    let mut ecf_ok = (origin.re - 256.0 / 257.0).abs() <= 1e-15 && origin.im.abs() <= 1e-15;
    let nodes = [-1.7, -0.6, 0.6, 1.7];
    let grid = ecf_grid(&series, &nodes, &nodes).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            ecf_ok &= (grid.value(3 - a, 3 - b) - grid.value(a, b).conj()).norm() <= 1e-15;
        }
    }
    let elapsed = start.elapsed();
    let pass = h_ok && q_ok && ecf_ok;
    report(
        8,
        "closed-form oracles",
        pass,
        &format!("h² = {h:.9}, pair-law cases {q_ok}, ECF identities {ecf_ok}"),
        elapsed,
    );
    assert!(pass);
}

fn pipeline_artifacts(threads: usize, series: &Series, dir: &std::path::Path) -> (String, Vec<Vec<u8>>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut cfg = PipelineConfig { seed: 99, ..Default::default() };
        cfg.stages = Stages { bootstrap: true, density: true };
        cfg.selection.k_max = 3;
        cfg.selection.multistart = 4;
        cfg.bootstrap.replicates = 50;
        cfg.density.p_max = 4;
        cfg.density.restarts = 2;
        let digest = InputDigest { path: "series.csv".into(), sha256: "n/a".into(), n: series.len() };
        let report = run_pipeline(series, digest, &cfg).unwrap();
        let files = emit_plot_data(&report, series, dir).unwrap();
        (report.to_json(), files.iter().map(|p| std::fs::read(p).unwrap()).collect())
    })
}

#[test]
fn criterion_9_determinism() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (series, _) = sample(&reference_sim(NoiseLaw::Gaussian { sigma: 1.0 }, 1000, 9)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<(String, Vec<Vec<u8>>)> = [(1, "a"), (1, "b"), (2, "c")]
        .iter()
        .map(|&(t, d)| pipeline_artifacts(t, &series, &tmp.path().join(d)))
        .collect();
    let identical = runs.windows(2).all(|w| w[0] == w[1]) && runs[0].1.len() == 2;
    let elapsed = start.elapsed();
    report(
        9,
        "determinism",
        identical,
        "report and plot files compared across reruns with 1 and 2 worker threads",
        elapsed,
    );
    assert!(identical);
}
