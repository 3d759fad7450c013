//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured quantities (run with `--nocapture` to see them). Exact
//! oracles carry the correctness burden; the sampling criteria are
//! scaled-down reruns of the simulation experiments.

mod common;

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use dsem_kalman::compile::{build_step_full, compile_participant, CompileOptions};
use dsem_kalman::diagnostics::{ess_bulk, ess_tail, minutes_to_target, rank_normalize, split_rhat};
use dsem_kalman::kalman::{filter_batch, filter_compressed, filter_univariate, Obs};
use dsem_kalman::model::{load_model, load_model_with_overrides, presets::PresetOptions};
use dsem_kalman::oracle::{dense_loglik, gh_integrate_exp_adaptive, simulate_compiled, simulate_direct};
use dsem_kalman::posterior::{
    fd_gradient, JointTarget, MarginalTarget, PosteriorOpts, Target,
};
use dsem_kalman::samplers::{
    nuts_sample, run_experiment, InitStrategy, MassMatrix, SamplerConfig, SamplerKind,
};
use dsem_kalman::simgen::{simulate, SimConfig};

/// Configuration sweep shared by criteria 1 and 2: N <= 3, T <= 8, U <= 3,
/// V1 <= 2, L <= 3, total state dimension <= 12.
fn sweep_dims() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for lag in 1..=3usize {
        for u in 1..=3usize {
            for v1 in 1..=2usize {
                if lag * (u + v1) <= 12 {
                    out.push((lag, u, v1));
                }
            }
        }
    }
    out
}

#[test]
fn criterion_01_dense_gaussian_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(10_001);
    let dims = sweep_dims();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (lag, u, v1) = dims[case % dims.len()];
        let spec = common::random_stable_spec(&mut rng, lag, u, v1);
        let pm = common::compile_reference(&spec).unwrap();
        let n = 1 + case % 3;
        let t_len = 4 + case % 5;
        let mut total = 0.0;
        let mut oracle = 0.0;
        for _ in 0..n {
            let obs = common::random_obs(&mut rng, t_len, u, 0.0);
            total += filter_batch(&pm, &obs, false).unwrap().loglik;
            oracle += dense_loglik(&pm, &obs).unwrap();
        }
        let rel = (total - oracle).abs() / oracle.abs().max(1.0);
        worst = worst.max(rel);
        assert!(rel < 1e-10, "case {case} (L={lag},U={u},V1={v1}): rel {rel:.2e}");
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 1 minute");
    println!("ACCEPTANCE 1 dense-oracle equivalence: PASS (100 configs, worst rel {worst:.2e}, {secs:.1}s)");
}

#[test]
fn criterion_02_simulation_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(20_002);
    let dims = sweep_dims();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (lag, u, v1) = dims[case % dims.len()];
        let spec = common::random_stable_spec(&mut rng, lag, u, v1);
        let noises = common::random_noises(&mut rng, &spec, 10);
        let (_, direct) = simulate_direct(&spec, &[], &[0.0], &[], &[], &noises).unwrap();
        let compiled = simulate_compiled(&spec, &[], &[0.0], &[], &[], &noises).unwrap();
        for t in 0..10 {
            for r in 0..u {
                let d = (direct[t][r] - compiled[t][r]).abs() / (1.0 + direct[t][r].abs());
                worst = worst.max(d);
                assert!(d < 1e-10, "case {case} t {t} r {r}: {d:.2e}");
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 1 minute");
    println!("ACCEPTANCE 2 simulation equivalence: PASS (100 configs, worst rel {worst:.2e}, {secs:.1}s)");
}

#[test]
fn criterion_03_scalar_reduction() {
    let start = Instant::now();
    let spec = load_model("eg1").unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    for case in 0..20 {
        let phi: f64 = rng.random_range(-0.95..0.95);
        let sigma: f64 = rng.random_range(0.2..2.0);
        let psi: f64 = rng.random_range(0.2..2.0);
        let eta2 = [0.0, phi.atanh(), sigma.ln(), psi.ln()];
        let rw = dsem_kalman::model::realize_within_params(&spec, 1.0f64, &[0.0; 8], &eta2, &[], &[])
            .unwrap();
        // The realized values after the round trip through the link functions.
        let phi_r = phi.atanh().tanh();
        let s2 = sigma.ln().exp() * sigma.ln().exp();
        let p2 = psi.ln().exp() * psi.ln().exp();
        let (step, _) = build_step_full(&rw).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * (1.0 + b.abs());
        assert!(close(step.t[(0, 0)], phi_r), "case {case} T[0,0]");
        assert_eq!(step.t[(0, 1)], 0.0);
        assert!(close(step.t[(1, 0)], phi_r));
        assert_eq!(step.t[(1, 1)], 0.0);
        assert_eq!(step.c, vec![0.0, 0.0]);
        assert!(close(step.w[(0, 0)], p2), "case {case} W[0,0]");
        assert!(close(step.w[(0, 1)], p2));
        assert!(close(step.w[(1, 0)], p2));
        assert!(close(step.w[(1, 1)], p2 + s2), "case {case} W[1,1]");
        let z = dsem_kalman::compile::MeasurementMap::for_spec(&spec).dense();
        assert_eq!(z[(0, 0)], 0.0);
        assert_eq!(z[(0, 1)], 1.0);
    }
    println!(
        "ACCEPTANCE 3 scalar reduction: PASS (20 draws, {:.2}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_04_gradient_correctness() {
    let start = Instant::now();
    let presets: [(&str, &str, usize, usize); 5] = [
        ("eg1-scalar-ar1", "", 5, 10),
        ("eg2-onefactor-3ind", "", 4, 8),
        ("eg3-trivar-var1", "", 3, 6),
        ("eg4-arp", "p=2", 4, 8),
        ("eg5-crossclassified", "", 3, 6),
    ];
    let mut worst_all = 0.0f64;
    for (name, overrides, n, t) in presets {
        let spec =
            load_model_with_overrides(name, &PresetOptions::parse(overrides).unwrap()).unwrap();
        let sc = SimConfig { n, t_len: t, seed: 404, ..SimConfig::for_spec(&spec) };
        let sim = simulate(&spec, &sc).unwrap();
        let target = MarginalTarget::new(&spec, &sim.data, PosteriorOpts::default()).unwrap();
        let dim = target.dim();
        for point in 0..3 {
            let mut rng = ChaCha12Rng::seed_from_u64(9000 + point);
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
            let mut grad = vec![0.0; dim];
            let lp = target.logp_grad(&x, &mut grad);
            assert!(lp.is_finite(), "{name} point {point}: logp not finite");
            let fd = fd_gradient(&target, &x);
            for k in 0..dim {
                let rel = (grad[k] - fd[k]).abs() / (1.0 + fd[k].abs());
                worst_all = worst_all.max(rel);
                assert!(
                    rel < 1e-5,
                    "{name} point {point} component {k} ({}): ad {} fd {} rel {rel:.2e}",
                    target.names()[k],
                    grad[k],
                    fd[k]
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "runtime {secs:.1}s exceeds 5 minutes");
    println!("ACCEPTANCE 4 gradient correctness: PASS (5 presets x 3 points, worst rel {worst_all:.2e}, {secs:.1}s)");
}

#[test]
fn criterion_05_marginalization_consistency() {
    let start = Instant::now();
    let spec = load_model("eg1").unwrap();
    let sc = SimConfig { n: 1, t_len: 2, seed: 55, ..SimConfig::for_spec(&spec) };
    let sim = simulate(&spec, &sc).unwrap();
    let marginal = MarginalTarget::new(&spec, &sim.data, PosteriorOpts::default()).unwrap();
    let joint = JointTarget::new(&spec, &sim.data, PosteriorOpts::default()).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let x: Vec<f64> = (0..marginal.dim()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let lp = marginal.logp(&x);
        let xc = x.clone();
        let jref = &joint;
        let log_f = |states: &[f64]| -> f64 {
            let mut full = xc.clone();
            full.extend_from_slice(states);
            jref.logp(&full)
        };
        let integral = gh_integrate_exp_adaptive(log_f, 2, 3.0, 48).ln();
        let rel = (integral - lp).abs() / lp.abs().max(1.0);
        worst = worst.max(rel);
        assert!(rel < 1e-6, "quadrature {integral} vs marginal {lp}");
    }
    println!(
        "ACCEPTANCE 5 marginalization consistency: PASS (worst rel {worst:.2e}, {:.2}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_06_missing_data_marginalization() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let spec = common::random_stable_spec(&mut rng, 1 + case % 2, 2, 1);
        let pm = common::compile_reference(&spec).unwrap();
        let t_len = 5;
        let values: Vec<f64> = (0..t_len * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut mask = vec![true; t_len * 2];
        // One fully missing timepoint (carried forward) and assorted gaps.
        mask[2 * 2] = false;
        mask[2 * 2 + 1] = false;
        mask[(1 + case % 3) * 2 + case % 2] = false;
        let obs = Obs::new(t_len, 2, values, mask).unwrap();
        let got = filter_batch(&pm, &obs, false).unwrap().loglik;
        let uni = filter_univariate(&pm, &obs, false).unwrap().loglik;
        let want = dense_loglik(&pm, &obs).unwrap();
        let rel = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel);
        assert!(rel < 1e-10, "case {case}: batch {got} oracle {want}");
        let rel_u = (uni - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel_u);
        assert!(rel_u < 1e-10, "case {case}: univariate {uni} oracle {want}");
    }
    println!(
        "ACCEPTANCE 6 missing-data marginalization: PASS (worst rel {worst:.2e}, {:.2}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_07_filter_variant_agreement() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for name in ["eg1", "eg2", "eg3"] {
        let spec = load_model(name).unwrap();
        let theta: Vec<f64> = (0..spec.n_theta()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let eta2: Vec<f64> = (0..spec.dims.v2).map(|_| rng.random_range(-0.3..0.3)).collect();
        let pm = compile_participant(
            &spec,
            1.0f64,
            &theta,
            &eta2,
            &[],
            &[],
            15,
            &CompileOptions::default(),
        )
        .unwrap();
        let obs = common::random_obs(&mut rng, 15, spec.dims.u, 0.0);
        let batch = filter_batch(&pm, &obs, false).unwrap().loglik;
        let uni = filter_univariate(&pm, &obs, false).unwrap().loglik;
        let comp = filter_compressed(&pm, &obs)
            .unwrap()
            .unwrap_or_else(|| panic!("{name}: compression must apply"))
            .loglik;
        for (label, v) in [("univariate", uni), ("compressed", comp)] {
            let rel = (v - batch).abs() / batch.abs().max(1.0);
            worst = worst.max(rel);
            assert!(rel < 1e-8, "{name} {label}: {v} vs batch {batch}");
        }
    }
    println!(
        "ACCEPTANCE 7 filter-variant agreement: PASS (worst rel {worst:.2e}, {:.2}s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_08_posterior_recovery() {
    let start = Instant::now();
    let spec = load_model("eg1").unwrap();
    let names = spec.theta_names();
    let n_seeds = 10;
    let mut rhat_ok = 0usize;
    let mut covered = vec![0usize; names.len()];
    for seed in 0..n_seeds as u64 {
        let sc = SimConfig { n: 20, t_len: 50, seed: 100 + seed, ..SimConfig::for_spec(&spec) };
        let sim = simulate(&spec, &sc).unwrap();
        let cfg = SamplerConfig {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.95,
            max_treedepth: 15,
            mass_matrix: MassMatrix::DiagonalAdapted,
            seed: 9000 + seed,
            init: InitStrategy::RandomUniform,
        };
        let outcome = run_experiment(
            &spec,
            &sim.data,
            SamplerKind::NutsKalman,
            &cfg,
            PosteriorOpts::default(),
        )
        .unwrap();
        let mut max_rhat = 0.0f64;
        for (k, name) in names.iter().enumerate() {
            let chains = outcome.param_chains(name).unwrap();
            max_rhat = max_rhat.max(split_rhat(&chains).unwrap());
            let mut pooled: Vec<f64> = chains.into_iter().flatten().collect();
            pooled.sort_by(f64::total_cmp);
            let q = |p: f64| dsem_kalman::diagnostics::quantile_sorted(&pooled, p);
            let truth = sim.truth.theta[name];
            if truth >= q(0.005) && truth <= q(0.995) {
                covered[k] += 1;
            }
        }
        if max_rhat < 1.01 {
            rhat_ok += 1;
        }
        println!(
            "  seed {seed}: max rhat {max_rhat:.4}, divergences {}, elapsed {:.0}s",
            outcome.total_divergences(),
            start.elapsed().as_secs_f64()
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(
        rhat_ok >= 9,
        "max rhat < 1.01 in only {rhat_ok}/10 seeds"
    );
    for (k, name) in names.iter().enumerate() {
        assert!(
            covered[k] >= 8,
            "{name}: truth inside the 99% interval in only {}/10 seeds",
            covered[k]
        );
    }
    assert!(secs < 1800.0, "runtime {secs:.0}s exceeds 30 minutes");
    println!(
        "ACCEPTANCE 8 posterior recovery: PASS (rhat ok {rhat_ok}/10, min coverage {}/10, {secs:.0}s)",
        covered.iter().min().unwrap()
    );
}

#[test]
fn criterion_09_efficiency_ordering() {
    let start = Instant::now();
    let spec = load_model("eg1").unwrap();
    let sc = SimConfig { n: 20, t_len: 50, seed: 777, ..SimConfig::for_spec(&spec) };
    let sim = simulate(&spec, &sc).unwrap();
    let names = spec.theta_names();

    let run = |kind: SamplerKind, iterations: usize, warmup: usize| -> (f64, f64) {
        let cfg = SamplerConfig {
            chains: 4,
            iterations,
            warmup,
            target_accept: 0.95,
            max_treedepth: 12,
            mass_matrix: MassMatrix::DiagonalAdapted,
            seed: 4242,
            init: InitStrategy::RandomUniform,
        };
        let outcome =
            run_experiment(&spec, &sim.data, kind, &cfg, PosteriorOpts::default()).unwrap();
        let mut min_ess = f64::INFINITY;
        for name in &names {
            let chains = outcome.param_chains(name).unwrap();
            min_ess = min_ess.min(ess_bulk(&chains).unwrap());
        }
        let minutes = outcome.elapsed_s / 60.0;
        (min_ess / minutes, outcome.elapsed_s)
    };

    let (kalman_rate, kalman_s) = run(SamplerKind::NutsKalman, 1000, 500);
    let (joint_rate, joint_s) = run(SamplerKind::NutsJoint, 800, 400);
    let (rwm_rate, rwm_s) = run(SamplerKind::RwmCollapsed, 2500, 500);
    let secs = start.elapsed().as_secs_f64();
    println!(
        "  nuts-kalman {kalman_rate:.1}/min ({kalman_s:.0}s), nuts-joint {joint_rate:.1}/min ({joint_s:.0}s), rwm {rwm_rate:.1}/min ({rwm_s:.0}s)"
    );
    assert!(
        kalman_rate >= 2.0 * joint_rate,
        "nuts-kalman {kalman_rate:.1}/min not 2x nuts-joint {joint_rate:.1}/min"
    );
    assert!(
        kalman_rate >= 2.0 * rwm_rate,
        "nuts-kalman {kalman_rate:.1}/min not 2x rwm {rwm_rate:.1}/min"
    );
    assert!(secs < 3600.0, "runtime {secs:.0}s exceeds 1 hour");
    println!(
        "ACCEPTANCE 9 efficiency ordering: PASS (kalman/joint {:.1}x, kalman/rwm {:.1}x, {secs:.0}s)",
        kalman_rate / joint_rate,
        kalman_rate / rwm_rate
    );
}

#[test]
fn criterion_10_diagnostics_calibration() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(1010);
    // iid normal chains.
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let rhat = split_rhat(&chains).unwrap();
    assert!((0.999..1.01).contains(&rhat), "iid rhat {rhat}");
    let bulk = ess_bulk(&chains).unwrap();
    assert!((bulk - 4000.0).abs() < 0.15 * 4000.0, "iid bulk ESS {bulk}");
    let tail = ess_tail(&chains).unwrap();
    assert!(tail > 0.0 && tail.is_finite());

    // AR(1) chains at rho = 0.9.
    let rho = 0.9f64;
    let ar_chains: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let innov = (1.0 - rho * rho).sqrt();
            let mut x = 0.0f64;
            (0..4000)
                .map(|_| {
                    x = rho * x + innov * rng.sample::<f64, _>(StandardNormal);
                    x
                })
                .collect()
        })
        .collect();
    let ar_ess = ess_bulk(&ar_chains).unwrap();
    let want = 16_000.0 * (1.0 - rho) / (1.0 + rho);
    assert!(
        (ar_ess - want).abs() < 0.25 * want,
        "AR(1) ESS {ar_ess}, expected about {want}"
    );

    // Exact monotone invariance.
    let mapped: Vec<Vec<f64>> =
        chains.iter().map(|c| c.iter().map(|v| (2.0 * v - 1.0).exp()).collect()).collect();
    assert_eq!(rank_normalize(&chains).unwrap(), rank_normalize(&mapped).unwrap());
    assert_eq!(split_rhat(&chains).unwrap(), split_rhat(&mapped).unwrap());
    assert_eq!(ess_bulk(&chains).unwrap(), ess_bulk(&mapped).unwrap());
    assert_eq!(ess_tail(&chains).unwrap(), ess_tail(&mapped).unwrap());
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0);
    println!(
        "ACCEPTANCE 10 diagnostics calibration: PASS (iid rhat {rhat:.4}, bulk {bulk:.0}, AR(1) ESS {ar_ess:.0} vs {want:.0}, {secs:.1}s)"
    );
}

#[test]
fn criterion_11_target_time_projection() {
    let minutes = minutes_to_target(18.73, 10_000.0);
    assert!(
        (minutes - 534.0).abs() <= 1.0,
        "projection {minutes} not within 534 +/- 1"
    );
    println!("ACCEPTANCE 11 target-time projection: PASS (10000 / 18.73 = {minutes:.1} minutes)");
}

#[test]
fn criterion_12_nuts_sanity() {
    let start = Instant::now();
    struct StdNormal10 {
        names: Vec<String>,
    }
    impl Target for StdNormal10 {
        fn dim(&self) -> usize {
            10
        }
        fn names(&self) -> &[String] {
            &self.names
        }
        fn logp(&self, x: &[f64]) -> f64 {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
        fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            self.logp(x)
        }
    }
    let target = StdNormal10 { names: (0..10).map(|i| format!("x{i}")).collect() };
    let cfg = SamplerConfig {
        chains: 4,
        iterations: 2000,
        warmup: 1000,
        target_accept: 0.9,
        max_treedepth: 10,
        mass_matrix: MassMatrix::DiagonalAdapted,
        seed: 1212,
        init: InitStrategy::RandomUniform,
    };
    let chains = nuts_sample(&target, &cfg, None).unwrap();
    let total: usize = chains.iter().map(|c| c.draws.len()).sum();
    let divergences: usize = chains.iter().map(|c| c.divergence_count).sum();
    assert!(
        (divergences as f64) < 0.01 * total as f64,
        "{divergences} divergences of {total}"
    );
    for k in 0..10 {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(k)).collect();
        let ess = ess_bulk(&cols).unwrap();
        let flat: Vec<f64> = cols.into_iter().flatten().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var =
            flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (flat.len() - 1) as f64;
        assert!(mean.abs() < 4.0 / ess.sqrt(), "coordinate {k}: mean {mean}, ESS {ess}");
        assert!((var - 1.0).abs() < 0.1, "coordinate {k}: variance {var}");
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 1 minute");
    println!(
        "ACCEPTANCE 12 NUTS sanity: PASS ({total} draws, {divergences} divergences, {secs:.1}s)"
    );
}
