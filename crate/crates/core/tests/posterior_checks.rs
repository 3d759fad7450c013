//! Posterior assembly checks: gradients against finite differences across
//! presets, marginalization consistency by quadrature, composition of the
//! log posterior from independently computed pieces, and sentinel behavior.

mod common;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use dsem_kalman::compile::{compile_participant, CompileOptions};
use dsem_kalman::kalman::Obs;
use dsem_kalman::math::LN_2PI;
use dsem_kalman::model::{load_model, between_noncentered, between_y_contribution};
use dsem_kalman::oracle::{dense_loglik, gh_integrate_exp_adaptive};
use dsem_kalman::posterior::{
    fd_gradient, JointTarget, MarginalTarget, PosteriorOpts, Target,
};
use dsem_kalman::simgen::{simulate, SimConfig};

fn preset_data(name: &str, n: usize, t: usize, seed: u64) -> (dsem_kalman::model::ModelSpec, dsem_kalman::data::Dataset) {
    let spec = load_model(name).unwrap();
    let sc = SimConfig { n, t_len: t, seed, ..SimConfig::for_spec(&spec) };
    let sim = simulate(&spec, &sc).unwrap();
    (spec, sim.data)
}

#[test]
fn gradients_match_finite_differences_on_presets() {
    for (name, n, t) in [("eg1", 3, 6), ("eg2", 2, 5), ("eg4", 2, 6), ("eg5", 2, 4)] {
        let (spec, data) = preset_data(name, n, t, 17);
        let target = MarginalTarget::new(&spec, &data, PosteriorOpts::default()).unwrap();
        let dim = target.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
        let mut grad = vec![0.0; dim];
        let lp = target.logp_grad(&x, &mut grad);
        assert!(lp.is_finite(), "{name}: logp not finite");
        let fd = fd_gradient(&target, &x);
        for k in 0..dim {
            let rel = (grad[k] - fd[k]).abs() / (1.0 + fd[k].abs());
            assert!(
                rel < 1e-5,
                "{name} component {k} ({}): ad {} fd {}",
                target.names()[k],
                grad[k],
                fd[k]
            );
        }
    }
}

#[test]
fn quadrature_marginalization_consistency() {
    // N = 1, T = 2, scalar latent: integrating exp(joint) over the two
    // within-level states recovers the marginal posterior density.
    let (spec, data) = preset_data("eg1", 1, 2, 5);
    let marginal = MarginalTarget::new(&spec, &data, PosteriorOpts::default()).unwrap();
    let joint = JointTarget::new(&spec, &data, PosteriorOpts::default()).unwrap();
    let base_dim = marginal.dim();
    assert_eq!(joint.dim(), base_dim + 2);
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for _ in 0..2 {
        let x: Vec<f64> = (0..base_dim).map(|_| rng.random_range(-0.4..0.4)).collect();
        let lp_marginal = marginal.logp(&x);
        assert!(lp_marginal.is_finite());
        let xc = x.clone();
        let jref = &joint;
        let log_f = |states: &[f64]| -> f64 {
            let mut full = xc.clone();
            full.extend_from_slice(states);
            jref.logp(&full)
        };
        let integral = gh_integrate_exp_adaptive(log_f, 2, 3.0, 48).ln();
        let rel = (integral - lp_marginal).abs() / lp_marginal.abs().max(1.0);
        assert!(
            rel < 1e-6,
            "quadrature {integral} vs marginal {lp_marginal} (rel {rel:.2e})"
        );
    }
}

#[test]
fn log_posterior_composes_from_independent_pieces() {
    // Marginal logp at a point equals: dense-oracle likelihood per
    // participant (with adjusted observations) + theta priors + raw latent
    // normal terms. Everything on the right is computed outside the filter.
    let (spec, data) = preset_data("eg1", 5, 10, 23);
    let target = MarginalTarget::new(&spec, &data, PosteriorOpts::default()).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-0.4..0.4)).collect();
    let got = target.logp(&x);

    let theta = &x[..8];
    let mut want = 0.0;
    for (j, p) in spec.priors.iter().enumerate() {
        want += p.log_density(theta[j]);
    }
    let bp = &spec.between_participant;
    let (mean2, factor2) = between_noncentered(bp, 1.0f64, theta, &[]);
    for i in 0..data.n {
        let raw = &x[target.packing.eta2_range(i)];
        for r in raw {
            want += -0.5 * (r * r + LN_2PI);
        }
        let mut eta2 = mean2.clone();
        for (j, &k) in bp.free_components().iter().enumerate() {
            for row in 0..eta2.len() {
                eta2[row] += factor2[(row, k)] * raw[j];
            }
        }
        let y2 = between_y_contribution(bp, 1.0f64, theta, &eta2, &[]);
        let (values, mask) = data.participant_block(i);
        let adjusted: Vec<f64> = values.iter().map(|v| v - y2[0]).collect();
        let obs = Obs::new(data.t_len, 1, adjusted, mask).unwrap();
        let pm = compile_participant(
            &spec,
            1.0f64,
            theta,
            &eta2,
            &[],
            &[],
            data.t_len,
            &CompileOptions::default(),
        )
        .unwrap();
        want += dense_loglik(&pm, &obs).unwrap();
    }
    assert!(
        (got - want).abs() < 1e-8 * want.abs().max(1.0),
        "composed {want} vs target {got}"
    );
}

#[test]
fn identical_participants_get_identical_gradients() {
    // Symmetry forcing: duplicate one participant's data; the raw-latent
    // gradient blocks must coincide.
    let (spec, data) = preset_data("eg1", 2, 6, 31);
    let (values, mask) = data.participant_block(0);
    let mut v2 = values.clone();
    let mut m2 = mask.clone();
    v2.extend_from_slice(&values);
    m2.extend_from_slice(&mask);
    let dup = dsem_kalman::data::Dataset::new(2, 6, 1, 0, vec![1, 2], v2, m2, Vec::new()).unwrap();
    let target = MarginalTarget::new(&spec, &dup, PosteriorOpts::default()).unwrap();
    let mut x = vec![0.0; target.dim()];
    // Same raw latents for both participants.
    for (k, v) in x.iter_mut().enumerate().take(8) {
        *v = 0.05 * k as f64;
    }
    let r1 = target.packing.eta2_range(0);
    let r2 = target.packing.eta2_range(1);
    for j in 0..4 {
        x[r1.start + j] = 0.1 * j as f64;
        x[r2.start + j] = 0.1 * j as f64;
    }
    let mut grad = vec![0.0; target.dim()];
    target.logp_grad(&x, &mut grad);
    for j in 0..4 {
        assert!(
            (grad[r1.start + j] - grad[r2.start + j]).abs() < 1e-10,
            "raw latent {j}: {} vs {}",
            grad[r1.start + j],
            grad[r2.start + j]
        );
    }
}

#[test]
fn non_finite_evaluations_reject_not_crash() {
    let (spec, data) = preset_data("eg1", 2, 4, 41);
    let target = MarginalTarget::new(&spec, &data, PosteriorOpts::default()).unwrap();
    let x = vec![1e6; target.dim()];
    let lp = target.logp(&x);
    assert_eq!(lp, f64::NEG_INFINITY);
    let mut grad = vec![1.0; target.dim()];
    let lp = target.logp_grad(&x, &mut grad);
    assert_eq!(lp, f64::NEG_INFINITY);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn joint_target_rejects_missing_data_and_high_lag() {
    let spec = load_model("eg1").unwrap();
    let sc = SimConfig { n: 2, t_len: 4, seed: 1, missing_rate: 0.3, ..SimConfig::for_spec(&spec) };
    let sim = simulate(&spec, &sc).unwrap();
    assert!(JointTarget::new(&spec, &sim.data, PosteriorOpts::default()).is_err());

    let (spec4, data4) = {
        let spec = dsem_kalman::model::load_model_with_overrides(
            "eg4",
            &dsem_kalman::model::presets::PresetOptions { p: Some(2), ..Default::default() },
        )
        .unwrap();
        let sc = SimConfig { n: 2, t_len: 4, seed: 1, ..SimConfig::for_spec(&spec) };
        let sim = simulate(&spec, &sc).unwrap();
        (spec, sim.data)
    };
    assert!(JointTarget::new(&spec4, &data4, PosteriorOpts::default()).is_err());
}
