//! Filter correctness against the dense joint-Gaussian oracle, missing-data
//! marginalization, agreement across filter variants, and smoother checks
//! against dense conditioning.

mod common;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use dsem_kalman::compile::{compile_participant, CompileOptions};
use dsem_kalman::kalman::{
    filter_batch, filter_compressed, filter_univariate, smooth, Obs,
};
use dsem_kalman::linalg::{chol_solve_vec, Mat};
use dsem_kalman::model::load_model;
use dsem_kalman::oracle::dense_loglik;

#[test]
fn filter_matches_dense_oracle_on_random_configurations() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for case in 0..30 {
        let lag = 1 + case % 3;
        let u = 1 + case % 2;
        let v1 = 1 + (case / 2) % 2;
        let spec = common::random_stable_spec(&mut rng, lag, u, v1);
        let pm = common::compile_reference(&spec).unwrap();
        let t_len = 4 + case % 5;
        let obs = common::random_obs(&mut rng, t_len, u, 0.0);
        let batch = filter_batch(&pm, &obs, false).unwrap();
        let oracle = dense_loglik(&pm, &obs).unwrap();
        let rel = (batch.loglik - oracle).abs() / oracle.abs().max(1.0);
        assert!(rel < 1e-10, "case {case}: filter {} oracle {oracle}", batch.loglik);
        let uni = filter_univariate(&pm, &obs, false).unwrap();
        let rel = (uni.loglik - batch.loglik).abs() / batch.loglik.abs().max(1.0);
        assert!(rel < 1e-8, "case {case}: univariate disagrees");
    }
}

#[test]
fn missing_data_matches_oracle_on_observed_subset() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let spec = common::random_stable_spec(&mut rng, 1, 2, 1);
    let pm = common::compile_reference(&spec).unwrap();
    // Timepoint 3 fully missing, assorted other gaps.
    let t_len = 6;
    let values: Vec<f64> = (0..t_len * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut mask = vec![true; t_len * 2];
    mask[2 * 2] = false; // (t=2, r=0)
    mask[2 * 2 + 1] = false; // fully missing timepoint
    mask[4 * 2 + 1] = false; // partial
    let obs = Obs::new(t_len, 2, values, mask).unwrap();
    assert_eq!(obs.observed_count(), 9);
    let out = filter_batch(&pm, &obs, true).unwrap();
    let oracle = dense_loglik(&pm, &obs).unwrap();
    assert!(
        (out.loglik - oracle).abs() < 1e-10 * oracle.abs().max(1.0),
        "{} vs {oracle}",
        out.loglik
    );
    let uni = filter_univariate(&pm, &obs, false).unwrap();
    assert!((uni.loglik - out.loglik).abs() < 1e-10);
    // Carried-forward moments at the fully missing timepoint.
    let tr = out.trace.unwrap();
    assert_eq!(tr.filt_mean[2], tr.pred_mean[2]);
}

#[test]
fn participant_order_does_not_change_total_loglik() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let spec = common::random_stable_spec(&mut rng, 2, 1, 1);
    let pm = common::compile_reference(&spec).unwrap();
    let blocks: Vec<Obs<f64>> = (0..3).map(|_| common::random_obs(&mut rng, 6, 1, 0.1)).collect();
    let forward: f64 = blocks.iter().map(|o| filter_batch(&pm, o, false).unwrap().loglik).sum();
    let backward: f64 =
        blocks.iter().rev().map(|o| filter_batch(&pm, o, false).unwrap().loglik).sum();
    assert!((forward - backward).abs() < 1e-12);
}

#[test]
fn compression_agrees_with_full_filter_on_eg2_and_eg3() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    for (name, overrides) in [("eg2", ""), ("eg3", ""), ("eg3", "indicators=2")] {
        let spec = dsem_kalman::model::load_model_with_overrides(
            name,
            &dsem_kalman::model::presets::PresetOptions::parse(overrides).unwrap(),
        )
        .unwrap();
        let theta: Vec<f64> = (0..spec.n_theta()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let eta2: Vec<f64> = (0..spec.dims.v2).map(|_| rng.random_range(-0.3..0.3)).collect();
        let pm = compile_participant(
            &spec,
            1.0f64,
            &theta,
            &eta2,
            &[],
            &[],
            12,
            &CompileOptions::default(),
        )
        .unwrap();
        assert!(pm.factor.is_some(), "{name} {overrides} should expose factor structure");
        // Complete data and a partially missing variant.
        for missing in [0.0, 0.25] {
            let obs = common::random_obs(&mut rng, 12, spec.dims.u, missing);
            let full = filter_univariate(&pm, &obs, false).unwrap();
            let comp = filter_compressed(&pm, &obs)
                .unwrap()
                .expect("compression applies");
            let rel = (full.loglik - comp.loglik).abs() / full.loglik.abs().max(1.0);
            assert!(
                rel < 1e-8,
                "{name} {overrides} missing {missing}: full {} compressed {}",
                full.loglik,
                comp.loglik
            );
            assert_eq!(full.observed_count, comp.observed_count);
        }
    }
}

#[test]
fn compression_identity_loading_is_passthrough() {
    // U = V1 with identity loadings and unit noise: the collapse is a
    // bijection and the correction reduces to the log-determinant of the
    // transform (zero for the identity case).
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let spec = dsem_kalman::model::load_model_with_overrides(
        "eg3",
        &dsem_kalman::model::presets::PresetOptions { indicators: Some(1), ..Default::default() },
    )
    .unwrap();
    // log sigma = 0 gives unit measurement noise; identity loadings are the
    // preset's single-indicator structure.
    let theta = vec![0.0; spec.n_theta()];
    let eta2 = vec![0.0; spec.dims.v2];
    let pm = compile_participant(
        &spec,
        1.0f64,
        &theta,
        &eta2,
        &[],
        &[],
        8,
        &CompileOptions::default(),
    )
    .unwrap();
    let obs = common::random_obs(&mut rng, 8, 3, 0.0);
    let full = filter_univariate(&pm, &obs, false).unwrap();
    let comp = filter_compressed(&pm, &obs).unwrap().expect("U = V1 compression");
    assert!((full.loglik - comp.loglik).abs() < 1e-9);
}

#[test]
fn smoother_matches_dense_conditioning() {
    // Scalar AR(1) with noise, T = 5: smoothed means must equal the
    // conditional mean of the states given all observations, computed from
    // the dense joint Gaussian.
    let spec = load_model("eg1").unwrap();
    let eta2 = [0.3, 0.55f64.atanh(), 0.7f64.ln(), 0.9f64.ln()];
    let pm = compile_participant(
        &spec,
        1.0f64,
        &[0.0; 8],
        &eta2,
        &[],
        &[],
        5,
        &CompileOptions::default(),
    )
    .unwrap();
    let ys = vec![0.4, -0.3, 0.8, 0.2, -0.5];
    let obs = Obs::complete(5, 1, ys.clone()).unwrap();
    let fo = filter_univariate(&pm, &obs, true).unwrap();
    let sm = smooth(&fo, &pm.steps).unwrap();

    // Dense joint over states s_1..s_5 (dimension 10: [eta_t, y_t] per t).
    let m = 2;
    let t_len = 5;
    let mut mean = vec![0.0f64; m * t_len];
    let step = pm.steps.at(0);
    let mut means_t: Vec<Vec<f64>> = vec![pm.init.a1.clone()];
    for _ in 1..t_len {
        let prev = means_t.last().unwrap();
        let mut next = step.t.matvec(prev);
        for (v, c) in next.iter_mut().zip(&step.c) {
            *v += c;
        }
        means_t.push(next);
    }
    for t in 0..t_len {
        for k in 0..m {
            mean[t * m + k] = means_t[t][k];
        }
    }
    let mut cov_rows: Vec<Vec<Mat<f64>>> = vec![vec![pm.init.p1.clone()]];
    for t in 1..t_len {
        let mut row = Vec::new();
        for s in 0..t {
            row.push(step.t.matmul(&cov_rows[t - 1][s]));
        }
        let own = step.t.sandwich(&cov_rows[t - 1][t - 1]).add(&step.w);
        row.push(own);
        cov_rows.push(row);
    }
    let big = Mat::from_fn(m * t_len, m * t_len, |a, b| {
        let (ta, ka) = (a / m, a % m);
        let (tb, kb) = (b / m, b % m);
        if ta >= tb {
            cov_rows[ta][tb][(ka, kb)]
        } else {
            cov_rows[tb][ta][(kb, ka)]
        }
    });
    // Condition on the y components (state index 1 per timepoint).
    let obs_idx: Vec<usize> = (0..t_len).map(|t| t * m + 1).collect();
    let s_oo = Mat::from_fn(t_len, t_len, |a, b| big[(obs_idx[a], obs_idx[b])]);
    let l = s_oo.cholesky().unwrap();
    let resid: Vec<f64> = (0..t_len).map(|t| ys[t] - mean[obs_idx[t]]).collect();
    let w = chol_solve_vec(&l, &resid);
    for t in 0..t_len {
        for k in 0..m {
            let row = t * m + k;
            let mut cond = mean[row];
            for (j, &oj) in obs_idx.iter().enumerate() {
                cond += big[(row, oj)] * w[j];
            }
            assert!(
                (sm.means[t][k] - cond).abs() < 1e-8,
                "state ({t},{k}): smoother {} dense {}",
                sm.means[t][k],
                cond
            );
        }
    }
    // Variance reduction relative to the filtered moments.
    let tr = fo.trace.as_ref().unwrap();
    for t in 0..t_len {
        for k in 0..m {
            assert!(sm.covs[t][(k, k)] <= tr.filt_cov[t][(k, k)] + 1e-8);
        }
    }
}
