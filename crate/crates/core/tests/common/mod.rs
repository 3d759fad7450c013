//! Shared helpers for the integration test suites: random stable model
//! configurations with all coupling blocks populated, and reference
//! compilation at a fixed parameter point.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use dsem_kalman::compile::{compile_participant, CompileOptions, ParticipantModel};
use dsem_kalman::kalman::Obs;
use dsem_kalman::linalg::spectral_radius;
use dsem_kalman::model::{
    BetweenLevel, BetweenModel, Dimensions, Entry, ModelSpec, ParamMatrix, PolyMatrix,
    PresetExtras, WithinModel,
};

/// A model whose within level carries nonzero contemporaneous couplings
/// (lower-triangular R0, B0), observation feedback Q, lagged loadings, and
/// random intercepts, rescaled until the compiled dynamics are stable.
pub fn random_stable_spec(rng: &mut ChaCha12Rng, lag: usize, u: usize, v1: usize) -> ModelSpec {
    let mut damp = 1.0f64;
    for _ in 0..60 {
        let spec = draw_spec(rng, lag, u, v1, damp);
        if let Ok(pm) = compile_reference(&spec) {
            let rho = spectral_radius(&pm.steps.at(0).t.map(|v| v));
            if rho < 0.9 {
                return spec;
            }
        }
        damp *= 0.75;
    }
    panic!("could not draw a stable configuration");
}

fn draw_spec(rng: &mut ChaCha12Rng, lag: usize, u: usize, v1: usize, damp: f64) -> ModelSpec {
    let mut lambda1 = PolyMatrix::zero(u, v1, lag);
    let mut r = PolyMatrix::zero(u, u, lag);
    let mut b1 = PolyMatrix::zero(v1, v1, lag);
    let mut q = PolyMatrix::zero(v1, u, lag);
    for i in 0..u {
        for j in 0..v1 {
            let base = if i == j { 1.0 } else { rng.random_range(-0.6..0.6) };
            *lambda1.entry_mut(0, i, j) = Entry::Fixed(base);
        }
    }
    // Strictly lower triangular contemporaneous couplings.
    for i in 0..u {
        for j in 0..i {
            *r.entry_mut(0, i, j) = Entry::Fixed(rng.random_range(-0.5..0.5));
        }
    }
    for i in 0..v1 {
        for j in 0..i {
            *b1.entry_mut(0, i, j) = Entry::Fixed(rng.random_range(-0.5..0.5));
        }
    }
    for i in 0..v1 {
        for j in 0..u {
            *q.entry_mut(0, i, j) = Entry::Fixed(rng.random_range(-0.3..0.3) * damp);
        }
    }
    for l in 1..=lag {
        let scale = damp * 0.5f64.powi(l as i32 - 1);
        for i in 0..u {
            for j in 0..v1 {
                *lambda1.entry_mut(l, i, j) = Entry::Fixed(rng.random_range(-0.3..0.3) * scale);
            }
            for j in 0..u {
                *r.entry_mut(l, i, j) = Entry::Fixed(rng.random_range(-0.4..0.4) * scale);
            }
        }
        for i in 0..v1 {
            for j in 0..v1 {
                *b1.entry_mut(l, i, j) = Entry::Fixed(rng.random_range(-0.5..0.5) * scale);
            }
            for j in 0..u {
                *q.entry_mut(l, i, j) = Entry::Fixed(rng.random_range(-0.3..0.3) * scale);
            }
        }
    }
    let within = WithinModel {
        nu1: (0..u).map(|_| Entry::Fixed(rng.random_range(-0.5..0.5))).collect(),
        alpha1: (0..v1).map(|_| Entry::Fixed(rng.random_range(-0.5..0.5))).collect(),
        lambda1,
        r,
        b1,
        q,
        k1: ParamMatrix::empty(u),
        gamma1: ParamMatrix::empty(v1),
        sigma1_sd: (0..u).map(|_| Entry::Fixed(rng.random_range(0.4..1.2))).collect(),
        psi1_sd: (0..v1).map(|_| Entry::Fixed(rng.random_range(0.4..1.2))).collect(),
    };
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0; u],
        lambda: vec![vec![0.0]; u],
        alpha: vec![Entry::Fixed(0.0)],
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd: vec![Entry::Fixed(1.0)],
        sigma_sd: Vec::new(),
        covariates: None,
    };
    ModelSpec {
        name: format!("random-l{lag}-u{u}-v{v1}"),
        dims: Dimensions { u, v1, v2: 1, v3: 0, lag, n: 0, t: 0 },
        within,
        between_participant,
        between_timepoint: None,
        priors: Vec::new(),
        presets: PresetExtras::default(),
    }
}

/// Compile at the reference parameter point (all parameters fixed in the
/// spec, latents zero).
pub fn compile_reference(spec: &ModelSpec) -> dsem_kalman::Result<ParticipantModel<f64>> {
    compile_participant(spec, 1.0f64, &[], &[0.0], &[], &[], 8, &CompileOptions::default())
}

/// Random complete or partially masked observations.
pub fn random_obs(rng: &mut ChaCha12Rng, t_len: usize, u: usize, missing_rate: f64) -> Obs<f64> {
    let values: Vec<f64> = (0..t_len * u).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mask: Vec<bool> = (0..t_len * u).map(|_| rng.random::<f64>() >= missing_rate).collect();
    // Guarantee at least one observed entry.
    let mut mask = mask;
    if mask.iter().all(|&m| !m) {
        mask[0] = true;
    }
    Obs::new(t_len, u, values, mask).expect("valid observation block")
}

/// Gaussian noise sequences (xi, eps) per timepoint for the given spec.
pub fn random_noises(
    rng: &mut ChaCha12Rng,
    spec: &ModelSpec,
    t_len: usize,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    use rand_distr::StandardNormal;
    (0..t_len)
        .map(|_| {
            let xi: Vec<f64> =
                (0..spec.dims.v1).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8).collect();
            let eps: Vec<f64> =
                (0..spec.dims.u).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8).collect();
            (xi, eps)
        })
        .collect()
}
