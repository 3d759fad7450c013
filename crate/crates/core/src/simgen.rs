//! Synthetic data generation for the experiment presets.
//!
//! Participant- and timepoint-level latents are drawn from their structural
//! priors; per-participant dynamics whose compiled transition has spectral
//! radius at or above the modulus bound are rejected and redrawn (a truncated
//! prior, with the acceptance fraction recorded). States are simulated from
//! the stationary distribution when it exists, otherwise from a long burn-in.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compile::{build_step_full, initial_state, CompileOptions, CompiledStep, InitMode, StepAux};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, sym_eigen};
use crate::model::{between_noncentered, between_y_contribution, ModelSpec};

/// Simulation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub preset: String,
    pub n: usize,
    pub t_len: usize,
    pub seed: u64,
    /// Data-generating static parameters, unconstrained scale, by prior name.
    pub truth: BTreeMap<String, f64>,
    /// Reject participant dynamics with spectral radius at or above this.
    pub max_modulus: f64,
    pub max_attempts: usize,
    /// Probability that an observed scalar is masked.
    pub missing_rate: f64,
}

impl SimConfig {
    /// Defaults from the model's documented preset values.
    pub fn for_spec(spec: &ModelSpec) -> SimConfig {
        SimConfig {
            preset: spec.name.clone(),
            n: spec.presets.default_n.unwrap_or(20),
            t_len: spec.presets.default_t.unwrap_or(50),
            seed: 1,
            truth: spec.presets.truth.clone(),
            max_modulus: 0.95,
            max_attempts: 1000,
            missing_rate: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_len == 0 {
            return Err(Error::Validation("simulation needs n >= 1 and t >= 1".into()));
        }
        if !(self.max_modulus > 0.0 && self.max_modulus <= 1.0) {
            return Err(Error::Validation("max_modulus must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Validation("missing_rate must lie in [0, 1)".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Validation("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the generator drew, for recovery scoring and debugging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub preset: String,
    pub seed: u64,
    /// Unconstrained static parameters by name.
    pub theta: BTreeMap<String, f64>,
    ///

    /// Participant latents (N x V2).
    pub eta2: Vec<Vec<f64>>,
    /// Timepoint latents (T x V3), empty without a between-timepoint level.
    pub eta3: Vec<Vec<f64>>,
    /// Within-level latent states (N x T x V1).
    pub eta1: Vec<Vec<Vec<f64>>>,
    /// Fraction of participant draws accepted by the stationarity filter.
    pub acceptance_fraction: f64,
}

#[derive(Debug)]
pub struct SimOutput {
    pub data: Dataset,
    pub truth: TruthRecord,
}

/// Draw a dataset from the model at the configured truth.
pub fn simulate(spec: &ModelSpec, sc: &SimConfig) -> Result<SimOutput> {
    sc.validate()?;
    let d = spec.dims;
    let mut rng = ChaCha12Rng::seed_from_u64(sc.seed);
    let copts = CompileOptions::default();

    // Static parameters: names absent from the truth map default to zero.
    let mut theta = vec![0.0f64; spec.n_theta()];
    let mut theta_map = BTreeMap::new();
    for (j, prior) in spec.priors.iter().enumerate() {
        if let Some(v) = sc.truth.get(&prior.name) {
            theta[j] = *v;
        }
        theta_map.insert(prior.name.clone(), theta[j]);
    }
    for name in sc.truth.keys() {
        if spec.theta_index(name).is_none() {
            return Err(Error::Validation(format!("truth value for unknown parameter '{name}'")));
        }
    }

    // Within-level covariates, when the model uses them: standard normal
    // draws recorded in the emitted data file.
    let x_dim = spec.within.x1_dim();
    let mut x1_all = vec![0.0f64; sc.n * sc.t_len * x_dim];
    for v in x1_all.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let x1_rows = |i: usize| -> Vec<Vec<f64>> {
        if x_dim == 0 {
            return Vec::new();
        }
        (0..sc.t_len)
            .map(|t| x1_all[(i * sc.t_len + t) * x_dim..(i * sc.t_len + t + 1) * x_dim].to_vec())
            .collect()
    };

    // Timepoint latents from their structural prior.
    let mut eta3: Vec<Vec<f64>> = Vec::new();
    let mut y3: Vec<Vec<f64>> = Vec::new();
    if let Some(bt) = &spec.between_timepoint {
        for t in 0..sc.t_len {
            let x3 = if bt.x_dim() == 0 { &[][..] } else { bt.covariate_row(t) };
            let (mean, factor) = between_noncentered(bt, 1.0f64, &theta, x3);
            let z: Vec<f64> = (0..d.v3).map(|_| rng.sample(StandardNormal)).collect();
            let mut eta = mean;
            for (row, e) in eta.iter_mut().enumerate() {
                for k in 0..d.v3 {
                    *e += factor[(row, k)] * z[k];
                }
            }
            y3.push(between_y_contribution(bt, 1.0f64, &theta, &eta, x3));
            eta3.push(eta);
        }
    }

    let bp = &spec.between_participant;
    let invariant = spec.within.is_time_invariant();
    let mut values = vec![f64::NAN; sc.n * sc.t_len * d.u];
    let mut mask = vec![false; sc.n * sc.t_len * d.u];
    let mut eta2_all: Vec<Vec<f64>> = Vec::with_capacity(sc.n);
    let mut eta1_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sc.n);
    let mut attempts_total = 0usize;

    for i in 0..sc.n {
        let x2 = if bp.x_dim() == 0 { &[][..] } else { bp.covariate_row(i) };
        let (mean2, factor2) = between_noncentered(bp, 1.0f64, &theta, x2);
        let x1 = x1_rows(i);

        // Rejection loop over the participant's dynamics.
        let mut accepted: Option<(Vec<f64>, Vec<(CompiledStep<f64>, StepAux<f64>)>)> = None;
        for _ in 0..sc.max_attempts {
            attempts_total += 1;
            let z: Vec<f64> = (0..d.v2).map(|_| rng.sample(StandardNormal)).collect();
            let mut eta2 = mean2.clone();
            for (row, e) in eta2.iter_mut().enumerate() {
                for k in 0..d.v2 {
                    *e += factor2[(row, k)] * z[k];
                }
            }
            let steps = compile_steps(spec, &theta, &eta2, &eta3, &x1, sc.t_len, invariant)?;
            let stable = steps
                .iter()
                .all(|(step, _)| spectral_radius(&step.t) < sc.max_modulus);
            if stable {
                accepted = Some((eta2, steps));
                break;
            }
        }
        let (eta2, steps) = accepted.ok_or_else(|| {
            Error::Numeric(format!(
                "stationarity rejection budget exhausted for participant {} (acceptance fraction {:.4})",
                i + 1,
                sc.n as f64 / attempts_total as f64
            ))
        })?;

        // Initial state: stationary moments of the first step, or a burn-in
        // pass when the dynamics are not stable enough for a stationary prior.
        let init = initial_state(&steps[0].0, &copts);
        let m = d.state_dim();
        let offset = d.lag * d.v1;
        let mut state = vec![0.0f64; m];
        match init.mode {
            InitMode::Stationary => {
                let (eig, vecs) = sym_eigen(&init.p1);
                let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                for r in 0..m {
                    state[r] = init.a1[r];
                    for k in 0..m {
                        let sd = eig[k].max(0.0).sqrt();
                        state[r] += vecs[(r, k)] * sd * z[k];
                    }
                }
            }
            _ => {
                // Long presample pass, discarded.
                for b in 0..10 * sc.t_len {
                    let idx = if invariant { 0 } else { b % steps.len() };
                    state = advance(&steps[idx].0, &steps[idx].1, &state, spec, &theta, &eta2, &eta3, &x1, idx, &mut rng)?;
                }
            }
        }

        let y2 = between_y_contribution(bp, 1.0f64, &theta, &eta2, x2);
        let mut eta1_path = Vec::with_capacity(sc.t_len);
        for t in 0..sc.t_len {
            eta1_path.push(state[..d.v1].to_vec());
            for r in 0..d.u {
                let mut y = state[offset + r] + y2[r];
                if !y3.is_empty() {
                    y += y3[t][r];
                }
                let pos = (i * sc.t_len + t) * d.u + r;
                let masked = sc.missing_rate > 0.0 && rng.random::<f64>() < sc.missing_rate;
                if !masked {
                    values[pos] = y;
                    mask[pos] = true;
                }
            }
            if t + 1 < sc.t_len {
                let idx = if invariant { 0 } else { t };
                state = advance(&steps[idx].0, &steps[idx].1, &state, spec, &theta, &eta2, &eta3, &x1, idx, &mut rng)?;
            }
        }
        eta2_all.push(eta2);
        eta1_all.push(eta1_path);
    }

    let data = Dataset::new(
        sc.n,
        sc.t_len,
        d.u,
        x_dim,
        (1..=sc.n as i64).collect(),
        values,
        mask,
        x1_all,
    )?;
    Ok(SimOutput {
        data,
        truth: TruthRecord {
            preset: sc.preset.clone(),
            seed: sc.seed,
            theta: theta_map,
            eta2: eta2_all,
            eta3,
            eta1: eta1_all,
            acceptance_fraction: sc.n as f64 / attempts_total as f64,
        },
    })
}

/// Compile the per-transition steps (with noise-mapping blocks) a simulation
/// needs: one when time-invariant, `T-1` (or one for `T = 1`) otherwise.
fn compile_steps(
    spec: &ModelSpec,
    theta: &[f64],
    eta2: &[f64],
    eta3: &[Vec<f64>],
    x1: &[Vec<f64>],
    t_len: usize,
    invariant: bool,
) -> Result<Vec<(CompiledStep<f64>, StepAux<f64>)>> {
    let empty: Vec<f64> = Vec::new();
    let pick_e3 = |t: usize| -> &[f64] {
        if eta3.is_empty() {
            &empty
        } else {
            &eta3[t]
        }
    };
    let pick_x = |t: usize| -> &[f64] {
        if x1.is_empty() {
            &empty
        } else {
            &x1[t]
        }
    };
    let slots: Vec<usize> = if invariant {
        vec![0]
    } else if t_len == 1 {
        vec![0]
    } else {
        (1..t_len).collect()
    };
    let mut out = Vec::with_capacity(slots.len().max(1));
    if !invariant && t_len > 1 {
        // Slot 0 (initial-state construction) first.
        let rw = crate::model::realize_within_params(spec, 1.0f64, theta, eta2, pick_e3(0), pick_x(0))?;
        out.push(build_step_full(&rw)?);
        for &t in &slots {
            let rw =
                crate::model::realize_within_params(spec, 1.0f64, theta, eta2, pick_e3(t), pick_x(t))?;
            out.push(build_step_full(&rw)?);
        }
    } else {
        let rw = crate::model::realize_within_params(spec, 1.0f64, theta, eta2, pick_e3(0), pick_x(0))?;
        out.push(build_step_full(&rw)?);
    }
    Ok(out)
}

/// One transition of the augmented state with fresh disturbances.
#[allow(clippy::too_many_arguments)]
fn advance(
    step: &CompiledStep<f64>,
    aux: &StepAux<f64>,
    state: &[f64],
    spec: &ModelSpec,
    _theta: &[f64],
    _eta2: &[f64],
    _eta3: &[Vec<f64>],
    _x1: &[Vec<f64>],
    _idx: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let d = spec.dims;
    let offset = d.lag * d.v1;
    // Disturbance scales live inside the compiled noise mapping; draw the
    // structural and measurement disturbances from the realized variances.
    let psi = &aux.psi_sd;
    let sig = &aux.sigma_sd;
    let xi: Vec<f64> = psi.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
    let eps: Vec<f64> = sig.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
    let (w1, w3) = aux.map_noise(&xi, &eps);
    let mut next = step.t.matvec(state);
    for (v, c) in next.iter_mut().zip(&step.c) {
        *v += c;
    }
    for k in 0..d.v1 {
        next[k] += w1[k];
    }
    for k in 0..d.u {
        next[offset + k] += w3[k];
    }
    Ok(next)
}

/// Per-parameter recovery summary against the generating truth.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryRow {
    pub name: String,
    pub truth: f64,
    pub post_mean: f64,
    pub post_sd: f64,
    pub bias: f64,
    /// `(post_mean - truth) / post_sd`; infinite when the posterior is
    /// degenerate with nonzero bias.
    pub z: f64,
    /// Truth inside the central 90% interval (5% and 95% quantiles).
    pub covered_90: bool,
}

/// Score pooled posterior draws against the truth record. `names` labels the
/// columns of `pooled`; `params` selects which to score.
pub fn parameter_recovery_score(
    truth: &BTreeMap<String, f64>,
    names: &[String],
    pooled: &[Vec<f64>],
    params: &[String],
) -> Result<Vec<RecoveryRow>> {
    let mut rows = Vec::with_capacity(params.len());
    for p in params {
        let truth_v = *truth
            .get(p)
            .ok_or_else(|| Error::Validation(format!("no truth value for parameter '{p}'")))?;
        let col = names
            .iter()
            .position(|n| n == p)
            .ok_or_else(|| Error::Validation(format!("parameter '{p}' not found in draws")))?;
        let draws = &pooled[col];
        if draws.is_empty() {
            return Err(Error::Validation(format!("no draws for parameter '{p}'")));
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = var.max(0.0).sqrt();
        let bias = mean - truth_v;
        let z = if sd > 0.0 {
            bias / sd
        } else if bias == 0.0 {
            0.0
        } else {
            f64::INFINITY * bias.signum()
        };
        let mut sorted = draws.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let w = pos - lo as f64;
            sorted[lo] * (1.0 - w) + sorted[hi] * w
        };
        let covered_90 = truth_v >= q(0.05) && truth_v <= q(0.95);
        rows.push(RecoveryRow { name: p.clone(), truth: truth_v, post_mean: mean, post_sd: sd, bias, z, covered_90 });
    }
    Ok(rows)
}
