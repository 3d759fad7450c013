//! Posterior samplers: NUTS over the marginal or joint target, and the
//! collapsed single-site random-walk baseline. Chains run in parallel, each
//! on its own counter-based RNG stream, and results are collected in chain
//! order, so draws are bitwise reproducible for a given seed and config.

pub mod nuts;
pub mod rwm;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::posterior::{JointTarget, MarginalTarget, PosteriorOpts, Target};
use nuts::{
    find_reasonable_step_size, initialize, transition, DualAveraging, Metric, WarmupSchedule,
    Welford,
};

/// Which sampler drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    NutsKalman,
    NutsJoint,
    RwmCollapsed,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuts-kalman" => Ok(SamplerKind::NutsKalman),
            "nuts-joint" => Ok(SamplerKind::NutsJoint),
            "rwm-collapsed" => Ok(SamplerKind::RwmCollapsed),
            other => Err(Error::Validation(format!(
                "unknown sampler '{other}' (valid: nuts-kalman, nuts-joint, rwm-collapsed)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SamplerKind::NutsKalman => "nuts-kalman",
            SamplerKind::NutsJoint => "nuts-joint",
            SamplerKind::RwmCollapsed => "rwm-collapsed",
        };
        f.write_str(s)
    }
}

/// Chain initialization strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Uniform(-2, 2) on the unconstrained scale (per coordinate).
    RandomUniform,
    /// Independent draws from the priors (raw latents standard normal).
    PriorDraw,
    /// Named coordinates fixed, the rest Uniform(-2, 2).
    Explicit(BTreeMap<String, f64>),
}

/// Mass matrix handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassMatrix {
    Identity,
    DiagonalAdapted,
}

/// Sampler settings shared by all kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total iterations per chain, warm-up included.
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub mass_matrix: MassMatrix,
    pub seed: u64,
    pub init: InitStrategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.95,
            max_treedepth: 15,
            mass_matrix: MassMatrix::DiagonalAdapted,
            seed: 1,
            init: InitStrategy::RandomUniform,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Validation("need at least one chain".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Validation("warmup must be smaller than iterations".into()));
        }
        if !(self.target_accept > 0.5 && self.target_accept < 1.0) {
            return Err(Error::Validation("target_accept must lie in (0.5, 1)".into()));
        }
        if self.max_treedepth == 0 {
            return Err(Error::Validation("max_treedepth must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warm-up draws and per-chain bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// One row per retained draw, packed order.
    pub draws: Vec<Vec<f64>>,
    pub divergent: Vec<bool>,
    pub treedepth_hit: Vec<bool>,
    /// Step size per retained draw (constant after warm-up for NUTS; mean
    /// proposal scale for the random-walk baseline).
    pub step_size: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergence_count: usize,
    pub wall_warmup_s: f64,
    pub wall_sampling_s: f64,
}

impl ChainDraws {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|row| row[k]).collect()
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn init_draw(
    target: &dyn Target,
    init: &InitStrategy,
    prior_draw: Option<&(dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync)>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let dim = target.dim();
    match init {
        InitStrategy::RandomUniform => {
            Ok((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        }
        InitStrategy::PriorDraw => match prior_draw {
            Some(f) => Ok(f(rng)),
            None => Err(Error::Validation("prior-draw initialization unavailable here".into())),
        },
        InitStrategy::Explicit(map) => {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            for (name, value) in map {
                let idx = target
                    .names()
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| {
                        Error::Validation(format!("init refers to unknown coordinate '{name}'"))
                    })?;
                x[idx] = *value;
            }
            Ok(x)
        }
    }
}

/// Multinomial NUTS with warm-up adaptation over all chains.
pub fn nuts_sample(
    target: &dyn Target,
    cfg: &SamplerConfig,
    prior_draw: Option<&(dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync)>,
) -> Result<Vec<ChainDraws>> {
    cfg.validate()?;
    let results: Vec<Result<ChainDraws>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| nuts_chain(target, cfg, prior_draw, chain))
        .collect();
    results.into_iter().collect()
}

fn nuts_chain(
    target: &dyn Target,
    cfg: &SamplerConfig,
    prior_draw: Option<&(dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync)>,
    chain: usize,
) -> Result<ChainDraws> {
    let dim = target.dim();
    let mut rng = chain_rng(cfg.seed, chain);
    let t_start = Instant::now();
    let mut state = initialize(target, &mut rng, |r| {
        init_draw(target, &cfg.init, prior_draw, r).unwrap_or_else(|_| vec![0.0; dim])
    })?;

    let mut metric = Metric::unit(dim);
    let mut eps = find_reasonable_step_size(target, &metric, &state, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let mut schedule = WarmupSchedule::new(cfg.warmup.max(1));
    let mut welford = Welford::new(dim);

    let keep = cfg.iterations - cfg.warmup;
    let mut draws = Vec::with_capacity(keep);
    let mut divergent = Vec::with_capacity(keep);
    let mut treedepth_hit = Vec::with_capacity(keep);
    let mut step_trace = Vec::with_capacity(keep);
    let mut accept_trace = Vec::with_capacity(keep);
    let mut div_count = 0usize;
    let mut warmup_divergences = 0usize;
    let mut wall_warmup = 0.0f64;

    for iter in 0..cfg.iterations {
        let in_warmup = iter < cfg.warmup;
        let tr = transition(target, &metric, &state, eps, cfg.max_treedepth, &mut rng);
        state = tr.phase;
        if in_warmup {
            da.update(tr.accept_stat);
            eps = da.current();
            if tr.divergent {
                warmup_divergences += 1;
            }
            if cfg.mass_matrix == MassMatrix::DiagonalAdapted {
                if schedule.in_mass_window(iter) {
                    welford.push(&state.q);
                }
                if schedule.window_closes(iter) {
                    if let Some(var) = welford.regularized_variance() {
                        metric = Metric { inv_mass: var };
                        welford.reset();
                        let eps0 = find_reasonable_step_size(target, &metric, &state, &mut rng);
                        da.restart(eps0);
                        eps = da.current();
                    }
                }
            }
            if iter + 1 == cfg.warmup {
                eps = da.averaged();
                wall_warmup = t_start.elapsed().as_secs_f64();
                if warmup_divergences * 10 > cfg.warmup * 9 {
                    return Err(Error::Numeric(format!(
                        "chain {chain}: more than 90% of warm-up transitions diverged \
                         ({warmup_divergences}/{}); step size {eps:.3e}",
                        cfg.warmup
                    )));
                }
            }
        } else {
            draws.push(state.q.clone());
            divergent.push(tr.divergent);
            treedepth_hit.push(tr.treedepth_hit);
            step_trace.push(eps);
            accept_trace.push(tr.accept_stat);
            if tr.divergent {
                div_count += 1;
            }
        }
    }
    let total = t_start.elapsed().as_secs_f64();
    Ok(ChainDraws {
        draws,
        divergent,
        treedepth_hit,
        step_size: step_trace,
        accept_stat: accept_trace,
        divergence_count: div_count,
        wall_warmup_s: wall_warmup,
        wall_sampling_s: total - wall_warmup,
    })
}

/// Collapsed single-site random-walk Metropolis: one full likelihood
/// evaluation per coordinate update, coordinates swept in fixed order.
pub fn rwm_collapsed_sample(
    target: &dyn Target,
    cfg: &SamplerConfig,
    prior_draw: Option<&(dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync)>,
) -> Result<Vec<ChainDraws>> {
    cfg.validate()?;
    let results: Vec<Result<ChainDraws>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(cfg.seed, chain);
            let t_start = Instant::now();
            let dim = target.dim();
            let mut x = None;
            for _ in 0..100 {
                let cand = init_draw(target, &cfg.init, prior_draw, &mut rng)?;
                let lp = target.logp(&cand);
                if lp.is_finite() {
                    x = Some((cand, lp));
                    break;
                }
            }
            let (x0, lp0) = x.ok_or_else(|| {
                Error::Numeric("failed to find a finite initial point after 100 attempts".into())
            })?;
            let mut chain_state = rwm::RwmChainState::new(x0, lp0);
            let keep = cfg.iterations - cfg.warmup;
            let mut draws = Vec::with_capacity(keep);
            let mut accept_trace = Vec::with_capacity(keep);
            let mut step_trace = Vec::with_capacity(keep);
            let mut wall_warmup = 0.0;
            for iter in 0..cfg.iterations {
                let rate = chain_state.sweep(target, &mut rng);
                if iter < cfg.warmup {
                    if (iter + 1) % rwm::ADAPT_BATCH == 0 {
                        chain_state.adapt();
                    }
                    if iter + 1 == cfg.warmup {
                        wall_warmup = t_start.elapsed().as_secs_f64();
                    }
                } else {
                    draws.push(chain_state.x.clone());
                    accept_trace.push(rate);
                    let mean_step = chain_state.log_step.iter().map(|l| l.exp()).sum::<f64>()
                        / dim as f64;
                    step_trace.push(mean_step);
                }
            }
            let total = t_start.elapsed().as_secs_f64();
            Ok(ChainDraws {
                draws,
                divergent: vec![false; keep],
                treedepth_hit: vec![false; keep],
                step_size: step_trace,
                accept_stat: accept_trace,
                divergence_count: 0,
                wall_warmup_s: wall_warmup,
                wall_sampling_s: total - wall_warmup,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// A finished sampling run ready for persistence and diagnostics.
pub struct RunOutcome {
    pub kind: SamplerKind,
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    /// Wall-clock seconds for the whole run (all chains, warm-up included,
    /// I/O excluded).
    pub elapsed_s: f64,
}

impl RunOutcome {
    /// Chains for one named parameter.
    pub fn param_chains(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Validation(format!(
                "parameter '{name}' not in draws; available: {}",
                self.names.join(", ")
            ))
        })?;
        Ok(self.chains.iter().map(|c| c.column(idx)).collect())
    }

    pub fn total_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergence_count).sum()
    }
}

/// Wire a sampler to the matching posterior target and run it.
pub fn run_experiment(
    spec: &ModelSpec,
    data: &Dataset,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    opts: PosteriorOpts,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (names, chains) = match kind {
        SamplerKind::NutsKalman => {
            let target = MarginalTarget::new(spec, data, opts)?;
            let prior = prior_draw_fn(spec, target.packing.dim(), target.packing.n_theta, 0);
            let chains = nuts_sample(&target, cfg, Some(&prior))?;
            (target.names().to_vec(), chains)
        }
        SamplerKind::RwmCollapsed => {
            let target = MarginalTarget::new(spec, data, opts)?;
            let prior = prior_draw_fn(spec, target.packing.dim(), target.packing.n_theta, 0);
            let chains = rwm_collapsed_sample(&target, cfg, Some(&prior))?;
            (target.names().to_vec(), chains)
        }
        SamplerKind::NutsJoint => {
            let target = JointTarget::new(spec, data, opts)?;
            let extra = target.dim() - target.base_dim();
            let prior =
                prior_draw_fn(spec, target.dim(), target.marginal.packing.n_theta, extra);
            let chains = nuts_sample(&target, cfg, Some(&prior))?;
            (target.names().to_vec(), chains)
        }
    };
    Ok(RunOutcome { kind, names, chains, elapsed_s: start.elapsed().as_secs_f64() })
}

/// Prior-draw initializer: theta from its priors, raw latents (and any
/// appended state coordinates) standard normal.
fn prior_draw_fn(
    spec: &ModelSpec,
    dim: usize,
    n_theta: usize,
    _extra: usize,
) -> impl Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync + '_ {
    move |rng: &mut ChaCha12Rng| {
        let mut x = Vec::with_capacity(dim);
        for prior in &spec.priors {
            x.push(sample_prior(prior, rng));
        }
        debug_assert_eq!(x.len(), n_theta);
        while x.len() < dim {
            x.push(rng.sample(StandardNormal));
        }
        x
    }
}

fn sample_prior(prior: &crate::model::ThetaPrior, rng: &mut ChaCha12Rng) -> f64 {
    use crate::model::{PriorDist, PriorScale};
    let constrained = match prior.dist {
        PriorDist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        PriorDist::HalfNormal { sd } => (sd * rng.sample::<f64, _>(StandardNormal)).abs(),
        PriorDist::Exponential { rate } => -rng.random::<f64>().ln() / rate,
        PriorDist::Uniform { low, high } => rng.random_range(low..high),
    };
    match prior.scale {
        PriorScale::Unconstrained => constrained,
        _ => prior.unconstrain(constrained.max(1e-8)),
    }
}
