//! Marginal log posterior over static parameters and between-level latents.
//!
//! The within-level latent states are integrated out analytically by the
//! Kalman filter, so the sampled vector is only `(Theta, eta2 raws, eta3
//! raws)`. Between-level latents use a non-centered parameterization by
//! default: `eta = mean(Theta) + factor(Theta) * raw` with standard-normal
//! raws, which absorbs the hierarchical prior exactly; components with
//! disturbance pinned at zero are excluded from the vector.
//!
//! Gradients are exact reverse-mode derivatives of the full pipeline
//! (transforms, between-level scaling, state space assembly, filter
//! recursion, priors). The production path re-runs the filter in segments of
//! about sqrt(T) timepoints during the backward sweep, so tape memory stays
//! bounded; a full-tape mode exists for cross-checks.

use rayon::prelude::*;

use crate::compile::{compile_participant, compile_participant_window, CompileOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kalman::{
    compress_observations, compress_observations_ungated, compressed_segment, filter,
    univariate_segment, FilterStrategy, Obs, RunState,
};
use crate::linalg::Mat;
use crate::math::LN_2PI;
use crate::model::{
    between_noncentered_re, between_y_contribution_re, realize_between, BetweenModel,
    BetweenRealized, ModelSpec,
};
use crate::tape::{Real, Tape, Var};

/// Parameterization of the between-level latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    /// Standard-normal raws scaled through the prior factor.
    #[default]
    NonCentered,
    /// Latent values sampled directly (free components only).
    Centered,
}

/// Gradient evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Re-run filter segments of about sqrt(T) steps during the backward pass.
    #[default]
    Checkpointed,
    /// Record the whole evaluation on one tape per participant.
    FullTape,
}

/// Index map from packed sampler coordinates to model quantities.
#[derive(Debug, Clone)]
pub struct Packing {
    pub n_theta: usize,
    pub n: usize,
    pub t_len: usize,
    /// Free (sampled) component indices of the between-participant latents.
    pub v2_free: Vec<usize>,
    /// Free component indices of the between-timepoint latents.
    pub v3_free: Vec<usize>,
    pub parameterization: Parameterization,
    names: Vec<String>,
}

impl Packing {
    pub fn new(spec: &ModelSpec, n: usize, t_len: usize, parameterization: Parameterization) -> Self {
        let v2_free = spec.between_participant.free_components();
        let v3_free = match &spec.between_timepoint {
            Some(bt) => bt.free_components(),
            None => Vec::new(),
        };
        let mut names: Vec<String> = spec.theta_names();
        for i in 0..n {
            for &k in &v2_free {
                names.push(format!("eta2.raw.i{}.k{}", i + 1, k + 1));
            }
        }
        if !v3_free.is_empty() {
            for t in 0..t_len {
                for &k in &v3_free {
                    names.push(format!("eta3.raw.t{}.k{}", t + 1, k + 1));
                }
            }
        }
        Packing {
            n_theta: spec.n_theta(),
            n,
            t_len,
            v2_free,
            v3_free,
            parameterization,
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_theta + self.n * self.v2_free.len() + self.t_len * self.v3_free.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        0..self.n_theta
    }

    pub fn eta2_range(&self, i: usize) -> std::ops::Range<usize> {
        let f = self.v2_free.len();
        let start = self.n_theta + i * f;
        start..start + f
    }

    pub fn eta3_range(&self, t: usize) -> std::ops::Range<usize> {
        let f = self.v3_free.len();
        let start = self.n_theta + self.n * self.v2_free.len() + t * f;
        start..start + f
    }
}

/// Value and gradient of the log density, aligned with the packing.
#[derive(Debug, Clone)]
pub struct LogDensityResult {
    pub logp: f64,
    pub grad: Vec<f64>,
}

/// A differentiable unnormalized log density for the samplers.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn names(&self) -> &[String];
    /// Log density; non-finite values signal rejection, never a crash.
    fn logp(&self, x: &[f64]) -> f64;
    /// Log density and gradient (gradient zeroed on rejection).
    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Posterior evaluation options.
#[derive(Debug, Clone, Copy, Default)]
pub struct PosteriorOpts {
    pub strategy: FilterStrategy,
    pub compile: CompileOptions,
    pub grad: GradMode,
    pub parameterization: Parameterization,
}

/// Expand one between-level latent vector from packed coordinates and return
/// its log prior contribution.
fn expand_between<S: Real>(
    re: &BetweenRealized<S>,
    proto: S,
    x_unit: &[f64],
    packed: &[S],
    free: &[usize],
    parameterization: Parameterization,
) -> Result<(Vec<S>, S)> {
    let (mean, factor) = between_noncentered_re(re, proto, x_unit);
    let v = mean.len();
    match parameterization {
        Parameterization::NonCentered => {
            let mut eta = mean;
            let mut lp = proto.lit(0.0);
            for (j, &k) in free.iter().enumerate() {
                let r = packed[j];
                for row in 0..v {
                    eta[row] = eta[row] + factor[(row, k)] * r;
                }
                lp = lp - (r * r + proto.lit(LN_2PI)) * proto.lit(0.5);
            }
            Ok((eta, lp))
        }
        Parameterization::Centered => {
            // packed holds eta at the free indices; whiten through the free
            // sub-factor (lower triangular with positive diagonal).
            let f = free.len();
            let mut raw = vec![proto.lit(0.0); f];
            let mut logdet = proto.lit(0.0);
            for a in 0..f {
                let mut acc = packed[a] - mean[free[a]];
                for b in 0..a {
                    acc = acc - factor[(free[a], free[b])] * raw[b];
                }
                let d = factor[(free[a], free[a])];
                if !(d.val() > 0.0) {
                    return Err(Error::Numeric(
                        "centered parameterization needs positive disturbance scales".into(),
                    ));
                }
                raw[a] = acc / d;
                logdet = logdet + d.ln();
            }
            let mut eta = mean;
            for (b, &k) in free.iter().enumerate() {
                for row in 0..v {
                    eta[row] = eta[row] + factor[(row, k)] * raw[b];
                }
            }
            let mut lp = -logdet;
            for r in &raw {
                lp = lp - (*r * *r + proto.lit(LN_2PI)) * proto.lit(0.5);
            }
            Ok((eta, lp))
        }
    }
}

/// Everything realized once per evaluation that does not depend on the
/// participant: theta, eta3 per timepoint, y3 observation contributions.
struct SharedRealization<S> {
    theta: Vec<S>,
    /// One vector per timepoint; empty when no between-timepoint level.
    eta3: Vec<Vec<S>>,
    /// y3 contribution per timepoint (empty likewise).
    y3: Vec<Vec<S>>,
    /// Prior terms: theta priors + eta3 raw densities.
    prior: S,
}

fn shared_realization<S: Real>(
    spec: &ModelSpec,
    packing: &Packing,
    proto: S,
    x: &[S],
    with_theta_priors: bool,
) -> Result<SharedRealization<S>> {
    let theta: Vec<S> = x[packing.theta_range()].to_vec();
    let mut prior = proto.lit(0.0);
    if with_theta_priors {
        for (j, p) in spec.priors.iter().enumerate() {
            prior = prior + p.log_density(theta[j]);
        }
    }
    let mut eta3: Vec<Vec<S>> = Vec::new();
    let mut y3: Vec<Vec<S>> = Vec::new();
    if let Some(bt) = &spec.between_timepoint {
        let re = realize_between(bt, proto, &theta);
        eta3.reserve(packing.t_len);
        y3.reserve(packing.t_len);
        for t in 0..packing.t_len {
            let packed = &x[packing.eta3_range(t)];
            let x3 = bt.covariate_row(t.min(unit_rows(bt).saturating_sub(1)));
            let x3 = if bt.x_dim() == 0 { &[][..] } else { x3 };
            let (eta, lp) = expand_between(
                &re,
                proto,
                x3,
                packed,
                &packing.v3_free,
                packing.parameterization,
            )?;
            prior = prior + lp;
            y3.push(between_y_contribution_re(bt, &re, proto, &eta, x3));
            eta3.push(eta);
        }
    }
    Ok(SharedRealization { theta, eta3, y3, prior })
}

fn unit_rows(bm: &BetweenModel) -> usize {
    bm.covariates.as_ref().map(|c| c.len()).unwrap_or(0)
}

/// Adjusted observations for one participant: data minus the between-level
/// contributions, as scalars in the evaluation context.
fn adjusted_obs<S: Real>(
    data: &Dataset,
    i: usize,
    proto: S,
    y2: &[S],
    y3: &[Vec<S>],
    t0: usize,
    t1: usize,
) -> Result<Obs<S>> {
    let (values, mask) = data.participant_block(i);
    let u = data.u;
    let mut out: Vec<S> = Vec::with_capacity(values.len());
    for t in 0..data.t_len {
        for r in 0..u {
            let pos = t * u + r;
            if mask[pos] && t >= t0 && t < t1 {
                let mut v = proto.lit(values[pos]) - y2[r];
                if !y3.is_empty() {
                    v = v - y3[t][r];
                }
                out.push(v);
            } else {
                out.push(proto.lit(0.0));
            }
        }
    }
    // Entries outside [t0, t1) are placeholders; the mask is narrowed so they
    // can never be consumed.
    let mask_ranged: Vec<bool> = (0..data.t_len * u)
        .map(|pos| {
            let t = pos / u;
            mask[pos] && t >= t0 && t < t1
        })
        .collect();
    Obs::new(data.t_len, u, out, mask_ranged)
}

/// The marginal posterior target (Kalman-filtered likelihood).
pub struct MarginalTarget<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub packing: Packing,
    pub opts: PosteriorOpts,
    checkpoint: usize,
}

impl<'a> MarginalTarget<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, opts: PosteriorOpts) -> Result<Self> {
        if data.u != spec.dims.u {
            return Err(Error::Validation(format!(
                "data has {} indicators, model expects {}",
                data.u, spec.dims.u
            )));
        }
        if data.x_dim != spec.within.x1_dim() {
            return Err(Error::Validation(format!(
                "data has {} covariates, model expects {}",
                data.x_dim,
                spec.within.x1_dim()
            )));
        }
        if let Some(bt) = &spec.between_timepoint {
            if bt.x_dim() > 0 && unit_rows(bt) < data.t_len {
                return Err(Error::Validation(
                    "between-timepoint covariate table shorter than the series".into(),
                ));
            }
        }
        if spec.between_participant.x_dim() > 0 && unit_rows(&spec.between_participant) < data.n {
            return Err(Error::Validation(
                "between-participant covariate table shorter than the panel".into(),
            ));
        }
        if data.observed_total() == 0 {
            return Err(Error::Validation("no observed entries in the dataset".into()));
        }
        let packing = Packing::new(spec, data.n, data.t_len, opts.parameterization);
        let checkpoint = (data.t_len as f64).sqrt().ceil() as usize;
        Ok(MarginalTarget { spec, data, packing, opts, checkpoint: checkpoint.max(1) })
    }

    /// One participant's adjusted observations and log-likelihood, generic
    /// over the scalar.
    fn participant_loglik<S: Real>(
        &self,
        proto: S,
        x: &[S],
        shared: &SharedRealization<S>,
        i: usize,
    ) -> Result<S> {
        let bp = &self.spec.between_participant;
        let x2 = if bp.x_dim() == 0 { &[][..] } else { bp.covariate_row(i) };
        let packed = &x[self.packing.eta2_range(i)];
        let re = realize_between(bp, proto, &shared.theta);
        let (eta2, lp_raw) = expand_between(
            &re,
            proto,
            x2,
            packed,
            &self.packing.v2_free,
            self.packing.parameterization,
        )?;
        let y2 = between_y_contribution_re(bp, &re, proto, &eta2, x2);
        let obs = adjusted_obs(self.data, i, proto, &y2, &shared.y3, 0, self.data.t_len)?;
        let pm = compile_participant(
            self.spec,
            proto,
            &shared.theta,
            &eta2,
            &shared.eta3,
            &self.data.x1_rows(i),
            self.data.t_len,
            &self.opts.compile,
        )
        .map_err(|e| Error::Numeric(format!("participant {}: {e}", i + 1)))?;
        let out = filter(&pm, &obs, self.opts.strategy, false)
            .map_err(|e| Error::Numeric(format!("participant {}: {e}", i + 1)))?;
        Ok(out.loglik + lp_raw)
    }

    pub fn logp_checked(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.packing.dim() {
            return Err(Error::Validation("parameter vector length mismatch".into()));
        }
        // Per-participant contributions are computed in parallel and reduced
        // in fixed participant order.
        let shared = shared_realization(self.spec, &self.packing, 1.0f64, x, true)?;
        let parts: Vec<Result<f64>> = (0..self.data.n)
            .into_par_iter()
            .map(|i| self.participant_loglik(1.0f64, x, &shared, i))
            .collect();
        let mut total = shared.prior;
        for p in parts {
            total += p?;
        }
        Ok(total)
    }

    pub fn grad_checked(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if x.len() != self.packing.dim() || grad.len() != x.len() {
            return Err(Error::Validation("parameter vector length mismatch".into()));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.opts.grad {
            GradMode::FullTape => self.grad_full_tape(x, grad),
            GradMode::Checkpointed => self.grad_checkpointed(x, grad),
        }
    }

    fn grad_full_tape(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        // Prior + shared terms on one tape, then per-participant tapes,
        // reduced in fixed order.
        let prior_part = {
            let tape = Tape::new();
            let leaves: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
            let proto = tape.constant(0.0);
            let shared = shared_realization(self.spec, &self.packing, proto, &leaves, true)?;
            let adj = tape.gradient(&[shared.prior.seed(1.0)]);
            for (g, leaf) in grad.iter_mut().zip(&leaves) {
                *g += adj.of(*leaf);
            }
            shared.prior.val()
        };
        let parts: Vec<Result<(f64, Vec<f64>)>> = (0..self.data.n)
            .into_par_iter()
            .map(|i| {
                let tape = Tape::new();
                let relevant = self.relevant_coords(i);
                let mut leaves: Vec<Var> = x.iter().map(|&v| tape.constant(v)).collect();
                for &k in &relevant {
                    leaves[k] = tape.leaf(x[k]);
                }
                let proto = tape.constant(0.0);
                let shared = shared_realization(self.spec, &self.packing, proto, &leaves, false)?;
                let ll = self.participant_loglik(proto, &leaves, &shared, i)?;
                let adj = tape.gradient(&[ll.seed(1.0)]);
                let mut g = vec![0.0; x.len()];
                for &k in &relevant {
                    g[k] = adj.of(leaves[k]);
                }
                Ok((ll.val(), g))
            })
            .collect();
        let mut total = prior_part;
        for p in parts {
            let (ll, g) = p?;
            total += ll;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        Ok(total)
    }

    fn grad_checkpointed(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        // Shared prior terms (theta priors, eta3 raws) on a small tape.
        let prior_part = {
            let tape = Tape::new();
            let leaves: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
            let proto = tape.constant(0.0);
            let shared = shared_realization(self.spec, &self.packing, proto, &leaves, true)?;
            let adj = tape.gradient(&[shared.prior.seed(1.0)]);
            for (g, leaf) in grad.iter_mut().zip(&leaves) {
                *g += adj.of(*leaf);
            }
            shared.prior.val()
        };
        let parts: Vec<Result<(f64, Vec<f64>)>> = (0..self.data.n)
            .into_par_iter()
            .map(|i| self.participant_grad_checkpointed(x, i))
            .collect();
        let mut total = prior_part;
        for p in parts {
            let (ll, g) = p?;
            total += ll;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        Ok(total)
    }

    /// Coordinates participant `i`'s likelihood can depend on: all static
    /// parameters, the participant's own raw latents, and every timepoint
    /// latent.
    fn relevant_coords(&self, i: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.packing.n_theta).collect();
        idx.extend(self.packing.eta2_range(i));
        if !self.packing.v3_free.is_empty() {
            idx.extend(self.packing.eta3_range(0).start..self.packing.eta3_range(self.packing.t_len - 1).end);
        }
        idx
    }

    /// Checkpointed reverse sweep for one participant. One tape holds a
    /// shared prefix (realized parameters, compiled dynamics, adjusted
    /// observations); a primal pass stores the predicted filter moments at
    /// segment boundaries, then segments are replayed on top of the prefix in
    /// reverse order, swept backward, and truncated away, carrying the state
    /// adjoint across segments. Tape memory stays at prefix + one segment.
    fn participant_grad_checkpointed(&self, x: &[f64], i: usize) -> Result<(f64, Vec<f64>)> {
        let t_len = self.data.t_len;
        let seg = self.checkpoint;
        let n_seg = t_len.div_ceil(seg);
        let bp = &self.spec.between_participant;
        let x2 = if bp.x_dim() == 0 { &[][..] } else { bp.covariate_row(i) };
        let err_ctx = |e: Error| Error::Numeric(format!("participant {}: {e}", i + 1));

        // Phase A: primal (f64) forward pass storing segment-boundary states.
        let shared = shared_realization(self.spec, &self.packing, 1.0f64, x, false)?;
        let packed = &x[self.packing.eta2_range(i)];
        let re = realize_between(bp, 1.0f64, &shared.theta);
        let (eta2, lp_raw) = expand_between(
            &re,
            1.0f64,
            x2,
            packed,
            &self.packing.v2_free,
            self.packing.parameterization,
        )?;
        let y2 = between_y_contribution_re(bp, &re, 1.0f64, &eta2, x2);
        let obs = adjusted_obs(self.data, i, 1.0f64, &y2, &shared.y3, 0, t_len)?;
        let pm = compile_participant(
            self.spec,
            1.0f64,
            &shared.theta,
            &eta2,
            &shared.eta3,
            &self.data.x1_rows(i),
            t_len,
            &self.opts.compile,
        )
        .map_err(err_ctx)?;

        let compressed = match self.opts.strategy {
            FilterStrategy::Batch | FilterStrategy::Univariate => false,
            FilterStrategy::Compressed => compress_observations(&pm, &obs)?.is_some(),
            FilterStrategy::Auto => {
                pm.factor.as_ref().is_some_and(|f| pm.z.u > f.lambda0.cols())
                    && compress_observations(&pm, &obs)?.is_some()
            }
        };

        let mut carries: Vec<RunState<f64>> = Vec::with_capacity(n_seg);
        let mut loglik = lp_raw;
        if compressed {
            let problem = compress_observations(&pm, &obs)?.expect("checked above");
            let mut state = RunState { a: problem.init.a1.clone(), p: problem.init.p1.clone() };
            for j in 0..n_seg {
                carries.push(state.clone());
                let (t0, t1) = (j * seg, ((j + 1) * seg).min(t_len));
                loglik += compressed_segment(&problem, &mut state, t0, t1).map_err(err_ctx)?;
            }
        } else {
            let mut state = RunState::from_init(&pm.init);
            for j in 0..n_seg {
                carries.push(state.clone());
                let (t0, t1) = (j * seg, ((j + 1) * seg).min(t_len));
                loglik +=
                    univariate_segment(&pm, &obs, &mut state, t0, t1, None).map_err(err_ctx)?;
            }
        }
        if !loglik.is_finite() {
            return Err(Error::Numeric(format!(
                "participant {}: non-finite log-likelihood",
                i + 1
            )));
        }

        // Phase B: one tape, shared prefix, segments replayed in reverse.
        let tape = Tape::new();
        let relevant = self.relevant_coords(i);
        let mut leaves: Vec<Var> = x.iter().map(|&v| tape.constant(v)).collect();
        for &k in &relevant {
            leaves[k] = tape.leaf(x[k]);
        }
        let proto = tape.constant(0.0);
        let shared_t = shared_realization(self.spec, &self.packing, proto, &leaves, false)?;
        let packed_t = &leaves[self.packing.eta2_range(i)];
        let re_t = realize_between(bp, proto, &shared_t.theta);
        let (eta2_t, lp_raw_t) = expand_between(
            &re_t,
            proto,
            x2,
            packed_t,
            &self.packing.v2_free,
            self.packing.parameterization,
        )?;
        let y2_t = between_y_contribution_re(bp, &re_t, proto, &eta2_t, x2);
        let obs_t = adjusted_obs(self.data, i, proto, &y2_t, &shared_t.y3, 0, t_len)?;
        // Time-invariant models keep their single compiled step on the shared
        // prefix; time-varying models compile each segment's window inside
        // the loop so tape memory stays bounded by prefix + one segment.
        let invariant = self.spec.within.is_time_invariant();
        let x1_rows = self.data.x1_rows(i);
        let pm_t = if invariant {
            compile_participant(
                self.spec,
                proto,
                &shared_t.theta,
                &eta2_t,
                &shared_t.eta3,
                &x1_rows,
                t_len,
                &self.opts.compile,
            )
            .map_err(err_ctx)?
        } else {
            // Steps empty; records only the initial state.
            compile_participant_window(
                self.spec,
                proto,
                &shared_t.theta,
                &eta2_t,
                &shared_t.eta3,
                &x1_rows,
                t_len,
                0,
                0,
                &self.opts.compile,
                true,
            )
            .map_err(err_ctx)?
        };
        let problem_t = if compressed {
            Some(compress_observations_ungated(&pm_t, &obs_t)?.ok_or_else(|| {
                Error::Numeric("compression became unavailable during backward pass".into())
            })?)
        } else {
            None
        };
        let init_state_t: RunState<Var> = match &problem_t {
            Some(problem) => RunState { a: problem.init.a1.clone(), p: problem.init.p1.clone() },
            None => RunState::from_init(&pm_t.init),
        };
        let prefix_len = tape.len();

        let mut grad = vec![0.0f64; x.len()];
        let state_dim = carries[0].a.len();
        let mut a_bar = vec![0.0f64; state_dim];
        let mut p_bar = vec![0.0f64; state_dim * state_dim];

        for j in (0..n_seg).rev() {
            let (t0, t1) = (j * seg, ((j + 1) * seg).min(t_len));
            // Segment entry state: the shared-prefix initial state for the
            // first segment, fresh carry leaves otherwise.
            let (mut state, carry_leaves): (RunState<Var>, Option<(Vec<Var>, Vec<Var>)>) =
                if j == 0 {
                    (init_state_t.clone(), None)
                } else {
                    let carry = &carries[j];
                    let a_leaves: Vec<Var> = carry.a.iter().map(|&v| tape.leaf(v)).collect();
                    let p_leaves: Vec<Var> =
                        carry.p.data().iter().map(|&v| tape.leaf(v)).collect();
                    let pmat = Mat::from_rows(state_dim, state_dim, p_leaves.clone());
                    (RunState { a: a_leaves.clone(), p: pmat }, Some((a_leaves, p_leaves)))
                };

            let ll_seg = match &problem_t {
                Some(problem) => {
                    compressed_segment(problem, &mut state, t0, t1).map_err(err_ctx)?
                }
                None if invariant => {
                    univariate_segment(&pm_t, &obs_t, &mut state, t0, t1, None)
                        .map_err(err_ctx)?
                }
                None => {
                    let pm_seg = compile_participant_window(
                        self.spec,
                        proto,
                        &shared_t.theta,
                        &eta2_t,
                        &shared_t.eta3,
                        &x1_rows,
                        t_len,
                        t0,
                        t1,
                        &self.opts.compile,
                        false,
                    )
                    .map_err(err_ctx)?;
                    univariate_segment(&pm_seg, &obs_t, &mut state, t0, t1, None)
                        .map_err(err_ctx)?
                }
            };

            // Seeds: segment likelihood, the raw-latent prior once, and the
            // downstream adjoint of the carry-out state.
            let mut seeds = vec![ll_seg.seed(1.0)];
            if j == 0 {
                seeds.push(lp_raw_t.seed(1.0));
            }
            for (idx, av) in state.a.iter().enumerate() {
                if a_bar[idx] != 0.0 {
                    seeds.push(av.seed(a_bar[idx]));
                }
            }
            for (idx, pv) in state.p.data().iter().enumerate() {
                if p_bar[idx] != 0.0 {
                    seeds.push(pv.seed(p_bar[idx]));
                }
            }
            let adj = tape.gradient(&seeds);
            for &k in &relevant {
                grad[k] += adj.of(leaves[k]);
            }
            if let Some((a_leaves, p_leaves)) = carry_leaves {
                for (idx, leaf) in a_leaves.iter().enumerate() {
                    a_bar[idx] = adj.of(*leaf);
                }
                for (idx, leaf) in p_leaves.iter().enumerate() {
                    p_bar[idx] = adj.of(*leaf);
                }
            }
            tape.truncate(prefix_len);
        }
        Ok((loglik, grad))
    }
}

impl Target for MarginalTarget<'_> {
    fn dim(&self) -> usize {
        self.packing.dim()
    }

    fn names(&self) -> &[String] {
        self.packing.names()
    }

    fn logp(&self, x: &[f64]) -> f64 {
        match self.logp_checked(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.grad_checked(x, grad) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                f64::NEG_INFINITY
            }
        }
    }
}

/// The un-marginalized target: within-level latent states are sampled
/// explicitly (one `V1` block per participant per timepoint). Supports lag-1
/// models with complete data; used by the joint-sampling baseline.
pub struct JointTarget<'a> {
    pub marginal: MarginalTarget<'a>,
    names: Vec<String>,
}

impl<'a> JointTarget<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, opts: PosteriorOpts) -> Result<Self> {
        if spec.dims.lag != 1 {
            return Err(Error::Validation(
                "the joint-state target supports lag-1 models only".into(),
            ));
        }
        for i in 0..data.n {
            for t in 0..data.t_len {
                for r in 0..data.u {
                    if !data.observed(i, t, r) {
                        return Err(Error::Validation(
                            "the joint-state target requires complete data".into(),
                        ));
                    }
                }
            }
        }
        let marginal = MarginalTarget::new(spec, data, opts)?;
        let mut names = marginal.packing.names().to_vec();
        for i in 0..data.n {
            for t in 0..data.t_len {
                for k in 0..spec.dims.v1 {
                    names.push(format!("eta1.i{}.t{}.k{}", i + 1, t + 1, k + 1));
                }
            }
        }
        Ok(JointTarget { marginal, names })
    }

    pub fn base_dim(&self) -> usize {
        self.marginal.packing.dim()
    }

    fn eval_generic<S: Real>(&self, proto: S, x: &[S]) -> Result<S> {
        let spec = self.marginal.spec;
        let data = self.marginal.data;
        let packing = &self.marginal.packing;
        let v1 = spec.dims.v1;
        let u = spec.dims.u;
        let base = packing.dim();
        let shared = shared_realization(spec, packing, proto, x, true)?;
        let mut total = shared.prior;
        let bp = &spec.between_participant;

        for i in 0..data.n {
            let x2 = if bp.x_dim() == 0 { &[][..] } else { bp.covariate_row(i) };
            let packed = &x[packing.eta2_range(i)];
            let re = realize_between(bp, proto, &shared.theta);
            let (eta2, lp_raw) = expand_between(
                &re,
                proto,
                x2,
                packed,
                &packing.v2_free,
                packing.parameterization,
            )?;
            total = total + lp_raw;
            let y2 = between_y_contribution_re(bp, &re, proto, &eta2, x2);
            let obs = adjusted_obs(data, i, proto, &y2, &shared.y3, 0, data.t_len)?;
            let pm = compile_participant(
                spec,
                proto,
                &shared.theta,
                &eta2,
                &shared.eta3,
                &data.x1_rows(i),
                data.t_len,
                &self.marginal.opts.compile,
            )?;
            let state_at = |t: usize, xs: &[S]| -> Vec<S> {
                // Augmented lag-1 state: (eta_t, y_t).
                let mut s = Vec::with_capacity(v1 + u);
                let start = base + (i * data.t_len + t) * v1;
                s.extend_from_slice(&xs[start..start + v1]);
                for r in 0..u {
                    s.push(obs.value(t, r));
                }
                s
            };

            // t = 1: the initial-state prior evaluated at (eta_1, y_1).
            let s1 = state_at(0, x);
            total = total + mvn_logpdf_generic(&pm.init.a1, &pm.init.p1, &s1, proto)?;

            // t >= 2: transition density of the noisy blocks.
            for t in 1..data.t_len {
                let step = pm.steps.at(t - 1);
                let prev = state_at(t - 1, x);
                let mean_full = {
                    let mut mv = step.t.matvec(&prev);
                    for (m, c) in mv.iter_mut().zip(&step.c) {
                        *m = *m + *c;
                    }
                    mv
                };
                let cur = state_at(t, x);
                // Active rows are the contemporaneous eta and y blocks; for
                // lag-1 that is the whole state.
                let w = &step.w;
                total = total + mvn_logpdf_generic(&mean_full, w, &cur, proto)?;
            }
        }
        Ok(total)
    }
}

fn mvn_logpdf_generic<S: Real>(mean: &[S], cov: &Mat<S>, x: &[S], proto: S) -> Result<S> {
    let n = mean.len();
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("joint density covariance not positive definite".into()))?;
    let diff: Vec<S> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let sol = crate::linalg::chol_solve_vec(&l, &diff);
    let mut quad = proto.lit(0.0);
    for (d, s) in diff.iter().zip(&sol) {
        quad = quad + *d * *s;
    }
    Ok(-(proto.lit(n as f64 * LN_2PI) + crate::linalg::chol_logdet(&l) + quad) * proto.lit(0.5))
}

impl Target for JointTarget<'_> {
    fn dim(&self) -> usize {
        self.names.len()
    }

    fn names(&self) -> &[String] {
        &self.names
    }

    fn logp(&self, x: &[f64]) -> f64 {
        if x.len() != self.names.len() {
            return f64::NEG_INFINITY;
        }
        match self.eval_generic(1.0f64, x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        if x.len() != self.names.len() {
            return f64::NEG_INFINITY;
        }
        let tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let proto = tape.constant(0.0);
        match self.eval_generic(proto, &leaves) {
            Ok(v) if v.val().is_finite() => {
                let adj = tape.gradient(&[v.seed(1.0)]);
                for (g, leaf) in grad.iter_mut().zip(&leaves) {
                    *g = adj.of(*leaf);
                }
                if grad.iter().all(|g| g.is_finite()) {
                    v.val()
                } else {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    f64::NEG_INFINITY
                }
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Marginal log posterior at packed coordinates.
pub fn log_posterior(spec: &ModelSpec, data: &Dataset, x: &[f64]) -> Result<f64> {
    let target = MarginalTarget::new(spec, data, PosteriorOpts::default())?;
    target.logp_checked(x)
}

/// Marginal log posterior and its exact gradient.
pub fn grad_log_posterior(spec: &ModelSpec, data: &Dataset, x: &[f64]) -> Result<LogDensityResult> {
    let target = MarginalTarget::new(spec, data, PosteriorOpts::default())?;
    let mut grad = vec![0.0; x.len()];
    let logp = target.grad_checked(x, &mut grad)?;
    Ok(LogDensityResult { logp, grad })
}

/// Un-marginalized log density with explicit within-level states appended to
/// the packed vector.
pub fn joint_log_density(spec: &ModelSpec, data: &Dataset, x: &[f64]) -> Result<f64> {
    let target = JointTarget::new(spec, data, PosteriorOpts::default())?;
    if x.len() != target.dim() {
        return Err(Error::Validation(format!(
            "joint vector length {} != {}",
            x.len(),
            target.dim()
        )));
    }
    target.eval_generic(1.0f64, x)
}

/// Central finite-difference gradient; test and diagnostic oracle.
pub fn fd_gradient(target: &dyn Target, x: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-5 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let up = target.logp(&xp);
        xp[k] = x[k] - h;
        let dn = target.logp(&xp);
        xp[k] = x[k];
        grad[k] = (up - dn) / (2.0 * h);
    }
    grad
}
