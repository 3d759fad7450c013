//! Exact filtering for the compiled state space model.
//!
//! Three routes to the same marginal likelihood: a batch filter (reference
//! path), a sequential univariate filter that processes one indicator at a
//! time and avoids U x U factorizations, and an observation-compression path
//! for factor-structured measurements (see [`compress`]). Missing entries are
//! handled by row deletion; fully missing timepoints carry the predicted
//! moments forward unchanged.

pub mod compress;
pub mod smooth;

pub use compress::{compress_observations, compress_observations_ungated, compressed_segment, filter_compressed};
pub use smooth::{smooth, SmootherOutput};

use crate::compile::{InitialState, ParticipantModel, Steps};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_solve_vec, Mat};
use crate::math::LN_2PI;
use crate::tape::Real;

/// Observations for one participant: `t_len x u` row-major values plus an
/// observed mask. Masked values are never read.
#[derive(Debug, Clone)]
pub struct Obs<S> {
    pub t_len: usize,
    pub u: usize,
    values: Vec<S>,
    mask: Vec<bool>,
}

impl<S: Real> Obs<S> {
    pub fn new(t_len: usize, u: usize, values: Vec<S>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != t_len * u || mask.len() != t_len * u {
            return Err(Error::Validation("observation block has wrong shape".into()));
        }
        for (v, &m) in values.iter().zip(&mask) {
            if m && !v.val().is_finite() {
                return Err(Error::Numeric("non-finite observed value".into()));
            }
        }
        Ok(Obs { t_len, u, values, mask })
    }

    /// All-observed block from plain values.
    pub fn complete(t_len: usize, u: usize, values: Vec<S>) -> Result<Self> {
        let mask = vec![true; t_len * u];
        Obs::new(t_len, u, values, mask)
    }

    #[inline]
    pub fn value(&self, t: usize, r: usize) -> S {
        self.values[t * self.u + r]
    }

    #[inline]
    pub fn observed(&self, t: usize, r: usize) -> bool {
        self.mask[t * self.u + r]
    }

    pub fn observed_rows(&self, t: usize) -> Vec<usize> {
        (0..self.u).filter(|&r| self.observed(t, r)).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-timepoint filter quantities retained when storage is requested.
#[derive(Debug, Clone)]
pub struct FilterTrace<S> {
    /// Predicted mean `a_{t|t-1}`.
    pub pred_mean: Vec<Vec<S>>,
    /// Predicted covariance `P_{t|t-1}`.
    pub pred_cov: Vec<Mat<S>>,
    /// Filtered mean `a_{t|t}`.
    pub filt_mean: Vec<Vec<S>>,
    /// Filtered covariance `P_{t|t}`.
    pub filt_cov: Vec<Mat<S>>,
    /// Innovations over observed rows (empty when the timepoint is missing).
    pub innovations: Vec<Vec<S>>,
    /// Innovation covariances over observed rows.
    pub innovation_cov: Vec<Mat<S>>,
}

/// Filter result: the exact marginal log-likelihood plus optional per-step
/// moments for smoothing and inspection.
#[derive(Debug, Clone)]
pub struct FilterOutput<S> {
    pub loglik: S,
    /// Total count of observed scalar indicators.
    pub observed_count: usize,
    pub trace: Option<FilterTrace<S>>,
}

/// Jitter escalation for an innovation factorization: relative steps
/// 1e-10, 1e-9, ..., 1e-6 of the mean absolute innovation-variance scale.
const JITTER_STEPS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

fn chol_with_jitter<S: Real>(f: &Mat<S>, t: usize) -> Result<Mat<S>> {
    let n = f.rows();
    let mut scale = 0.0;
    for i in 0..n {
        scale += f[(i, i)].val().abs();
    }
    scale = (scale / n as f64).max(1e-300);
    for &step in &JITTER_STEPS {
        let jitter = step * scale;
        let attempt = if jitter == 0.0 {
            f.cholesky()
        } else {
            let mut fj = f.clone();
            for i in 0..n {
                fj[(i, i)] = fj[(i, i)] + fj[(i, i)].lit(jitter);
            }
            fj.cholesky()
        };
        if let Some(l) = attempt {
            return Ok(l);
        }
    }
    Err(Error::Numeric(format!(
        "innovation covariance not positive definite at timepoint {} after jitter escalation",
        t + 1
    )))
}

pub(crate) fn scalar_jitter(f: f64, t: usize) -> Result<f64> {
    let scale = f.abs().max(1e-300);
    for &step in &JITTER_STEPS {
        let fj = f + step * scale;
        if fj > 0.0 && fj.is_finite() {
            return Ok(step * scale);
        }
    }
    Err(Error::Numeric(format!(
        "scalar innovation variance not positive at timepoint {} after jitter escalation",
        t + 1
    )))
}

pub struct TraceBuilder<S> {
    inner: Option<FilterTrace<S>>,
}

impl<S: Real> TraceBuilder<S> {
    fn new(store: bool, t_len: usize) -> Self {
        if store {
            TraceBuilder {
                inner: Some(FilterTrace {
                    pred_mean: Vec::with_capacity(t_len),
                    pred_cov: Vec::with_capacity(t_len),
                    filt_mean: Vec::with_capacity(t_len),
                    filt_cov: Vec::with_capacity(t_len),
                    innovations: Vec::with_capacity(t_len),
                    innovation_cov: Vec::with_capacity(t_len),
                }),
            }
        } else {
            TraceBuilder { inner: None }
        }
    }

    fn push_pred(&mut self, a: &[S], p: &Mat<S>) {
        if let Some(tr) = &mut self.inner {
            tr.pred_mean.push(a.to_vec());
            tr.pred_cov.push(p.clone());
        }
    }

    fn push_filt(&mut self, a: &[S], p: &Mat<S>, v: Vec<S>, f: Mat<S>) {
        if let Some(tr) = &mut self.inner {
            tr.filt_mean.push(a.to_vec());
            tr.filt_cov.push(p.clone());
            tr.innovations.push(v);
            tr.innovation_cov.push(f);
        }
    }
}

/// Batch Kalman filter over the augmented model. At `t = 1` the prior
/// initialization is used and only the measurement update runs; missing rows
/// are deleted; fully missing timepoints carry the prediction forward.
pub fn filter_batch<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
    store: bool,
) -> Result<FilterOutput<S>> {
    let m = model.state_dim();
    let u = model.z.u;
    if obs.u != u {
        return Err(Error::Validation("observation width != model indicators".into()));
    }
    let offset = model.z.offset;
    let proto = model.init.a1[0];
    let mut a = model.init.a1.clone();
    let mut p = model.init.p1.clone();
    let mut loglik = proto.lit(0.0);
    let mut observed = 0usize;
    let mut trace = TraceBuilder::new(store, obs.t_len);

    for t in 0..obs.t_len {
        trace.push_pred(&a, &p);
        let rows = obs.observed_rows(t);
        if rows.is_empty() {
            // Carried forward: a_{t|t} = a_{t|t-1}, P_{t|t} = P_{t|t-1}.
            trace.push_filt(&a, &p, Vec::new(), Mat::zeros(proto, 0, 0));
        } else {
            let k = rows.len();
            observed += k;
            let v: Vec<S> = rows.iter().map(|&r| obs.value(t, r) - a[offset + r]).collect();
            let f = Mat::from_fn(k, k, |i, j| p[(offset + rows[i], offset + rows[j])]);
            let l = chol_with_jitter(&f, t)?;
            let fi_v = chol_solve_vec(&l, &v);
            let mut quad = proto.lit(0.0);
            for i in 0..k {
                quad = quad + v[i] * fi_v[i];
            }
            loglik = loglik
                - (proto.lit(k as f64 * LN_2PI) + chol_logdet(&l) + quad) * proto.lit(0.5);

            // Gain through the selection structure: P Z^T has columns
            // P[:, offset + r].
            let pzt = Mat::from_fn(m, k, |i, j| p[(i, offset + rows[j])]);
            for i in 0..m {
                let mut acc = proto.lit(0.0);
                for j in 0..k {
                    acc = acc + pzt[(i, j)] * fi_v[j];
                }
                a[i] = a[i] + acc;
            }
            // P <- P - (P Z^T) F^{-1} (P Z^T)^T via the Cholesky solve.
            let mut fi_pzt = Mat::zeros(proto, k, m);
            for col in 0..m {
                let rhs: Vec<S> = (0..k).map(|j| pzt[(col, j)]).collect();
                let x = chol_solve_vec(&l, &rhs);
                for j in 0..k {
                    fi_pzt[(j, col)] = x[j];
                }
            }
            let mut pnew = p.clone();
            for i in 0..m {
                for j in 0..m {
                    let mut acc = proto.lit(0.0);
                    for r in 0..k {
                        acc = acc + pzt[(i, r)] * fi_pzt[(r, j)];
                    }
                    pnew[(i, j)] = pnew[(i, j)] - acc;
                }
            }
            pnew.symmetrize();
            p = pnew;
            trace.push_filt(&a, &p, v, f);
        }
        if t + 1 < obs.t_len {
            let step = model.steps.at(t);
            let ta = step.t.matvec(&a);
            a = ta.iter().zip(&step.c).map(|(&x, &c)| x + c).collect();
            p = step.t.sandwich(&p).add(&step.w);
            p.symmetrize();
        }
    }
    if !loglik.val().is_finite() {
        return Err(Error::Numeric("non-finite log-likelihood".into()));
    }
    Ok(FilterOutput { loglik, observed_count: observed, trace: trace.inner })
}

/// Running filter state: predicted moments entering the next timepoint.
#[derive(Debug, Clone)]
pub struct RunState<S> {
    pub a: Vec<S>,
    pub p: Mat<S>,
}

impl<S: Real> RunState<S> {
    pub fn from_init(init: &InitialState<S>) -> Self {
        RunState { a: init.a1.clone(), p: init.p1.clone() }
    }
}

/// Univariate measurement updates and predictions over timepoints
/// `t0..t1`, mutating `state` (entering as `a_{t0|t0-1}`, leaving as
/// `a_{t1|t1-1}`; the final prediction is skipped at the series end).
/// Returns the likelihood contribution of the range.
pub fn univariate_segment<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
    state: &mut RunState<S>,
    t0: usize,
    t1: usize,
    mut trace: Option<&mut TraceBuilder<S>>,
) -> Result<S> {
    let offset = model.z.offset;
    let proto = model.init.a1[0];
    let m = model.state_dim();
    let mut loglik = proto.lit(0.0);
    // Scratch buffers reused across steps.
    let zero = proto.lit(0.0);
    let mut gain = vec![zero; m];
    let mut anew = vec![zero; m];
    let mut tp = Mat::zeros(proto, m, m);
    let mut pnew = Mat::zeros(proto, m, m);
    for t in t0..t1 {
        if let Some(tr) = trace.as_deref_mut() {
            tr.push_pred(&state.a, &state.p);
        }
        let mut innov: Vec<S> = Vec::new();
        for r in 0..obs.u {
            if !obs.observed(t, r) {
                continue;
            }
            let col = offset + r;
            let f = state.p[(col, col)];
            let jitter = scalar_jitter(f.val(), t)?;
            let f = if jitter > 0.0 { f + f.lit(jitter) } else { f };
            let v = obs.value(t, r) - state.a[col];
            loglik = loglik - (proto.lit(LN_2PI) + f.ln() + v * v / f) * proto.lit(0.5);
            if trace.is_some() {
                innov.push(v);
            }
            let vf = v / f;
            for i in 0..m {
                gain[i] = state.p[(i, col)];
            }
            for i in 0..m {
                state.a[i] = state.a[i] + gain[i] * vf;
            }
            for i in 0..m {
                let gi_f = gain[i] / f;
                for j in 0..m {
                    state.p[(i, j)] = state.p[(i, j)] - gi_f * gain[j];
                }
            }
        }
        state.p.symmetrize();
        if let Some(tr) = trace.as_deref_mut() {
            let rows = obs.observed_rows(t);
            let f_diag = Mat::from_fn(rows.len(), rows.len(), |i, j| {
                if i == j {
                    state.p[(offset + rows[i], offset + rows[i])]
                } else {
                    proto.lit(0.0)
                }
            });
            tr.push_filt(&state.a, &state.p, innov, f_diag);
        }
        if t + 1 < obs.t_len {
            let step = model.steps.at(t);
            // a <- T a + c, P <- T P T' + W, via scratch.
            for i in 0..m {
                let mut acc = step.c[i];
                for k in 0..m {
                    acc = acc + step.t[(i, k)] * state.a[k];
                }
                anew[i] = acc;
            }
            std::mem::swap(&mut state.a, &mut anew);
            for i in 0..m {
                for k in 0..m {
                    let mut acc = zero;
                    for j in 0..m {
                        acc = acc + step.t[(i, j)] * state.p[(j, k)];
                    }
                    tp[(i, k)] = acc;
                }
            }
            for i in 0..m {
                for j in 0..m {
                    let mut acc = step.w[(i, j)];
                    for k in 0..m {
                        acc = acc + tp[(i, k)] * step.t[(j, k)];
                    }
                    pnew[(i, j)] = acc;
                }
            }
            std::mem::swap(&mut state.p, &mut pnew);
            state.p.symmetrize();
        }
    }
    Ok(loglik)
}

/// Sequential univariate filter: identical moments and likelihood to
/// [`filter_batch`], processing one indicator at a time (valid here because
/// the compiled measurement is noiseless, so effective measurement noise is
/// diagonal).
pub fn filter_univariate<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
    store: bool,
) -> Result<FilterOutput<S>> {
    if obs.u != model.z.u {
        return Err(Error::Validation("observation width != model indicators".into()));
    }
    let mut state = RunState::from_init(&model.init);
    let mut trace = TraceBuilder::new(store, obs.t_len);
    let loglik = if store {
        univariate_segment(model, obs, &mut state, 0, obs.t_len, Some(&mut trace))?
    } else {
        univariate_segment(model, obs, &mut state, 0, obs.t_len, None)?
    };
    if !loglik.val().is_finite() {
        return Err(Error::Numeric("non-finite log-likelihood".into()));
    }
    Ok(FilterOutput { loglik, observed_count: obs.observed_count(), trace: trace.inner })
}

/// Filtering strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterStrategy {
    /// Compression when the compiled model supports it, otherwise the
    /// univariate sequential filter.
    #[default]
    Auto,
    Batch,
    Univariate,
    /// Force compression; falls back to univariate when unsupported.
    Compressed,
}

/// Run the filter with the given strategy. Compression is likelihood-only;
/// when per-step moments are requested it falls back to the univariate path.
pub fn filter<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
    strategy: FilterStrategy,
    store: bool,
) -> Result<FilterOutput<S>> {
    match strategy {
        FilterStrategy::Batch => filter_batch(model, obs, store),
        FilterStrategy::Univariate => filter_univariate(model, obs, store),
        FilterStrategy::Compressed => {
            if !store {
                if let Some(out) = filter_compressed(model, obs)? {
                    return Ok(out);
                }
            }
            filter_univariate(model, obs, store)
        }
        FilterStrategy::Auto => {
            let shrinks = model
                .factor
                .as_ref()
                .is_some_and(|f| model.z.u > f.lambda0.cols());
            if shrinks && !store {
                if let Some(out) = filter_compressed(model, obs)? {
                    return Ok(out);
                }
            }
            filter_univariate(model, obs, store)
        }
    }
}

/// Assemble a participant model from raw pieces (tests, oracles, debug).
pub fn problem_from_parts<S: Real>(
    init: InitialState<S>,
    steps: Steps<S>,
    z: crate::compile::MeasurementMap,
) -> ParticipantModel<S> {
    ParticipantModel { z, init, steps, factor: None }
}
