//! Observation compression for factor-structured measurements.
//!
//! When the measurement is `y_t = d + Lambda eta_t + eps`, `eps ~ N(0, Sigma)`
//! with diagonal `Sigma` and at least as many indicators as latent components,
//! the indicators can be projected onto the latent dimension before filtering:
//! with `C = Lambda' Sigma^{-1} Lambda` and `A = C^{-1} Lambda' Sigma^{-1}`,
//! the series `y*_t = A (y_t - d)` is filtered against the latent block only,
//! and the discarded residual contributes a closed-form additive correction
//! `-0.5 [(U_t - V1) log 2pi + log|Sigma_t| + e' Sigma^{-1} e]` per timepoint,
//! `e = (y - d) - Lambda y*`.
//!
//! The projected series is whitened through the Cholesky factor of `C`, so the
//! inner filter processes one scalar at a time with unit noise (the whitening
//! log-Jacobian cancels against the collapsed noise determinant). Partially
//! missing timepoints get a pattern-specific projector when enough rows remain
//! and fall back to direct row updates otherwise.

use super::{scalar_jitter, FilterOutput, Obs};
use crate::compile::{CompiledStep, InitMode, InitialState, ParticipantModel, Steps};
use crate::error::{Error, Result};
use crate::linalg::{chol_solve_vec, Mat};
use crate::math::LN_2PI;
use crate::tape::Real;

/// One prepared timepoint of the compressed problem.
pub enum CompressedTimepoint<S> {
    Missing,
    /// Whitened projected observation (length V1) under the full-pattern map.
    Collapsed { y: Vec<S> },
    /// Whitened projected observation under a pattern-specific map.
    CollapsedPattern { y: Vec<S>, zt: Mat<S> },
    /// Too few (or rank-deficient) observed rows to project: filter the raw
    /// rows directly against the loading matrix.
    Direct { rows: Vec<usize>, y: Vec<S> },
}

/// Compressed filtering problem: reduced latent-block dynamics, projected
/// observations, and the total likelihood correction.
pub struct CompressedProblem<S> {
    pub init: InitialState<S>,
    pub steps: Steps<S>,
    /// Reduced state dimension `L * V1`.
    pub eta_dim: usize,
    pub v1: usize,
    /// Whitened measurement map `L'` for full-pattern timepoints
    /// (`C = L L'`), applied to the contemporaneous latent block.
    pub zt: Mat<S>,
    pub lambda: Mat<S>,
    pub sigma_var: Vec<S>,
    pub timepoints: Vec<CompressedTimepoint<S>>,
    /// Additive log-likelihood correction per timepoint (zero unless the
    /// timepoint was collapsed).
    pub corrections: Vec<S>,
    pub observed_count: usize,
}

/// Build the compressed problem, or `None` when the model does not support
/// compression (no factor structure, time-varying steps, non-stationary
/// initialization, or rank-deficient loadings; callers fall back to the full
/// filter).
pub fn compress_observations<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
) -> Result<Option<CompressedProblem<S>>> {
    if model.init.mode != InitMode::Stationary {
        return Ok(None);
    }
    compress_observations_ungated(model, obs)
}

/// As [`compress_observations`] but without the stationary-initialization
/// gate; used by segmented gradient passes whose entry state is injected, so
/// the placeholder initial state of a window compile is never consulted.
pub fn compress_observations_ungated<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
) -> Result<Option<CompressedProblem<S>>> {
    let factor = match &model.factor {
        Some(f) => f,
        None => return Ok(None),
    };
    let step = match &model.steps {
        Steps::Invariant(s) => s,
        Steps::Varying(_) | Steps::Window { .. } => return Ok(None),
    };
    let u = model.z.u;
    let v1 = factor.lambda0.cols();
    let eta_dim = model.z.offset; // L * V1
    let proto = model.init.a1[0];
    let lambda = &factor.lambda0;
    let sigma = &factor.sigma_var;

    let l_full = match pattern_chol(proto, lambda, sigma, &(0..u).collect::<Vec<_>>()) {
        Some(l) => l,
        None => return Ok(None), // rank-deficient loading block
    };
    let mut log_sigma_full = proto.lit(0.0);
    for r in 0..u {
        log_sigma_full = log_sigma_full + sigma[r].ln();
    }

    let mut corrections = Vec::with_capacity(obs.t_len);
    let mut timepoints = Vec::with_capacity(obs.t_len);
    for t in 0..obs.t_len {
        let rows = obs.observed_rows(t);
        let mut corr_t = proto.lit(0.0);
        if rows.is_empty() {
            timepoints.push(CompressedTimepoint::Missing);
        } else if rows.len() == u {
            let (y, corr) = project(proto, lambda, sigma, &factor.d, &l_full, &rows, obs, t, log_sigma_full);
            corr_t = corr;
            timepoints.push(CompressedTimepoint::Collapsed { y });
        } else if rows.len() > v1 {
            match pattern_chol(proto, lambda, sigma, &rows) {
                Some(l_o) => {
                    let mut log_sigma_o = proto.lit(0.0);
                    for &r in &rows {
                        log_sigma_o = log_sigma_o + sigma[r].ln();
                    }
                    let (y, corr) =
                        project(proto, lambda, sigma, &factor.d, &l_o, &rows, obs, t, log_sigma_o);
                    corr_t = corr;
                    timepoints.push(CompressedTimepoint::CollapsedPattern { y, zt: l_o.transpose() });
                }
                None => timepoints.push(direct(proto, factor, &rows, obs, t)),
            }
        } else {
            timepoints.push(direct(proto, factor, &rows, obs, t));
        }
        corrections.push(corr_t);
    }

    // Reduced dynamics: the latent block is closed under the transition for
    // factor-structured models (no observation feedback).
    let t_red = step.t.block(0, 0, eta_dim, eta_dim);
    debug_assert!(
        step.t.block(0, eta_dim, eta_dim, step.t.cols() - eta_dim).max_abs_val() < 1e-12,
        "latent block must not depend on lagged observations under factor structure"
    );
    let c_red = step.c[..eta_dim].to_vec();
    let w_red = step.w.block(0, 0, eta_dim, eta_dim);
    let init = InitialState {
        a1: model.init.a1[..eta_dim].to_vec(),
        p1: model.init.p1.block(0, 0, eta_dim, eta_dim),
        mode: model.init.mode,
    };
    Ok(Some(CompressedProblem {
        init,
        steps: Steps::Invariant(CompiledStep { t: t_red, c: c_red, w: w_red }),
        eta_dim,
        v1,
        zt: l_full.transpose(),
        lambda: lambda.clone(),
        sigma_var: sigma.clone(),
        timepoints,
        corrections,
        observed_count: obs.observed_count(),
    }))
}

fn direct<S: Real>(
    proto: S,
    factor: &crate::compile::FactorStructure<S>,
    rows: &[usize],
    obs: &Obs<S>,
    t: usize,
) -> CompressedTimepoint<S> {
    let _ = proto;
    let y: Vec<S> = rows.iter().map(|&r| obs.value(t, r) - factor.d[r]).collect();
    CompressedTimepoint::Direct { rows: rows.to_vec(), y }
}

/// Cholesky factor of `C_o = Lambda_o' Sigma_o^{-1} Lambda_o`.
fn pattern_chol<S: Real>(proto: S, lambda: &Mat<S>, sigma: &[S], rows: &[usize]) -> Option<Mat<S>> {
    let v1 = lambda.cols();
    let c = Mat::from_fn(v1, v1, |i, j| {
        let mut acc = proto.lit(0.0);
        for &r in rows {
            acc = acc + lambda[(r, i)] * lambda[(r, j)] / sigma[r];
        }
        acc
    });
    c.cholesky()
}

/// Project observed rows at one timepoint: returns the whitened collapsed
/// observation `L' y*` and the residual likelihood correction.
#[allow(clippy::too_many_arguments)]
fn project<S: Real>(
    proto: S,
    lambda: &Mat<S>,
    sigma: &[S],
    d: &[S],
    l: &Mat<S>,
    rows: &[usize],
    obs: &Obs<S>,
    t: usize,
    log_sigma: S,
) -> (Vec<S>, S) {
    let v1 = lambda.cols();
    // C ystar = Lambda_o' Sigma_o^{-1} (y - d).
    let mut rhs = vec![proto.lit(0.0); v1];
    for &r in rows {
        let w = (obs.value(t, r) - d[r]) / sigma[r];
        for j in 0..v1 {
            rhs[j] = rhs[j] + lambda[(r, j)] * w;
        }
    }
    let ystar = chol_solve_vec(l, &rhs);
    // Residual e = (y - d) - Lambda ystar over observed rows.
    let mut quad = proto.lit(0.0);
    for &r in rows {
        let mut fit = proto.lit(0.0);
        for j in 0..v1 {
            fit = fit + lambda[(r, j)] * ystar[j];
        }
        let e = obs.value(t, r) - d[r] - fit;
        quad = quad + e * e / sigma[r];
    }
    let extra = rows.len() - v1;
    let corr = -(proto.lit(extra as f64 * LN_2PI) + log_sigma + quad) * proto.lit(0.5);
    // Whiten: y** = L' ystar; (L')[i, j] = L[j, i] is nonzero for j >= i.
    let y_white: Vec<S> = (0..v1)
        .map(|i| {
            let mut acc = proto.lit(0.0);
            for j in i..v1 {
                acc = acc + l[(j, i)] * ystar[j];
            }
            acc
        })
        .collect();
    (y_white, corr)
}

/// Measurement updates and predictions of the compressed problem over
/// timepoints `t0..t1` (same boundary semantics as the univariate segment
/// runner; state holds the reduced latent block). Includes the per-timepoint
/// corrections of the range.
pub fn compressed_segment<S: Real>(
    problem: &CompressedProblem<S>,
    state: &mut crate::kalman::RunState<S>,
    t0: usize,
    t1: usize,
) -> Result<S> {
    let proto = problem.init.a1[0];
    let m = problem.eta_dim;
    let v1 = problem.v1;
    let mut loglik = proto.lit(0.0);
    for t in t0..t1 {
        loglik = loglik + problem.corrections[t];
        match &problem.timepoints[t] {
            CompressedTimepoint::Missing => {}
            CompressedTimepoint::Collapsed { y } => {
                loglik = loglik
                    + scalar_updates(&mut state.a, &mut state.p, &problem.zt, y, None, proto, t, m, v1)?;
            }
            CompressedTimepoint::CollapsedPattern { y, zt } => {
                loglik = loglik
                    + scalar_updates(&mut state.a, &mut state.p, zt, y, None, proto, t, m, v1)?;
            }
            CompressedTimepoint::Direct { rows, y } => {
                let zrows = Mat::from_fn(rows.len(), v1, |i, j| problem.lambda[(rows[i], j)]);
                let h: Vec<S> = rows.iter().map(|&r| problem.sigma_var[r]).collect();
                loglik = loglik
                    + scalar_updates(&mut state.a, &mut state.p, &zrows, y, Some(&h), proto, t, m, v1)?;
            }
        }
        if t + 1 < problem.timepoints.len() {
            let step = problem.steps.at(t);
            let ta = step.t.matvec(&state.a);
            state.a = ta.iter().zip(&step.c).map(|(&x, &c)| x + c).collect();
            state.p = step.t.sandwich(&state.p).add(&step.w);
            state.p.symmetrize();
        }
    }
    Ok(loglik)
}

/// Filter via compression, or `None` when the model does not support it.
/// Likelihood-only: no per-step trace is produced.
pub fn filter_compressed<S: Real>(
    model: &ParticipantModel<S>,
    obs: &Obs<S>,
) -> Result<Option<FilterOutput<S>>> {
    let problem = match compress_observations(model, obs)? {
        Some(p) => p,
        None => return Ok(None),
    };
    let mut state = crate::kalman::RunState {
        a: problem.init.a1.clone(),
        p: problem.init.p1.clone(),
    };
    let loglik = compressed_segment(&problem, &mut state, 0, problem.timepoints.len())?;
    if !loglik.val().is_finite() {
        return Err(Error::Numeric("non-finite log-likelihood (compressed)".into()));
    }
    Ok(Some(FilterOutput { loglik, observed_count: problem.observed_count, trace: None }))
}

/// Sequential scalar updates with dense measurement rows over the
/// contemporaneous latent block (`h` = per-row noise variance, unit when
/// absent). Returns the likelihood contribution of this timepoint.
#[allow(clippy::too_many_arguments)]
fn scalar_updates<S: Real>(
    a: &mut Vec<S>,
    p: &mut Mat<S>,
    zrows: &Mat<S>,
    y: &[S],
    h: Option<&[S]>,
    proto: S,
    t: usize,
    m: usize,
    v1: usize,
) -> Result<S> {
    let mut loglik = proto.lit(0.0);
    for i in 0..zrows.rows() {
        let mut pz = vec![proto.lit(0.0); m];
        for r in 0..m {
            let mut acc = proto.lit(0.0);
            for j in 0..v1 {
                acc = acc + p[(r, j)] * zrows[(i, j)];
            }
            pz[r] = acc;
        }
        let mut f = match h {
            Some(h) => h[i],
            None => proto.lit(1.0),
        };
        for j in 0..v1 {
            f = f + zrows[(i, j)] * pz[j];
        }
        let jitter = scalar_jitter(f.val(), t)?;
        let f = if jitter > 0.0 { f + f.lit(jitter) } else { f };
        let mut zha = proto.lit(0.0);
        for j in 0..v1 {
            zha = zha + zrows[(i, j)] * a[j];
        }
        let v = y[i] - zha;
        loglik = loglik - (proto.lit(LN_2PI) + f.ln() + v * v / f) * proto.lit(0.5);
        let vf = v / f;
        for r in 0..m {
            a[r] = a[r] + pz[r] * vf;
        }
        for r in 0..m {
            let prf = pz[r] / f;
            for s in 0..m {
                p[(r, s)] = p[(r, s)] - prf * pz[s];
            }
        }
    }
    p.symmetrize();
    Ok(loglik)
}
