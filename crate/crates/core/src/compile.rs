//! Compilation of the within-level model into an augmented linear Gaussian
//! state space model.
//!
//! The lag-L coupled measurement/structural system is rewritten over the
//! augmented state `[eta_t, ..., eta_{t-L+1}, y_t, ..., y_{t-L+1}]` with a
//! noiseless selection measurement. Contemporaneous couplings are resolved
//! through the block inverses `M1`, `N1` of the joint lag-0 system (Schur
//! complement form), lagged couplings through composite polynomial
//! coefficients, and the process noise through an exact covariance mapping of
//! the measurement and structural disturbances.

use crate::error::{Error, Result};
use crate::linalg::{lu_factor, lyapunov, spectral_radius, unit_lower_inverse, Mat};
use crate::model::{ModelSpec, RealizedWithin};
use crate::tape::Real;

/// Relative singularity tolerance for the lag-0 Schur factors.
const SCHUR_TOL: f64 = 1e-10;

/// Compile-time policy knobs.
#[derive(Debug, Clone, Copy)]
pub struct CompileOptions {
    /// Spectral radius slack below one for stationary initialization.
    pub stationary_tol: f64,
    /// Diffuse prior scale used when the dynamics are not stable.
    pub diffuse_kappa: f64,
    /// Convergence threshold for the Lyapunov doubling iteration.
    pub lyapunov_tol: f64,
    pub lyapunov_max_iter: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            stationary_tol: 1e-6,
            diffuse_kappa: 1e3,
            lyapunov_tol: 1e-12,
            lyapunov_max_iter: 100,
        }
    }
}

/// Noiseless selection measurement `Z = [0_{U x LV1}  I_U  0_{U x (L-1)U}]`
/// with `d = 0`, `H = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementMap {
    /// Column offset of the identity block (`L * V1`).
    pub offset: usize,
    /// Number of observed indicators.
    pub u: usize,
    /// Augmented state dimension.
    pub state_dim: usize,
}

impl MeasurementMap {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        MeasurementMap {
            offset: spec.dims.lag * spec.dims.v1,
            u: spec.dims.u,
            state_dim: spec.dims.state_dim(),
        }
    }

    /// Dense Z matrix (mostly for oracles and debug output).
    pub fn dense(&self) -> Mat<f64> {
        Mat::from_fn(self.u, self.state_dim, |i, j| if j == self.offset + i { 1.0 } else { 0.0 })
    }
}

/// One compiled transition: `state_{t+1} = T state_t + c + w`, `w ~ N(0, W)`.
#[derive(Debug, Clone)]
pub struct CompiledStep<S> {
    pub t: Mat<S>,
    pub c: Vec<S>,
    pub w: Mat<S>,
}

/// Lag-0 block inverses (Schur complement form):
/// `A0 = (I - R0)^{-1}`, `Xi0 = (I - B0)^{-1}`,
/// `M1 = {I - Xi0 Q0 A0 Lambda0}^{-1} Xi0`, `N1 = {I - A0 Lambda0 Xi0 Q0}^{-1} A0`.
pub struct BlockInverses<S> {
    pub a0: Mat<S>,
    pub xi0: Mat<S>,
    pub m1: Mat<S>,
    pub n1: Mat<S>,
}

pub fn block_inverses<S: Real>(rw: &RealizedWithin<S>) -> Result<BlockInverses<S>> {
    let proto = rw.sigma_var[0];
    let a0 = unit_lower_inverse(&rw.r[0]);
    let xi0 = unit_lower_inverse(&rw.b1[0]);
    let v1 = rw.b1[0].rows();
    let u = rw.r[0].rows();
    let lambda0 = &rw.lambda1[0];
    let q0 = &rw.q[0];

    // M1 = {I - Xi0 Q0 A0 Lambda0}^{-1} Xi0
    let q0a0 = q0.matmul(&a0);
    let xq = xi0.matmul(&q0a0);
    let schur_m = Mat::identity(proto, v1).sub(&xq.matmul(lambda0));
    let m1 = invert_schur(&schur_m, "M1")?.matmul(&xi0);

    // N1 = {I - A0 Lambda0 Xi0 Q0}^{-1} A0
    let l0x = lambda0.matmul(&xi0);
    let al = a0.matmul(&l0x);
    let schur_n = Mat::identity(proto, u).sub(&al.matmul(q0));
    let n1 = invert_schur(&schur_n, "N1")?.matmul(&a0);

    Ok(BlockInverses { a0, xi0, m1, n1 })
}

fn invert_schur<S: Real>(m: &Mat<S>, which: &str) -> Result<Mat<S>> {
    let scale = m.max_abs_val().max(1.0);
    let lu = lu_factor(m)
        .ok_or_else(|| Error::Numeric(format!("singular Schur factor {which}")))?;
    let inv = lu.inverse();
    // Residual check: || M M^{-1} - I ||_inf against the tolerance.
    let res = m.matmul(&inv);
    let n = m.rows();
    let mut err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            err = err.max((res[(i, j)].val() - want).abs());
        }
    }
    if err > 1e-6 * scale.max(1.0) || !err.is_finite() {
        return Err(Error::Numeric(format!(
            "Schur factor {which} numerically singular (residual {err:.3e})"
        )));
    }
    let _ = SCHUR_TOL;
    Ok(inv)
}

/// Composite polynomial coefficients for lags `k = 1..=L` (index `k-1`):
/// the lagged-state coefficients of the decoupled update equations.
pub struct Composites<S> {
    /// `[B1 + Q0 A0 Lambda1]_k`, V1 x V1.
    pub p_eta: Vec<Mat<S>>,
    /// `[Q + Q0 A0 R]_k`, V1 x U.
    pub p_y: Vec<Mat<S>>,
    /// `[Lambda1 + Lambda0 Xi0 B1]_k`, U x V1.
    pub q_eta: Vec<Mat<S>>,
    /// `[R + Lambda0 Xi0 Q]_k`, U x U.
    pub q_y: Vec<Mat<S>>,
}

pub fn composite_polynomials<S: Real>(
    rw: &RealizedWithin<S>,
    binv: &BlockInverses<S>,
) -> Composites<S> {
    let lag = rw.b1.len() - 1;
    let q0a0 = rw.q[0].matmul(&binv.a0);
    let l0x0 = rw.lambda1[0].matmul(&binv.xi0);
    let mut p_eta = Vec::with_capacity(lag);
    let mut p_y = Vec::with_capacity(lag);
    let mut q_eta = Vec::with_capacity(lag);
    let mut q_y = Vec::with_capacity(lag);
    for k in 1..=lag {
        p_eta.push(rw.b1[k].add(&q0a0.matmul(&rw.lambda1[k])));
        p_y.push(rw.q[k].add(&q0a0.matmul(&rw.r[k])));
        q_eta.push(rw.lambda1[k].add(&l0x0.matmul(&rw.b1[k])));
        q_y.push(rw.r[k].add(&l0x0.matmul(&rw.q[k])));
    }
    Composites { p_eta, p_y, q_eta, q_y }
}

/// Byproducts of [`build_step`] needed to map structural/measurement
/// disturbances `(xi, eps)` into augmented process noise.
pub struct StepAux<S> {
    pub m1: Mat<S>,
    pub n1: Mat<S>,
    /// `Q0 A0` (V1 x U).
    pub qa: Mat<S>,
    /// `Lambda0 Xi0` (U x V1).
    pub lx: Mat<S>,
    /// Realized structural disturbance standard deviations (V1).
    pub psi_sd: Vec<S>,
    /// Realized measurement disturbance standard deviations (U).
    pub sigma_sd: Vec<S>,
}

impl<S: Real> StepAux<S> {
    /// Exact noise mapping: `w1 = M1 (xi + Q0 A0 eps)`, `w3 = N1 (eps + Lambda0 Xi0 xi)`.
    pub fn map_noise(&self, xi: &[S], eps: &[S]) -> (Vec<S>, Vec<S>) {
        let qa_eps = self.qa.matvec(eps);
        let w1_in: Vec<S> = xi.iter().zip(&qa_eps).map(|(&a, &b)| a + b).collect();
        let lx_xi = self.lx.matvec(xi);
        let w3_in: Vec<S> = eps.iter().zip(&lx_xi).map(|(&a, &b)| a + b).collect();
        (self.m1.matvec(&w1_in), self.n1.matvec(&w3_in))
    }
}

/// Assemble the transition for `t -> t+1` from the realization at `t+1`.
pub fn build_step<S: Real>(rw_next: &RealizedWithin<S>) -> Result<CompiledStep<S>> {
    Ok(build_step_full(rw_next)?.0)
}

/// As [`build_step`], also returning the noise-mapping blocks.
pub fn build_step_full<S: Real>(rw_next: &RealizedWithin<S>) -> Result<(CompiledStep<S>, StepAux<S>)> {
    let binv = block_inverses(rw_next)?;
    let comps = composite_polynomials(rw_next, &binv);
    let v1 = rw_next.b1[0].rows();
    let u = rw_next.r[0].rows();
    let lag = rw_next.b1.len() - 1;
    let m = lag * (v1 + u);
    let proto = rw_next.sigma_var[0];
    let y_row0 = lag * v1;

    let mut t = Mat::zeros(proto, m, m);
    for k in 1..=lag {
        let col_eta = (k - 1) * v1;
        let col_y = lag * v1 + (k - 1) * u;
        t.set_block(0, col_eta, &binv.m1.matmul(&comps.p_eta[k - 1]));
        t.set_block(0, col_y, &binv.m1.matmul(&comps.p_y[k - 1]));
        t.set_block(y_row0, col_eta, &binv.n1.matmul(&comps.q_eta[k - 1]));
        t.set_block(y_row0, col_y, &binv.n1.matmul(&comps.q_y[k - 1]));
    }
    let one = proto.lit(1.0);
    for j in 0..(lag - 1) * v1 {
        t[(v1 + j, j)] = one;
    }
    for j in 0..(lag - 1) * u {
        t[(y_row0 + u + j, lag * v1 + j)] = one;
    }

    // Intercepts: c1 = M1 {alpha_eff + Q0 A0 nu_eff}, c3 = N1 {nu_eff + Lambda0 Xi0 alpha_eff}.
    let nu_eff = rw_next.nu_eff();
    let alpha_eff = rw_next.alpha_eff();
    let qa = rw_next.q[0].matmul(&binv.a0);
    let lx = rw_next.lambda1[0].matmul(&binv.xi0);
    let qa_nu = qa.matvec(&nu_eff);
    let c1_in: Vec<S> = alpha_eff.iter().zip(&qa_nu).map(|(&a, &b)| a + b).collect();
    let c1 = binv.m1.matvec(&c1_in);
    let lx_alpha = lx.matvec(&alpha_eff);
    let c3_in: Vec<S> = nu_eff.iter().zip(&lx_alpha).map(|(&a, &b)| a + b).collect();
    let c3 = binv.n1.matvec(&c3_in);
    let mut c = vec![proto.lit(0.0); m];
    c[..v1].copy_from_slice(&c1);
    c[y_row0..y_row0 + u].copy_from_slice(&c3);

    // Process noise: only the contemporaneous eta and y blocks carry noise.
    // W11 = M1 (Psi + QA Sigma QAᵀ) M1ᵀ
    // W33 = N1 (Sigma + LX Psi LXᵀ) N1ᵀ
    // W13 = M1 (Psi LXᵀ + QA Sigma) N1ᵀ, W31 = W13ᵀ.
    let psi = &rw_next.psi_var;
    let sigma = &rw_next.sigma_var;
    let qa_sig = Mat::from_fn(v1, u, |i, j| qa[(i, j)] * sigma[j]);
    let mut inner11 = qa_sig.matmul(&qa.transpose());
    for i in 0..v1 {
        inner11[(i, i)] = inner11[(i, i)] + psi[i];
    }
    let mut w11 = binv.m1.sandwich(&inner11);
    w11.symmetrize();

    let lx_psi = Mat::from_fn(u, v1, |i, j| lx[(i, j)] * psi[j]);
    let mut inner33 = lx_psi.matmul(&lx.transpose());
    for i in 0..u {
        inner33[(i, i)] = inner33[(i, i)] + sigma[i];
    }
    let mut w33 = binv.n1.sandwich(&inner33);
    w33.symmetrize();

    // Psi LXᵀ + QA Sigma (V1 x U)
    let inner13 = Mat::from_fn(v1, u, |i, j| psi[i] * lx[(j, i)] + qa[(i, j)] * sigma[j]);
    let w13 = binv.m1.matmul(&inner13).matmul(&binv.n1.transpose());

    let mut w = Mat::zeros(proto, m, m);
    w.set_block(0, 0, &w11);
    w.set_block(y_row0, y_row0, &w33);
    w.set_block(0, y_row0, &w13);
    w.set_block(y_row0, 0, &w13.transpose());

    let psi_sd: Vec<S> = psi.iter().map(|v| v.sqrt()).collect();
    let sigma_sd: Vec<S> = sigma.iter().map(|v| v.sqrt()).collect();
    Ok((CompiledStep { t, c, w }, StepAux { m1: binv.m1, n1: binv.n1, qa, lx, psi_sd, sigma_sd }))
}

/// Initial-state policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Stationary mean and Lyapunov covariance of the compiled dynamics.
    Stationary,
    /// Large-kappa diffuse prior (unstable dynamics).
    Diffuse,
    /// Diffuse fallback after a non-convergent Lyapunov iteration.
    DiffuseFallback,
}

#[derive(Debug, Clone)]
pub struct InitialState<S> {
    pub a1: Vec<S>,
    pub p1: Mat<S>,
    pub mode: InitMode,
}

/// Initial augmented-state prior from the steady-state dynamics: stationary
/// moments when the spectral radius is below `1 - tol`, otherwise a diffuse
/// `kappa * I` prior around zero.
pub fn initial_state<S: Real>(
    steady_step: &CompiledStep<S>,
    opts: &CompileOptions,
) -> InitialState<S> {
    let m = steady_step.t.rows();
    let proto = steady_step.c[0];
    let rho = spectral_radius(&steady_step.t.map(|s| s.val()));
    if rho < 1.0 - opts.stationary_tol {
        let eye = Mat::identity(proto, m);
        let i_minus_t = eye.sub(&steady_step.t);
        if let Some(lu) = lu_factor(&i_minus_t) {
            let a1 = lu.solve_vec(&steady_step.c);
            if let Some(mut p1) =
                lyapunov(&steady_step.t, &steady_step.w, opts.lyapunov_tol, opts.lyapunov_max_iter)
            {
                p1.symmetrize();
                if p1.max_abs_val().is_finite() {
                    return InitialState { a1, p1, mode: InitMode::Stationary };
                }
            }
            let p1 = diffuse_p(proto, m, opts.diffuse_kappa);
            return InitialState { a1: vec![proto.lit(0.0); m], p1, mode: InitMode::DiffuseFallback };
        }
    }
    InitialState {
        a1: vec![proto.lit(0.0); m],
        p1: diffuse_p(proto, m, opts.diffuse_kappa),
        mode: InitMode::Diffuse,
    }
}

fn diffuse_p<S: Real>(proto: S, m: usize, kappa: f64) -> Mat<S> {
    let mut p = Mat::zeros(proto, m, m);
    for i in 0..m {
        p[(i, i)] = proto.lit(kappa);
    }
    p
}

/// Per-participant transition sequence.
#[derive(Debug, Clone)]
pub enum Steps<S> {
    /// Time-invariant parameters: one step reused for every transition.
    Invariant(CompiledStep<S>),
    /// One step per transition `t -> t+1`, `t = 1..T-1` (length `T-1`).
    Varying(Vec<CompiledStep<S>>),
    /// Steps for a contiguous index window only (checkpointed gradients).
    Window { offset: usize, steps: Vec<CompiledStep<S>> },
}

impl<S> Steps<S> {
    /// Transition out of (1-based) timepoint `t`, i.e. `t -> t+1`;
    /// `idx` is `t - 1`.
    pub fn at(&self, idx: usize) -> &CompiledStep<S> {
        match self {
            Steps::Invariant(s) => s,
            Steps::Varying(v) => &v[idx],
            Steps::Window { offset, steps } => &steps[idx - offset],
        }
    }
}

/// Loading structure retained for observation compression.
#[derive(Debug, Clone)]
pub struct FactorStructure<S> {
    /// Contemporaneous loadings (U x V1).
    pub lambda0: Mat<S>,
    /// Measurement noise variances (diagonal).
    pub sigma_var: Vec<S>,
    /// Measurement intercept `nu + K1 X1`.
    pub d: Vec<S>,
}

/// A fully compiled per-participant model.
pub struct ParticipantModel<S> {
    pub z: MeasurementMap,
    pub init: InitialState<S>,
    pub steps: Steps<S>,
    /// Present when the model has pure factor measurement structure
    /// (no R/Q couplings, lag-0 loadings only, positive measurement noise,
    /// time-invariant within parameters, stationary initialization).
    pub factor: Option<FactorStructure<S>>,
}

impl<S: Real> ParticipantModel<S> {
    pub fn state_dim(&self) -> usize {
        self.z.state_dim
    }
}

/// Compile one participant across all timepoints.
///
/// `eta3` holds one vector per timepoint (empty slice when the model has no
/// between-timepoint level); `x1` likewise per timepoint. When the within
/// model is time-invariant a single step is compiled and reused.
pub fn compile_participant<S: Real>(
    spec: &ModelSpec,
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[Vec<S>],
    x1: &[Vec<f64>],
    t_len: usize,
    opts: &CompileOptions,
) -> Result<ParticipantModel<S>> {
    let z = MeasurementMap::for_spec(spec);
    let no_eta3: Vec<S> = Vec::new();
    let no_x1: Vec<f64> = Vec::new();
    let pick_eta3 = |t: usize| -> &[S] {
        if eta3.is_empty() {
            &no_eta3
        } else {
            &eta3[t]
        }
    };
    let pick_x1 = |t: usize| -> &[f64] {
        if x1.is_empty() {
            &no_x1
        } else {
            &x1[t]
        }
    };

    if spec.within.is_time_invariant() {
        let rw = realize_at(spec, proto, theta, eta2, pick_eta3(0), pick_x1(0), 1)?;
        let step = build_step(&rw)?;
        let init = initial_state(&step, opts);
        let factor = factor_structure(spec, &rw);
        Ok(ParticipantModel { z, init, steps: Steps::Invariant(step), factor })
    } else {
        let mut steps = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 1..t_len {
            let rw = realize_at(spec, proto, theta, eta2, pick_eta3(t), pick_x1(t), t + 1)?;
            steps.push(build_step(&rw)?);
        }
        let rw1 = realize_at(spec, proto, theta, eta2, pick_eta3(0), pick_x1(0), 1)?;
        let step1 = build_step(&rw1)?;
        let init = initial_state(&step1, opts);
        Ok(ParticipantModel { z, init, steps: Steps::Varying(steps), factor: None })
    }
}

/// Compile only the steps needed for timepoints `t0..t1` (updates at those
/// timepoints and the prediction into `t1`). The initial state is computed
/// when `with_init` is set (first segment); otherwise a placeholder diffuse
/// prior of constants is installed and must not be used.
#[allow(clippy::too_many_arguments)]
pub fn compile_participant_window<S: Real>(
    spec: &ModelSpec,
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[Vec<S>],
    x1: &[Vec<f64>],
    t_len: usize,
    t0: usize,
    t1: usize,
    opts: &CompileOptions,
    with_init: bool,
) -> Result<ParticipantModel<S>> {
    let z = MeasurementMap::for_spec(spec);
    if spec.within.is_time_invariant() {
        let no_eta3: Vec<S> = Vec::new();
        let no_x1: Vec<f64> = Vec::new();
        let e3: &[S] = if eta3.is_empty() { &no_eta3 } else { &eta3[0] };
        let xx: &[f64] = if x1.is_empty() { &no_x1 } else { &x1[0] };
        let rw = realize_at(spec, proto, theta, eta2, e3, xx, 1)?;
        let step = build_step(&rw)?;
        let factor = factor_structure(spec, &rw);
        let init = if with_init {
            initial_state(&step, opts)
        } else {
            InitialState {
                a1: vec![proto.lit(0.0); z.state_dim],
                p1: diffuse_p(proto, z.state_dim, opts.diffuse_kappa),
                mode: InitMode::Diffuse,
            }
        };
        let _ = (t0, t1, t_len);
        return Ok(ParticipantModel { z, init, steps: Steps::Invariant(step), factor });
    }
    let no_eta3: Vec<S> = Vec::new();
    let no_x1: Vec<f64> = Vec::new();
    let pick_eta3 = |t: usize| -> &[S] {
        if eta3.is_empty() {
            &no_eta3
        } else {
            &eta3[t]
        }
    };
    let pick_x1 = |t: usize| -> &[f64] {
        if x1.is_empty() {
            &no_x1
        } else {
            &x1[t]
        }
    };
    let hi = t1.min(t_len.saturating_sub(1));
    let mut steps = Vec::with_capacity(hi.saturating_sub(t0));
    for idx in t0..hi {
        // Step at index idx maps t = idx+1 to idx+2 (1-based), built from the
        // realization at timepoint idx+2, i.e. 0-based slot idx+1.
        let rw = realize_at(spec, proto, theta, eta2, pick_eta3(idx + 1), pick_x1(idx + 1), idx + 2)?;
        steps.push(build_step(&rw)?);
    }
    let init = if with_init {
        let rw1 = realize_at(spec, proto, theta, eta2, pick_eta3(0), pick_x1(0), 1)?;
        let step1 = build_step(&rw1)?;
        initial_state(&step1, opts)
    } else {
        InitialState {
            a1: vec![proto.lit(0.0); z.state_dim],
            p1: diffuse_p(proto, z.state_dim, opts.diffuse_kappa),
            mode: InitMode::Diffuse,
        }
    };
    Ok(ParticipantModel { z, init, steps: Steps::Window { offset: t0, steps }, factor: None })
}

fn realize_at<S: Real>(
    spec: &ModelSpec,
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[S],
    x1: &[f64],
    timepoint: usize,
) -> Result<RealizedWithin<S>> {
    crate::model::realize_within_params(spec, proto, theta, eta2, eta3, x1)
        .map_err(|e| Error::Numeric(format!("realization failed at timepoint {timepoint}: {e}")))
}

fn factor_structure<S: Real>(
    spec: &ModelSpec,
    rw: &RealizedWithin<S>,
) -> Option<FactorStructure<S>> {
    let w = &spec.within;
    if !(w.q.is_zero() && w.r.is_zero() && w.lambda1.is_lag0_only()) {
        return None;
    }
    if spec.dims.u < spec.dims.v1 {
        return None;
    }
    if rw.sigma_var.iter().any(|s| !(s.val() > 0.0)) {
        return None;
    }
    Some(FactorStructure {
        lambda0: rw.lambda1[0].clone(),
        sigma_var: rw.sigma_var.clone(),
        d: rw.nu_eff(),
    })
}

/// One compile pass at the reference parameter point; used by model loading.
pub fn dry_run(spec: &ModelSpec) -> Result<()> {
    let theta = vec![0.0f64; spec.n_theta()];
    let eta2 = vec![0.0f64; spec.dims.v2];
    let eta3: Vec<Vec<f64>> = if spec.dims.v3 > 0 {
        vec![vec![0.0; spec.dims.v3]; 2]
    } else {
        Vec::new()
    };
    let x1: Vec<Vec<f64>> = if spec.within.x1_dim() > 0 {
        vec![vec![0.0; spec.within.x1_dim()]; 2]
    } else {
        Vec::new()
    };
    compile_participant(spec, 1.0f64, &theta, &eta2, &eta3, &x1, 2, &CompileOptions::default())
        .map(|_| ())
        .map_err(|e| Error::Validation(format!("model dry-run compile failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_psd;
    use crate::model::load_model;

    fn scalar_rw(phi: f64, sigma: f64, psi: f64) -> RealizedWithin<f64> {
        let spec = load_model("eg1").unwrap();
        let eta2 = [0.0, phi.atanh(), sigma.ln(), psi.ln()];
        crate::model::realize_within_params(&spec, 1.0f64, &[0.0; 8], &eta2, &[], &[]).unwrap()
    }

    #[test]
    fn scalar_ar1_reduction() {
        // T = [[phi, 0], [phi, 0]], c = 0, W = [[psi^2, psi^2], [psi^2, psi^2 + sigma^2]]
        let (phi, sigma, psi) = (0.6, 0.8, 1.3);
        let rw = scalar_rw(phi, sigma, psi);
        let (step, _) = build_step_full(&rw).unwrap();
        assert!((step.t[(0, 0)] - phi).abs() < 1e-14);
        assert_eq!(step.t[(0, 1)], 0.0);
        assert!((step.t[(1, 0)] - phi).abs() < 1e-14);
        assert_eq!(step.t[(1, 1)], 0.0);
        assert_eq!(step.c, vec![0.0, 0.0]);
        let p2 = psi * psi;
        let s2 = sigma * sigma;
        assert!((step.w[(0, 0)] - p2).abs() < 1e-14);
        assert!((step.w[(0, 1)] - p2).abs() < 1e-14);
        assert!((step.w[(1, 0)] - p2).abs() < 1e-14);
        assert!((step.w[(1, 1)] - (p2 + s2)).abs() < 1e-14);
    }

    #[test]
    fn block_inverses_identity_when_uncoupled() {
        let rw = scalar_rw(0.5, 1.0, 1.0);
        let bi = block_inverses(&rw).unwrap();
        assert_eq!(bi.a0[(0, 0)], 1.0);
        assert_eq!(bi.xi0[(0, 0)], 1.0);
        assert_eq!(bi.m1[(0, 0)], 1.0);
        assert_eq!(bi.n1[(0, 0)], 1.0);
    }

    #[test]
    fn block_inverses_scalar_coupling() {
        // U = V1 = 1, Lambda0 = 1, Q0 = 0.5 => M1 = N1 = 2.
        let mut rw = scalar_rw(0.0, 1.0, 1.0);
        rw.q[0] = Mat::from_rows(1, 1, vec![0.5]);
        let bi = block_inverses(&rw).unwrap();
        assert!((bi.m1[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((bi.n1[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn composite_polynomials_ar2() {
        let spec = crate::model::load_model_with_overrides(
            "eg4-arp",
            &crate::model::presets::PresetOptions { p: Some(2), ..Default::default() },
        )
        .unwrap();
        let eta2 = [0.0, 0.5f64.atanh(), 0.25f64.atanh(), 0.0, 0.0];
        let rw =
            crate::model::realize_within_params(&spec, 1.0f64, &vec![0.0; spec.n_theta()], &eta2, &[], &[])
                .unwrap();
        let bi = block_inverses(&rw).unwrap();
        let comps = composite_polynomials(&rw, &bi);
        assert!((comps.p_eta[0][(0, 0)] - 0.5).abs() < 1e-14);
        assert!((comps.p_eta[1][(0, 0)] - 0.25).abs() < 1e-14);
        assert_eq!(comps.p_y[0][(0, 0)], 0.0);
        assert_eq!(comps.q_y[0][(0, 0)], 0.0);
        // Q^eta_k = Lambda_k + Lambda0 Xi0 B_k = B_k here.
        assert!((comps.q_eta[0][(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lag2_layout_has_identity_shifts() {
        let spec = crate::model::load_model_with_overrides(
            "eg4-arp",
            &crate::model::presets::PresetOptions { p: Some(2), ..Default::default() },
        )
        .unwrap();
        let eta2 = [0.0, 0.3f64.atanh(), 0.1f64.atanh(), 0.0, 0.0];
        let rw =
            crate::model::realize_within_params(&spec, 1.0f64, &vec![0.0; spec.n_theta()], &eta2, &[], &[])
                .unwrap();
        let step = build_step(&rw).unwrap();
        assert_eq!(step.t.rows(), 4);
        // Shift rows: eta lag at (1, 0), y lag at (3, 2).
        assert_eq!(step.t[(1, 0)], 1.0);
        assert_eq!(step.t[(3, 2)], 1.0);
        // Shift rows carry no process noise.
        for j in 0..4 {
            assert_eq!(step.w[(1, j)], 0.0);
            assert_eq!(step.w[(3, j)], 0.0);
        }
        assert!(is_psd(&step.w, 1e-10));
    }

    #[test]
    fn initial_state_policies() {
        // Stationary AR(1): eta-block variance 1/(1 - phi^2).
        let rw = scalar_rw(0.5, 1e-8, 1.0);
        let step = build_step(&rw).unwrap();
        let init = initial_state(&step, &CompileOptions::default());
        assert_eq!(init.mode, InitMode::Stationary);
        assert!((init.p1[(0, 0)] - 1.0 / (1.0 - 0.25)).abs() < 1e-9);

        // Unit root: diffuse.
        let mut rw = scalar_rw(0.5, 1.0, 1.0);
        rw.b1[1] = Mat::from_rows(1, 1, vec![1.0]);
        let step = build_step(&rw).unwrap();
        let init = initial_state(&step, &CompileOptions::default());
        assert_eq!(init.mode, InitMode::Diffuse);
        assert_eq!(init.p1[(0, 0)], 1e3);

        // T = 0: P1 = W, a1 = c.
        let rw = scalar_rw(0.0, 1.0, 1.0);
        let mut step = build_step(&rw).unwrap();
        step.c = vec![0.7, 0.7];
        let init = initial_state(&step, &CompileOptions::default());
        assert_eq!(init.mode, InitMode::Stationary);
        assert!((init.a1[0] - 0.7).abs() < 1e-12);
        assert!((init.p1[(1, 1)] - step.w[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn time_invariant_steps_are_reused() {
        let spec = load_model("eg1").unwrap();
        let theta = vec![0.0; 8];
        let eta2 = vec![0.2, 0.1, -0.3, 0.05];
        let pm = compile_participant(
            &spec,
            1.0f64,
            &theta,
            &eta2,
            &[],
            &[],
            50,
            &CompileOptions::default(),
        )
        .unwrap();
        assert!(matches!(pm.steps, Steps::Invariant(_)));
        // U == V1: factor structure exists (compression is a bijection) but
        // the automatic policy will not engage it.
        assert!(pm.factor.is_some());
    }

    #[test]
    fn eg3_exposes_factor_structure() {
        let spec = load_model("eg3").unwrap();
        let theta = vec![0.0; spec.n_theta()];
        let eta2 = vec![0.0; spec.dims.v2];
        let pm = compile_participant(
            &spec,
            1.0f64,
            &theta,
            &eta2,
            &[],
            &[],
            20,
            &CompileOptions::default(),
        )
        .unwrap();
        let f = pm.factor.expect("eg3 default (U=9 > V1=3) should compress");
        assert_eq!(f.lambda0.rows(), 9);
        assert_eq!(f.lambda0.cols(), 3);
    }

    #[test]
    fn eg5_compiles_time_varying() {
        let spec = load_model("eg5").unwrap();
        let theta = vec![0.0; spec.n_theta()];
        let eta2 = vec![0.0; 13];
        let eta3: Vec<Vec<f64>> = (0..4).map(|t| vec![0.01 * t as f64; 7]).collect();
        let pm = compile_participant(
            &spec,
            1.0f64,
            &theta,
            &eta2,
            &eta3,
            &[],
            4,
            &CompileOptions::default(),
        )
        .unwrap();
        match &pm.steps {
            Steps::Varying(v) => assert_eq!(v.len(), 3),
            _ => panic!("expected varying steps"),
        }
        assert!(pm.factor.is_none());
    }
}
