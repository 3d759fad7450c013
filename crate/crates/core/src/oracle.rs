//! Independent brute-force reference implementations used by the test suite.
//!
//! Nothing here shares code with the recursive filter, the state space
//! assembly it cross-checks, or the samplers: likelihoods come from one dense
//! joint Gaussian density, trajectories from directly solving the coupled
//! within-level equations timepoint by timepoint, and marginalization checks
//! from Gauss-Hermite quadrature.

use crate::compile::ParticipantModel;
use crate::error::{Error, Result};
use crate::kalman::Obs;
use crate::linalg::{chol_logdet, chol_solve_vec, lu_factor, sym_eigen, Mat};
use crate::math::LN_2PI;
use crate::model::{ModelSpec, RealizedWithin};

/// Log-density of a multivariate normal at `x`.
pub fn mvn_logpdf(mean: &[f64], cov: &Mat<f64>, x: &[f64]) -> Result<f64> {
    let n = mean.len();
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("oracle: covariance not positive definite".into()))?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let solve = chol_solve_vec(&l, &diff);
    let quad: f64 = diff.iter().zip(&solve).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (n as f64 * LN_2PI + chol_logdet(&l) + quad))
}

/// Exact log-likelihood of the observed entries by stacking every observed
/// scalar into one joint Gaussian: state means and covariances are built
/// forward from the model matrices, cross-covariances by explicit propagation,
/// and the density is evaluated densely. Cost grows with `(T * U)^3`.
pub fn dense_loglik(model: &ParticipantModel<f64>, obs: &Obs<f64>) -> Result<f64> {
    let t_len = obs.t_len;
    let offset = model.z.offset;

    // Per-timepoint state means and the full cross-covariance grid.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    means.push(model.init.a1.clone());
    for t in 1..t_len {
        let step = model.steps.at(t - 1);
        let prev = &means[t - 1];
        let mut next = step.t.matvec(prev);
        for (v, c) in next.iter_mut().zip(&step.c) {
            *v += c;
        }
        means.push(next);
    }
    // cov[t][s] for s <= t.
    let mut cov: Vec<Vec<Mat<f64>>> = Vec::with_capacity(t_len);
    cov.push(vec![model.init.p1.clone()]);
    for t in 1..t_len {
        let step = model.steps.at(t - 1);
        let mut row: Vec<Mat<f64>> = Vec::with_capacity(t + 1);
        for s in 0..t {
            // Cov(x_t, x_s) = T_{t-1} Cov(x_{t-1}, x_s)
            row.push(step.t.matmul(&cov[t - 1][s]));
        }
        let own = step.t.sandwich(&cov[t - 1][t - 1]).add(&step.w);
        row.push(own);
        cov.push(row);
    }

    // Gather observed scalars: (t, state index).
    let mut idx: Vec<(usize, usize)> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for t in 0..t_len {
        for r in 0..obs.u {
            if obs.observed(t, r) {
                idx.push((t, offset + r));
                y.push(obs.value(t, r));
            }
        }
    }
    if idx.is_empty() {
        return Err(Error::Validation("oracle: no observed entries".into()));
    }
    let k = idx.len();
    let mean: Vec<f64> = idx.iter().map(|&(t, j)| means[t][j]).collect();
    let big = Mat::from_fn(k, k, |a, b| {
        let (ta, ja) = idx[a];
        let (tb, jb) = idx[b];
        if ta >= tb {
            cov[ta][tb][(ja, jb)]
        } else {
            cov[tb][ta][(jb, ja)]
        }
    });
    mvn_logpdf(&mean, &big, &y)
}

/// Simulate the coupled within-level equations directly: at each timepoint
/// the contemporaneous system
/// `[(I - B0) -Q0; -Lambda0 (I - R0)] [eta_t; y_t] = [rhs_eta; rhs_y]`
/// is solved by LU factorization, with lagged terms read from the simulated
/// history (presample values fixed at zero). Returns latent and observation
/// paths. `noises[t] = (xi_t, eps_t)`.
pub fn simulate_direct(
    spec: &ModelSpec,
    theta: &[f64],
    eta2: &[f64],
    eta3: &[Vec<f64>],
    x1: &[Vec<f64>],
    noises: &[(Vec<f64>, Vec<f64>)],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = spec.dims;
    let t_len = noises.len();
    let empty_eta3: Vec<f64> = Vec::new();
    let empty_x1: Vec<f64> = Vec::new();
    let mut etas: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut ys: Vec<Vec<f64>> = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let e3: &[f64] = if eta3.is_empty() { &empty_eta3 } else { &eta3[t] };
        let x: &[f64] = if x1.is_empty() { &empty_x1 } else { &x1[t] };
        let rw: RealizedWithin<f64> =
            crate::model::realize_within_params(spec, 1.0f64, theta, eta2, e3, x)?;
        let (xi, eps) = &noises[t];

        let zero_eta = vec![0.0; d.v1];
        let zero_y = vec![0.0; d.u];
        let mut rhs_eta = rw.alpha_eff();
        for (r, x) in rhs_eta.iter_mut().zip(xi) {
            *r += x;
        }
        let mut rhs_y = rw.nu_eff();
        for (r, x) in rhs_y.iter_mut().zip(eps) {
            *r += x;
        }
        for l in 1..=d.lag {
            let le: &[f64] = if l <= t { &etas[t - l] } else { &zero_eta };
            let ly: &[f64] = if l <= t { &ys[t - l] } else { &zero_y };
            let be = rw.b1[l].matvec(le);
            let qy = rw.q[l].matvec(ly);
            for i in 0..d.v1 {
                rhs_eta[i] += be[i] + qy[i];
            }
            let lam = rw.lambda1[l].matvec(le);
            let ry = rw.r[l].matvec(ly);
            for i in 0..d.u {
                rhs_y[i] += lam[i] + ry[i];
            }
        }

        // Joint contemporaneous system over (eta_t, y_t).
        let n = d.v1 + d.u;
        let mut sys = Mat::zeros(1.0f64, n, n);
        for i in 0..d.v1 {
            for j in 0..d.v1 {
                sys[(i, j)] = if i == j { 1.0 } else { 0.0 } - rw.b1[0][(i, j)];
            }
            for j in 0..d.u {
                sys[(i, d.v1 + j)] = -rw.q[0][(i, j)];
            }
        }
        for i in 0..d.u {
            for j in 0..d.v1 {
                sys[(d.v1 + i, j)] = -rw.lambda1[0][(i, j)];
            }
            for j in 0..d.u {
                sys[(d.v1 + i, d.v1 + j)] = if i == j { 1.0 } else { 0.0 } - rw.r[0][(i, j)];
            }
        }
        let rhs: Vec<f64> = rhs_eta.iter().chain(rhs_y.iter()).copied().collect();
        let lu = lu_factor(&sys)
            .ok_or_else(|| Error::Numeric("oracle: contemporaneous system singular".into()))?;
        let sol = lu.solve_vec(&rhs);
        etas.push(sol[..d.v1].to_vec());
        ys.push(sol[d.v1..].to_vec());
    }
    Ok((etas, ys))
}

/// Run the compiled state space recursion with the same disturbances, mapped
/// through the exact noise transformation; used to check path equivalence
/// against [`simulate_direct`].
pub fn simulate_compiled(
    spec: &ModelSpec,
    theta: &[f64],
    eta2: &[f64],
    eta3: &[Vec<f64>],
    x1: &[Vec<f64>],
    noises: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<Vec<f64>>> {
    let d = spec.dims;
    let t_len = noises.len();
    let empty_eta3: Vec<f64> = Vec::new();
    let empty_x1: Vec<f64> = Vec::new();
    let m = d.state_dim();
    let offset = d.lag * d.v1;

    // First timepoint: the augmented state holds (eta_1, presample zeros,
    // y_1, presample zeros); build it from one direct solve so both routes
    // share the t=1 values exactly.
    let (etas1, ys1) = simulate_direct(spec, theta, eta2, eta3, x1, &noises[..1])?;
    let mut state = vec![0.0; m];
    state[..d.v1].copy_from_slice(&etas1[0]);
    state[offset..offset + d.u].copy_from_slice(&ys1[0]);
    let mut paths = vec![ys1[0].clone()];

    for t in 1..t_len {
        let e3: &[f64] = if eta3.is_empty() { &empty_eta3 } else { &eta3[t] };
        let x: &[f64] = if x1.is_empty() { &empty_x1 } else { &x1[t] };
        let rw = crate::model::realize_within_params(spec, 1.0f64, theta, eta2, e3, x)?;
        let (step, aux) = crate::compile::build_step_full(&rw)?;
        let (xi, eps) = &noises[t];
        let (w1, w3) = aux.map_noise(xi, eps);
        let mut next = step.t.matvec(&state);
        for (v, c) in next.iter_mut().zip(&step.c) {
            *v += c;
        }
        for i in 0..d.v1 {
            next[i] += w1[i];
        }
        for i in 0..d.u {
            next[offset + i] += w3[i];
        }
        paths.push(next[offset..offset + d.u].to_vec());
        state = next;
    }
    Ok(paths)
}

/// Gauss-Hermite nodes and weights (weight function `exp(-x^2)`), via the
/// symmetric tridiagonal Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = Mat::zeros(1.0f64, n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let (eig, v) = sym_eigen(&j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig[k], std::f64::consts::PI.sqrt() * v[(0, k)] * v[(0, k)]))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Integrate `exp(log_f(x))` over R^dim with an isotropic Gauss-Hermite grid
/// centered at `center` with per-coordinate scale `scale`.
pub fn gh_integrate_exp(
    log_f: impl Fn(&[f64]) -> f64,
    center: &[f64],
    scale: f64,
    nodes_per_dim: usize,
) -> f64 {
    let dim = center.len();
    let (nodes, weights) = gauss_hermite(nodes_per_dim);
    let mut total = 0.0f64;
    let mut index = vec![0usize; dim];
    loop {
        let mut x = vec![0.0; dim];
        let mut logw = 0.0;
        for d in 0..dim {
            let k = index[d];
            x[d] = center[d] + scale * nodes[k];
            // exp(-x^2) is the quadrature weight; undo it and add the volume
            // scaling so this integrates against plain Lebesgue measure.
            logw += weights[k].ln() + nodes[k] * nodes[k] + scale.ln();
        }
        total += (log_f(&x) + logw).exp();
        let mut d = 0;
        loop {
            if d == dim {
                return total;
            }
            index[d] += 1;
            if index[d] < nodes_per_dim {
                break;
            }
            index[d] = 0;
            d += 1;
        }
    }
}

/// Two-stage Gauss-Hermite integration of `exp(log_f)`: a coarse wide pass
/// estimates the integrand's per-coordinate mean and standard deviation, and
/// a refined moment-matched pass computes the integral. Near-Gaussian
/// integrands converge to machine precision.
pub fn gh_integrate_exp_adaptive(
    log_f: impl Fn(&[f64]) -> f64,
    dim: usize,
    wide_scale: f64,
    nodes_per_dim: usize,
) -> f64 {
    let (nodes, weights) = gauss_hermite(nodes_per_dim);
    // Coarse moments on an isotropic wide grid centered at zero.
    let mut mass = 0.0f64;
    let mut mean = vec![0.0f64; dim];
    let mut second = vec![0.0f64; dim];
    let mut index = vec![0usize; dim];
    let max_log = {
        // Stabilize the exponentials around the grid maximum.
        let mut best = f64::NEG_INFINITY;
        let mut idx = vec![0usize; dim];
        loop {
            let x: Vec<f64> = (0..dim).map(|d| wide_scale * nodes[idx[d]]).collect();
            best = best.max(log_f(&x));
            if !advance(&mut idx, nodes_per_dim) {
                break;
            }
        }
        best
    };
    let log_f = &log_f;
    loop {
        let mut x = vec![0.0; dim];
        let mut logw = 0.0;
        for d in 0..dim {
            let k = index[d];
            x[d] = wide_scale * nodes[k];
            logw += weights[k].ln() + nodes[k] * nodes[k] + wide_scale.ln();
        }
        let w = (log_f(&x) + logw - max_log).exp();
        mass += w;
        for d in 0..dim {
            mean[d] += w * x[d];
            second[d] += w * x[d] * x[d];
        }
        if !advance(&mut index, nodes_per_dim) {
            break;
        }
    }
    let center: Vec<f64> = mean.iter().map(|m| m / mass).collect();
    let sds: Vec<f64> = second
        .iter()
        .zip(&center)
        .map(|(s2, c)| (s2 / mass - c * c).max(1e-6).sqrt())
        .collect();

    // Refined anisotropic pass, matched to the integrand's moments.
    let mut total = 0.0f64;
    let mut index = vec![0usize; dim];
    loop {
        let mut x = vec![0.0; dim];
        let mut logw = 0.0;
        for d in 0..dim {
            let k = index[d];
            let scale = sds[d] * std::f64::consts::SQRT_2;
            x[d] = center[d] + scale * nodes[k];
            logw += weights[k].ln() + nodes[k] * nodes[k] + scale.ln();
        }
        total += (log_f(&x) + logw).exp();
        if !advance(&mut index, nodes_per_dim) {
            break;
        }
    }
    total
}

fn advance(index: &mut [usize], radix: usize) -> bool {
    for slot in index.iter_mut() {
        *slot += 1;
        if *slot < radix {
            return true;
        }
        *slot = 0;
    }
    false
}
