//! Numeric realization of a model at concrete parameter values.
//!
//! Everything here is generic over the [`Real`] scalar so the same code path
//! serves plain evaluation and tape recording.

use super::{BetweenModel, Entry, ModelSpec, ParamMatrix, PolyMatrix};
use crate::error::{Error, Result};
use crate::linalg::{unit_lower_inverse, Mat};
use crate::tape::Real;

/// All within-level matrices and vectors realized at one (participant,
/// timepoint): plain numbers (or tape variables).
#[derive(Debug, Clone)]
pub struct RealizedWithin<S> {
    /// Measurement intercepts (U).
    pub nu1: Vec<S>,
    /// Structural intercepts (V1).
    pub alpha1: Vec<S>,
    /// Measurement covariate contribution `K1 X1` (U).
    pub k1_x: Vec<S>,
    /// Structural covariate contribution `Gamma1 X1` (V1).
    pub gamma1_x: Vec<S>,
    /// Loadings per lag 0..=L (U x V1).
    pub lambda1: Vec<Mat<S>>,
    /// Measurement regressions per lag (U x U); lag 0 strictly lower.
    pub r: Vec<Mat<S>>,
    /// Structural regressions per lag (V1 x V1); lag 0 strictly lower.
    pub b1: Vec<Mat<S>>,
    /// Observation-to-latent regressions per lag (V1 x U).
    pub q: Vec<Mat<S>>,
    /// Measurement noise variances, diagonal (U).
    pub sigma_var: Vec<S>,
    /// Process noise variances, diagonal (V1).
    pub psi_var: Vec<S>,
}

impl<S: Real> RealizedWithin<S> {
    /// `nu1 + K1 X1`.
    pub fn nu_eff(&self) -> Vec<S> {
        self.nu1.iter().zip(&self.k1_x).map(|(&a, &b)| a + b).collect()
    }

    /// `alpha1 + Gamma1 X1`.
    pub fn alpha_eff(&self) -> Vec<S> {
        self.alpha1.iter().zip(&self.gamma1_x).map(|(&a, &b)| a + b).collect()
    }
}

/// Evaluate one entry at the given parameter values.
#[inline]
pub fn eval_entry<S: Real>(e: &Entry, proto: S, theta: &[S], eta2: &[S], eta3: &[S]) -> S {
    match e {
        Entry::Fixed(v) => proto.lit(*v),
        Entry::Param(p) => {
            let mut acc = proto.lit(p.base);
            if let Some(i) = p.theta {
                acc = acc + theta[i];
            }
            if let Some(i) = p.eta2 {
                acc = acc + eta2[i];
            }
            if let Some(i) = p.eta3 {
                acc = acc + eta3[i];
            }
            p.transform.apply(acc)
        }
    }
}

fn eval_vec<S: Real>(es: &[Entry], proto: S, theta: &[S], eta2: &[S], eta3: &[S]) -> Vec<S> {
    es.iter().map(|e| eval_entry(e, proto, theta, eta2, eta3)).collect()
}

fn eval_poly<S: Real>(
    pm: &PolyMatrix,
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[S],
) -> Vec<Mat<S>> {
    pm.lags
        .iter()
        .map(|lag| {
            Mat::from_rows(
                pm.rows,
                pm.cols,
                lag.iter().map(|e| eval_entry(e, proto, theta, eta2, eta3)).collect(),
            )
        })
        .collect()
}

fn eval_matvec<S: Real>(
    pm: &ParamMatrix,
    rows: usize,
    x: &[f64],
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[S],
) -> Result<Vec<S>> {
    if pm.cols == 0 {
        return Ok(vec![proto.lit(0.0); rows]);
    }
    if x.len() != pm.cols {
        return Err(Error::Validation(format!(
            "covariate vector length {} != {}",
            x.len(),
            pm.cols
        )));
    }
    Ok((0..rows)
        .map(|i| {
            let mut acc = proto.lit(0.0);
            for j in 0..pm.cols {
                acc = acc + eval_entry(pm.entry(i, j), proto, theta, eta2, eta3) * proto.lit(x[j]);
            }
            acc
        })
        .collect())
}

/// Realize all within-level quantities for one (participant, timepoint).
pub fn realize_within_params<S: Real>(
    spec: &ModelSpec,
    proto: S,
    theta: &[S],
    eta2: &[S],
    eta3: &[S],
    x1: &[f64],
) -> Result<RealizedWithin<S>> {
    let d = &spec.dims;
    if theta.len() != spec.n_theta() || eta2.len() != d.v2 || eta3.len() != d.v3 {
        return Err(Error::Validation(format!(
            "parameter vector lengths ({}, {}, {}) do not match dims ({}, {}, {})",
            theta.len(),
            eta2.len(),
            eta3.len(),
            spec.n_theta(),
            d.v2,
            d.v3
        )));
    }
    let w = &spec.within;
    let sigma_sd = eval_vec(&w.sigma1_sd, proto, theta, eta2, eta3);
    let psi_sd = eval_vec(&w.psi1_sd, proto, theta, eta2, eta3);
    Ok(RealizedWithin {
        nu1: eval_vec(&w.nu1, proto, theta, eta2, eta3),
        alpha1: eval_vec(&w.alpha1, proto, theta, eta2, eta3),
        k1_x: eval_matvec(&w.k1, d.u, x1, proto, theta, eta2, eta3)?,
        gamma1_x: eval_matvec(&w.gamma1, d.v1, x1, proto, theta, eta2, eta3)?,
        lambda1: eval_poly(&w.lambda1, proto, theta, eta2, eta3),
        r: eval_poly(&w.r, proto, theta, eta2, eta3),
        b1: eval_poly(&w.b1, proto, theta, eta2, eta3),
        q: eval_poly(&w.q, proto, theta, eta2, eta3),
        sigma_var: sigma_sd.iter().map(|&s| s * s).collect(),
        psi_var: psi_sd.iter().map(|&s| s * s).collect(),
    })
}

/// Between-level coefficients realized at theta.
#[derive(Debug, Clone)]
pub struct BetweenRealized<S> {
    pub alpha: Vec<S>,
    /// Strictly lower triangular (V x V); zero matrix when absent.
    pub b: Mat<S>,
    pub gamma: Option<Mat<S>>,
    pub k: Option<Mat<S>>,
    /// Disturbance standard deviations (V), entries may be exactly zero.
    pub sd: Vec<S>,
}

pub fn realize_between<S: Real>(bm: &BetweenModel, proto: S, theta: &[S]) -> BetweenRealized<S> {
    let v = bm.dim();
    let none: &[S] = &[];
    let b = if bm.b.cols == 0 {
        Mat::zeros(proto, v, v)
    } else {
        Mat::from_fn(v, v, |i, j| eval_entry(bm.b.entry(i, j), proto, theta, none, none))
    };
    let eval_pm = |pm: &ParamMatrix| {
        if pm.cols == 0 {
            None
        } else {
            Some(Mat::from_fn(pm.rows, pm.cols, |i, j| {
                eval_entry(pm.entry(i, j), proto, theta, none, none)
            }))
        }
    };
    BetweenRealized {
        alpha: eval_vec(&bm.alpha, proto, theta, none, none),
        b,
        gamma: eval_pm(&bm.gamma),
        k: eval_pm(&bm.k),
        sd: eval_vec(&bm.psi_sd, proto, theta, none, none),
    }
}

/// `(I-B)^{-1}` for a realized between model.
pub fn between_inv<S: Real>(re: &BetweenRealized<S>) -> Mat<S> {
    unit_lower_inverse(&re.b)
}

fn structural_mean<S: Real>(re: &BetweenRealized<S>, inv: &Mat<S>, x_unit: &[f64], proto: S) -> Vec<S> {
    let v = re.alpha.len();
    let mut rhs = re.alpha.clone();
    if let Some(g) = &re.gamma {
        debug_assert_eq!(x_unit.len(), g.cols());
        for i in 0..v {
            for j in 0..g.cols() {
                rhs[i] = rhs[i] + g[(i, j)] * proto.lit(x_unit[j]);
            }
        }
    }
    inv.matvec(&rhs)
}

/// Exact Gaussian prior moments of the between-level latent vector:
/// mean `(I-B)^{-1}(alpha + Gamma X)` and covariance
/// `(I-B)^{-1} Psi (I-B)^{-T}`.
pub fn between_prior_moments<S: Real>(
    bm: &BetweenModel,
    proto: S,
    theta: &[S],
    x_unit: &[f64],
) -> (Vec<S>, Mat<S>) {
    let re = realize_between(bm, proto, theta);
    let inv = unit_lower_inverse(&re.b);
    let mean = structural_mean(&re, &inv, x_unit, proto);
    let v = re.alpha.len();
    // (I-B)^{-1} diag(sd): a lower-triangular square root of the covariance.
    let factor = Mat::from_fn(v, v, |i, j| inv[(i, j)] * re.sd[j]);
    let mut cov = Mat::from_fn(v, v, |i, j| {
        let mut acc = proto.lit(0.0);
        for k in 0..v {
            acc = acc + factor[(i, k)] * factor[(j, k)];
        }
        acc
    });
    cov.symmetrize();
    (mean, cov)
}

/// Non-centered map for the between-level latents: `eta = mean + factor * raw`
/// with `factor = (I-B)^{-1} diag(sd)` (the lower-triangular PSD square root
/// of the prior covariance). Columns of pinned components are zero.
pub fn between_noncentered<S: Real>(
    bm: &BetweenModel,
    proto: S,
    theta: &[S],
    x_unit: &[f64],
) -> (Vec<S>, Mat<S>) {
    let re = realize_between(bm, proto, theta);
    between_noncentered_re(&re, proto, x_unit)
}

/// As [`between_noncentered`], from an already realized between model.
pub fn between_noncentered_re<S: Real>(
    re: &BetweenRealized<S>,
    proto: S,
    x_unit: &[f64],
) -> (Vec<S>, Mat<S>) {
    let inv = unit_lower_inverse(&re.b);
    let mean = structural_mean(&re, &inv, x_unit, proto);
    let v = re.alpha.len();
    let factor = Mat::from_fn(v, v, |i, j| inv[(i, j)] * re.sd[j]);
    (mean, factor)
}

/// Observation contribution of a between level: `nu + Lambda eta + K X`.
pub fn between_y_contribution<S: Real>(
    bm: &BetweenModel,
    proto: S,
    theta: &[S],
    eta: &[S],
    x_unit: &[f64],
) -> Vec<S> {
    let re = realize_between(bm, proto, theta);
    between_y_contribution_re(bm, &re, proto, eta, x_unit)
}

/// As [`between_y_contribution`], from an already realized between model.
pub fn between_y_contribution_re<S: Real>(
    bm: &BetweenModel,
    re: &BetweenRealized<S>,
    proto: S,
    eta: &[S],
    x_unit: &[f64],
) -> Vec<S> {
    let u = bm.nu.len();
    (0..u)
        .map(|r| {
            let mut acc = proto.lit(bm.nu[r]);
            for (j, &e) in eta.iter().enumerate() {
                acc = acc + proto.lit(bm.lambda[r][j]) * e;
            }
            if let Some(k) = &re.k {
                for j in 0..k.cols() {
                    acc = acc + k[(r, j)] * proto.lit(x_unit[j]);
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_psd;
    use crate::model::{BetweenLevel, ParamRef, Transform};

    fn pref(base: f64, eta2: Option<usize>, eta3: Option<usize>, tr: Transform) -> Entry {
        Entry::Param(ParamRef { base, theta: None, eta2, eta3, transform: tr })
    }

    #[test]
    fn eval_entry_matches_spec_examples() {
        let theta: [f64; 0] = [];
        let eta2 = [0.0, 0.1, 0.0, 0.0];
        let eta3 = [0.0, 0.0, -0.05];
        // exp(0) = 1
        let e = pref(0.0, Some(3), None, Transform::Exp);
        assert_eq!(eval_entry(&e, 1.0f64, &theta, &eta2, &[]), 1.0);
        // tanh(0) = 0
        let e = pref(0.0, Some(2), None, Transform::Tanh);
        assert_eq!(eval_entry(&e, 1.0f64, &theta, &eta2, &[]), 0.0);
        // tanh(0.2 + 0.1 - 0.05) = tanh(0.25)
        let e = pref(0.2, Some(1), Some(2), Transform::Tanh);
        let got = eval_entry(&e, 1.0f64, &theta, &eta2, &eta3);
        assert!((got - 0.25f64.tanh()).abs() < 1e-12);
        assert!((got - 0.244919).abs() < 1e-6);
    }

    fn plain_between(v: usize) -> BetweenModel {
        BetweenModel {
            level: BetweenLevel::Participant,
            nu: vec![0.0],
            lambda: vec![vec![0.0; v]],
            alpha: vec![Entry::Fixed(0.0); v],
            b: ParamMatrix::empty(0),
            gamma: ParamMatrix::empty(0),
            k: ParamMatrix::empty(0),
            psi_sd: vec![Entry::Fixed(1.0); v],
            sigma_sd: Vec::new(),
            covariates: None,
        }
    }

    #[test]
    fn between_moments_identity_reduction() {
        // B = 0, Gamma = 0, alpha = (1,2), Psi = diag(4,9)
        let mut bm = plain_between(2);
        bm.alpha = vec![Entry::Fixed(1.0), Entry::Fixed(2.0)];
        bm.psi_sd = vec![Entry::Fixed(2.0), Entry::Fixed(3.0)];
        let (mean, cov) = between_prior_moments(&bm, 1.0f64, &[], &[]);
        assert_eq!(mean, vec![1.0, 2.0]);
        assert_eq!(cov[(0, 0)], 4.0);
        assert_eq!(cov[(1, 1)], 9.0);
        assert_eq!(cov[(0, 1)], 0.0);
    }

    #[test]
    fn between_moments_with_coupling() {
        // B = [[0,0],[0.5,0]], alpha = (1,0), Psi = I
        // mean = (1, 0.5), cov = [[1,0.5],[0.5,1.25]]
        let mut bm = plain_between(2);
        bm.alpha = vec![Entry::Fixed(1.0), Entry::Fixed(0.0)];
        bm.b = ParamMatrix {
            rows: 2,
            cols: 2,
            entries: vec![
                Entry::Fixed(0.0),
                Entry::Fixed(0.0),
                Entry::Fixed(0.5),
                Entry::Fixed(0.0),
            ],
        };
        let (mean, cov) = between_prior_moments(&bm, 1.0f64, &[], &[]);
        assert!((mean[0] - 1.0).abs() < 1e-14 && (mean[1] - 0.5).abs() < 1e-14);
        for (got, want) in
            [cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]].iter().zip([1.0, 0.5, 0.5, 1.25])
        {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn pinned_component_yields_zero_rows() {
        let mut bm = plain_between(2);
        bm.psi_sd = vec![Entry::Fixed(1.0), Entry::Fixed(0.0)];
        let (_, cov) = between_prior_moments(&bm, 1.0f64, &[], &[]);
        assert_eq!(cov[(1, 1)], 0.0);
        assert_eq!(cov[(0, 1)], 0.0);
        assert_eq!(cov[(1, 0)], 0.0);
        assert_eq!(bm.pinned(), vec![false, true]);
    }

    #[test]
    fn covariance_is_psd_for_random_inputs() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v = rng.random_range(1..5usize);
            let mut bm = plain_between(v);
            bm.alpha = (0..v).map(|_| Entry::Fixed(rng.random_range(-2.0..2.0))).collect();
            bm.psi_sd = (0..v).map(|_| Entry::Fixed(rng.random_range(0.0..2.0))).collect();
            let mut entries = vec![Entry::Fixed(0.0); v * v];
            for i in 0..v {
                for j in 0..i {
                    entries[i * v + j] = Entry::Fixed(rng.random_range(-1.0..1.0));
                }
            }
            bm.b = ParamMatrix { rows: v, cols: v, entries };
            let (_, cov) = between_prior_moments(&bm, 1.0f64, &[], &[]);
            assert!(is_psd(&cov, 1e-12), "covariance not PSD");
        }
    }

    #[test]
    fn noncentered_factor_reproduces_covariance() {
        let mut bm = plain_between(3);
        bm.psi_sd = vec![Entry::Fixed(0.5), Entry::Fixed(0.0), Entry::Fixed(2.0)];
        let mut entries = vec![Entry::Fixed(0.0); 9];
        entries[3] = Entry::Fixed(0.7); // b[1,0]
        entries[7] = Entry::Fixed(-0.2); // b[2,1]
        bm.b = ParamMatrix { rows: 3, cols: 3, entries };
        let (_, cov) = between_prior_moments(&bm, 1.0f64, &[], &[]);
        let (_, factor) = between_noncentered(&bm, 1.0f64, &[], &[]);
        let recon = factor.matmul(&factor.transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!((recon[(i, j)] - cov[(i, j)]).abs() < 1e-13);
            }
        }
    }
}
