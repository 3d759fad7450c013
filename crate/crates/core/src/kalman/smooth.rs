//! Fixed-interval (Rauch-Tung-Striebel) smoothing.

use super::FilterOutput;
use crate::compile::Steps;
use crate::error::{Error, Result};
use crate::linalg::{sym_pseudo_inverse, Mat};

/// Smoothed state moments per timepoint.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `a_{t|T}`.
    pub means: Vec<Vec<f64>>,
    /// `P_{t|T}`.
    pub covs: Vec<Mat<f64>>,
}

/// Backward recursion from a stored filter pass:
/// `J_t = P_{t|t} T_t' pinv(P_{t+1|t})`, then
/// `a_{t|T} = a_{t|t} + J_t (a_{t+1|T} - a_{t+1|t})` and
/// `P_{t|T} = P_{t|t} + J_t (P_{t+1|T} - P_{t+1|t}) J_t'`.
///
/// Deterministic state rows make `P_{t+1|t}` singular; the gain uses a
/// symmetric pseudo-inverse with relative eigenvalue tolerance 1e-10.
pub fn smooth(fo: &FilterOutput<f64>, steps: &Steps<f64>) -> Result<SmootherOutput> {
    let trace = fo
        .trace
        .as_ref()
        .ok_or_else(|| Error::Validation("smoothing requires a stored filter trace".into()))?;
    let t_len = trace.filt_mean.len();
    if t_len == 0 {
        return Err(Error::Validation("empty filter trace".into()));
    }
    let mut means = trace.filt_mean.clone();
    let mut covs = trace.filt_cov.clone();

    for t in (0..t_len - 1).rev() {
        let step = steps.at(t);
        let p_filt = &trace.filt_cov[t];
        let p_pred_next = &trace.pred_cov[t + 1];
        let pinv = sym_pseudo_inverse(p_pred_next, 1e-10);
        // J = P_{t|t} T' pinv
        let j = p_filt.matmul(&step.t.transpose()).matmul(&pinv);

        let dm: Vec<f64> = means[t + 1]
            .iter()
            .zip(&trace.pred_mean[t + 1])
            .map(|(s, p)| s - p)
            .collect();
        let jdm = j.matvec(&dm);
        for (mi, d) in means[t].iter_mut().zip(jdm) {
            *mi += d;
        }

        let dp = covs[t + 1].sub(p_pred_next);
        let mut p = p_filt.add(&j.matmul(&dp).matmul(&j.transpose()));
        p.symmetrize();
        covs[t] = p;
    }
    Ok(SmootherOutput { means, covs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{CompiledStep, InitMode, InitialState, MeasurementMap};
    use crate::kalman::{filter_batch, problem_from_parts, Obs};

    fn scalar_model(tmat: f64, w: f64) -> crate::compile::ParticipantModel<f64> {
        let step = CompiledStep {
            t: Mat::from_rows(1, 1, vec![tmat]),
            c: vec![0.0],
            w: Mat::from_rows(1, 1, vec![w]),
        };
        problem_from_parts(
            InitialState {
                a1: vec![0.0],
                p1: Mat::from_rows(1, 1, vec![1.0]),
                mode: InitMode::Stationary,
            },
            Steps::Invariant(step),
            MeasurementMap { offset: 0, u: 1, state_dim: 1 },
        )
    }

    #[test]
    fn single_timepoint_smoothed_equals_filtered() {
        let model = scalar_model(0.5, 0.3);
        let obs = Obs::complete(1, 1, vec![0.7]).unwrap();
        let fo = filter_batch(&model, &obs, true).unwrap();
        let sm = smooth(&fo, &model.steps).unwrap();
        let tr = fo.trace.as_ref().unwrap();
        assert_eq!(sm.means[0][0], tr.filt_mean[0][0]);
        assert_eq!(sm.covs[0][(0, 0)], tr.filt_cov[0][(0, 0)]);
    }

    #[test]
    fn no_temporal_coupling_smoothed_equals_filtered() {
        let model = scalar_model(0.0, 1.0);
        let obs = Obs::complete(4, 1, vec![0.3, -0.2, 1.0, 0.1]).unwrap();
        let fo = filter_batch(&model, &obs, true).unwrap();
        let sm = smooth(&fo, &model.steps).unwrap();
        let tr = fo.trace.as_ref().unwrap();
        for t in 0..4 {
            assert!((sm.means[t][0] - tr.filt_mean[t][0]).abs() < 1e-12);
            assert!((sm.covs[t][(0, 0)] - tr.filt_cov[t][(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_reduces_variance() {
        let model = scalar_model(0.8, 0.5);
        let obs = Obs::complete(6, 1, vec![0.1, 0.5, -0.4, 0.8, 0.0, -0.6]).unwrap();
        let fo = filter_batch(&model, &obs, true).unwrap();
        let sm = smooth(&fo, &model.steps).unwrap();
        let tr = fo.trace.as_ref().unwrap();
        for t in 0..6 {
            assert!(sm.covs[t][(0, 0)] <= tr.filt_cov[t][(0, 0)] + 1e-8);
        }
    }
}
