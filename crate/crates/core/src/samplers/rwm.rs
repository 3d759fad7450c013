//! Collapsed single-site random-walk Metropolis baseline.
//!
//! Deliberately inefficient reference sampler: every coordinate update costs
//! one full marginal-likelihood evaluation (the whole filter pass over all
//! participants), so one sweep costs `dim` filter evaluations. Per-coordinate
//! step sizes adapt toward 44% acceptance during warm-up.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::posterior::Target;

pub struct RwmChainState {
    pub x: Vec<f64>,
    pub logp: f64,
    pub log_step: Vec<f64>,
    accepts: Vec<usize>,
    proposals: Vec<usize>,
    batch: usize,
}

impl RwmChainState {
    pub fn new(x: Vec<f64>, logp: f64) -> Self {
        let dim = x.len();
        RwmChainState {
            x,
            logp,
            log_step: vec![(0.5f64).ln(); dim],
            accepts: vec![0; dim],
            proposals: vec![0; dim],
            batch: 0,
        }
    }

    /// One full sweep over coordinates in fixed order. Returns the sweep's
    /// mean acceptance rate.
    pub fn sweep(&mut self, target: &dyn Target, rng: &mut ChaCha12Rng) -> f64 {
        let dim = self.x.len();
        let mut accepted = 0usize;
        for k in 0..dim {
            let step = self.log_step[k].exp();
            let old = self.x[k];
            let proposal = old + step * rng.sample::<f64, _>(StandardNormal);
            self.x[k] = proposal;
            let logp_new = target.logp(&self.x);
            self.proposals[k] += 1;
            let log_ratio = logp_new - self.logp;
            if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
                self.logp = logp_new;
                self.accepts[k] += 1;
                accepted += 1;
            } else {
                self.x[k] = old;
            }
        }
        accepted as f64 / dim as f64
    }

    /// Robbins-Monro style batch adaptation toward 44% acceptance.
    pub fn adapt(&mut self) {
        self.batch += 1;
        let delta = (2.0 / (self.batch as f64).sqrt()).min(0.25);
        for k in 0..self.x.len() {
            if self.proposals[k] == 0 {
                continue;
            }
            let rate = self.accepts[k] as f64 / self.proposals[k] as f64;
            if rate > 0.44 {
                self.log_step[k] += delta;
            } else {
                self.log_step[k] -= delta;
            }
            self.accepts[k] = 0;
            self.proposals[k] = 0;
        }
    }
}

/// Number of sweeps between step-size adaptations during warm-up.
pub const ADAPT_BATCH: usize = 25;
