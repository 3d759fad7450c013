//! No-U-Turn sampler with multinomial leaf selection and the generalized
//! U-turn criterion on momentum sums (Betancourt 2017), Stan-style
//! progressive top-level subtree joins, dual-averaging step size adaptation,
//! and expanding-window diagonal mass adaptation.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::posterior::Target;

/// Energy error beyond which a transition is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Diagonal Euclidean metric.
#[derive(Debug, Clone)]
pub struct Metric {
    /// Inverse mass (posterior variance estimate) per coordinate.
    pub inv_mass: Vec<f64>,
}

impl Metric {
    pub fn unit(dim: usize) -> Self {
        Metric { inv_mass: vec![1.0; dim] }
    }

    fn sample_momentum(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|im| rng.sample::<f64, _>(StandardNormal) / im.sqrt())
            .collect()
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(pi, im)| pi * pi * im).sum::<f64>()
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_mass).map(|(pi, im)| pi * im).collect()
    }
}

#[derive(Clone)]
struct Phase {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Tree {
    left: Phase,
    right: Phase,
    proposal: Phase,
    log_sum_w: f64,
    p_sum: Vec<f64>,
    divergent: bool,
    turning: bool,
    sum_accept: f64,
    n_leapfrog: usize,
}

fn leapfrog(target: &dyn Target, metric: &Metric, state: &Phase, eps: f64) -> Phase {
    let dim = state.q.len();
    let mut p: Vec<f64> =
        state.p.iter().zip(&state.grad).map(|(pi, gi)| pi + 0.5 * eps * gi).collect();
    let v = metric.velocity(&p);
    let mut q = state.q.clone();
    for i in 0..dim {
        q[i] += eps * v[i];
    }
    let mut grad = vec![0.0; dim];
    let logp = target.logp_grad(&q, &mut grad);
    for i in 0..dim {
        p[i] += 0.5 * eps * grad[i];
    }
    Phase { q, p, grad, logp }
}

fn is_turning(metric: &Metric, rho: &[f64], p_left: &[f64], p_right: &[f64]) -> bool {
    let vl = metric.velocity(p_left);
    let vr = metric.velocity(p_right);
    let dl: f64 = rho.iter().zip(&vl).map(|(r, v)| r * v).sum();
    let dr: f64 = rho.iter().zip(&vr).map(|(r, v)| r * v).sum();
    !dl.is_finite() || !dr.is_finite() || dl < 0.0 || dr < 0.0
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn build_leaf(
    target: &dyn Target,
    metric: &Metric,
    edge: &Phase,
    eps: f64,
    dir: f64,
    h0: f64,
) -> Tree {
    let new = leapfrog(target, metric, edge, dir * eps);
    let h = -new.logp + metric.kinetic(&new.p);
    let energy_error = h - h0;
    let divergent = !h.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
    let log_w = if divergent { f64::NEG_INFINITY } else { -energy_error };
    let accept = if energy_error.is_finite() { (-energy_error).exp().min(1.0) } else { 0.0 };
    Tree {
        p_sum: new.p.clone(),
        left: new.clone(),
        right: new.clone(),
        proposal: new,
        log_sum_w: log_w,
        divergent,
        turning: false,
        sum_accept: accept,
        n_leapfrog: 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_tree(
    target: &dyn Target,
    metric: &Metric,
    edge: &Phase,
    depth: usize,
    eps: f64,
    dir: f64,
    h0: f64,
    rng: &mut ChaCha12Rng,
) -> Tree {
    if depth == 0 {
        return build_leaf(target, metric, edge, eps, dir, h0);
    }
    let mut inner = build_tree(target, metric, edge, depth - 1, eps, dir, h0, rng);
    if inner.divergent || inner.turning {
        return inner;
    }
    let inner_edge = if dir > 0.0 { inner.right.clone() } else { inner.left.clone() };
    let rho_inner = inner.p_sum.clone();
    let p_inner_junction = inner_edge.p.clone();

    let outer = build_tree(target, metric, &inner_edge, depth - 1, eps, dir, h0, rng);
    inner.n_leapfrog += outer.n_leapfrog;
    inner.sum_accept += outer.sum_accept;
    if outer.divergent {
        inner.divergent = true;
        return inner;
    }
    if outer.turning {
        inner.turning = true;
        return inner;
    }

    // Multinomial selection between the sub-trees.
    let p_outer = (outer.log_sum_w - log_sum_exp(inner.log_sum_w, outer.log_sum_w)).exp();
    if rng.random::<f64>() < p_outer {
        inner.proposal = outer.proposal;
    }
    inner.log_sum_w = log_sum_exp(inner.log_sum_w, outer.log_sum_w);

    let p_outer_junction = if dir > 0.0 { outer.left.p.clone() } else { outer.right.p.clone() };
    let rho_outer = outer.p_sum.clone();
    for (s, o) in inner.p_sum.iter_mut().zip(&outer.p_sum) {
        *s += o;
    }
    if dir > 0.0 {
        inner.right = outer.right;
    } else {
        inner.left = outer.left;
    }

    // Generalized U-turn checks on the merged tree and across the junction.
    let turning1 = is_turning(metric, &inner.p_sum, &inner.left.p, &inner.right.p);
    let rho_cross: Vec<f64> =
        rho_inner.iter().zip(&p_outer_junction).map(|(a, b)| a + b).collect();
    let start_p = if dir > 0.0 { &inner.left.p } else { &inner.right.p };
    let turning2 = is_turning(metric, &rho_cross, start_p, &p_outer_junction);
    let rho_cross2: Vec<f64> =
        rho_outer.iter().zip(&p_inner_junction).map(|(a, b)| a + b).collect();
    let end_p = if dir > 0.0 { &inner.right.p } else { &inner.left.p };
    let turning3 = is_turning(metric, &rho_cross2, &p_inner_junction, end_p);
    inner.turning = turning1 || turning2 || turning3;
    inner
}

/// Result of one NUTS transition.
pub struct Transition {
    pub phase: Phase2,
    pub divergent: bool,
    pub treedepth_hit: bool,
    pub accept_stat: f64,
    pub energy: f64,
    pub n_leapfrog: usize,
}

/// Public position/gradient pair carried between transitions.
#[derive(Clone)]
pub struct Phase2 {
    pub q: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

/// One NUTS transition from `state` at step size `eps`.
pub fn transition(
    target: &dyn Target,
    metric: &Metric,
    state: &Phase2,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha12Rng,
) -> Transition {
    let p0 = metric.sample_momentum(rng);
    let h0 = -state.logp + metric.kinetic(&p0);
    let start = Phase { q: state.q.clone(), p: p0.clone(), grad: state.grad.clone(), logp: state.logp };
    let mut tree = Tree {
        left: start.clone(),
        right: start.clone(),
        proposal: start,
        log_sum_w: 0.0,
        p_sum: p0,
        divergent: false,
        turning: false,
        sum_accept: 0.0,
        n_leapfrog: 0,
    };
    let mut divergent = false;
    let mut depth = 0usize;
    while depth < max_depth {
        let dir: f64 = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        let edge = if dir > 0.0 { tree.right.clone() } else { tree.left.clone() };
        let sub = build_tree(target, metric, &edge, depth, eps, dir, h0, rng);
        tree.n_leapfrog += sub.n_leapfrog;
        tree.sum_accept += sub.sum_accept;
        if sub.divergent {
            divergent = true;
            break;
        }
        if sub.turning {
            break;
        }
        // Progressive top-level join, biased toward the new sub-tree.
        let p_new = (sub.log_sum_w - tree.log_sum_w).exp().min(1.0);
        if rng.random::<f64>() < p_new {
            tree.proposal = sub.proposal.clone();
        }
        tree.log_sum_w = log_sum_exp(tree.log_sum_w, sub.log_sum_w);
        let rho_old = tree.p_sum.clone();
        for (s, o) in tree.p_sum.iter_mut().zip(&sub.p_sum) {
            *s += o;
        }
        let (old_edge_p, sub_junction_p, sub_far_p);
        if dir > 0.0 {
            old_edge_p = tree.left.p.clone();
            sub_junction_p = sub.left.p.clone();
            sub_far_p = sub.right.p.clone();
            tree.right = sub.right;
        } else {
            old_edge_p = tree.right.p.clone();
            sub_junction_p = sub.right.p.clone();
            sub_far_p = sub.left.p.clone();
            tree.left = sub.left;
        }
        depth += 1;
        let turning1 = is_turning(metric, &tree.p_sum, &tree.left.p, &tree.right.p);
        let rho_cross: Vec<f64> =
            rho_old.iter().zip(&sub_junction_p).map(|(a, b)| a + b).collect();
        let turning2 = is_turning(metric, &rho_cross, &old_edge_p, &sub_junction_p);
        let rho_cross2: Vec<f64> = sub.p_sum.iter().zip(&old_edge_p).map(|(a, b)| a + b).collect();
        let turning3 = is_turning(metric, &rho_cross2, &old_edge_p, &sub_far_p);
        if turning1 || turning2 || turning3 {
            break;
        }
    }
    let n = tree.n_leapfrog.max(1);
    let accept_stat = (tree.sum_accept / n as f64).clamp(0.0, 1.0);
    let energy = -tree.proposal.logp + metric.kinetic(&tree.proposal.p);
    Transition {
        phase: Phase2 { q: tree.proposal.q, grad: tree.proposal.grad, logp: tree.proposal.logp },
        divergent,
        treedepth_hit: depth >= max_depth,
        accept_stat,
        energy,
        n_leapfrog: tree.n_leapfrog,
    }
}

/// Crude bisection for an initial step size: double or halve until one
/// leapfrog step's acceptance crosses one half.
pub fn find_reasonable_step_size(
    target: &dyn Target,
    metric: &Metric,
    state: &Phase2,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let mut eps = 1.0f64;
    let p0 = metric.sample_momentum(rng);
    let h0 = -state.logp + metric.kinetic(&p0);
    let phase = Phase { q: state.q.clone(), p: p0, grad: state.grad.clone(), logp: state.logp };
    let ratio = |eps: f64| -> f64 {
        let new = leapfrog(target, metric, &phase, eps);
        let h = -new.logp + metric.kinetic(&new.p);
        (h0 - h).exp()
    };
    let mut r = ratio(eps);
    if !r.is_finite() || r == 0.0 {
        // Escape immediately unstable regions.
        for _ in 0..50 {
            eps *= 0.5;
            r = ratio(eps);
            if r.is_finite() && r > 0.0 {
                break;
            }
        }
    }
    let go_up = r > 0.5;
    for _ in 0..50 {
        if go_up {
            eps *= 2.0;
            if ratio(eps) <= 0.5 {
                eps *= 0.5;
                break;
            }
        } else {
            eps *= 0.5;
            if ratio(eps) > 0.5 {
                break;
            }
        }
    }
    eps.clamp(1e-10, 1e3)
}

/// Dual-averaging step size adaptation (Hoffman-Gelman constants).
pub struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    delta: f64,
}

impl DualAveraging {
    pub fn new(eps0: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            delta,
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.m += 1.0;
        let frac = 1.0 / (self.m + T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - accept_stat);
        self.log_eps = self.mu - self.m.sqrt() / GAMMA * self.h_bar;
        let eta = self.m.powf(-KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    pub fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }

    pub fn restart(&mut self, eps0: f64) {
        *self = DualAveraging::new(eps0, self.delta);
    }
}

/// Streaming mean/variance accumulator for mass adaptation.
#[derive(Default, Clone)]
pub struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate (shrunk toward 1e-3 for small windows).
    pub fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.n < 3.0 {
            return None;
        }
        let w = self.n / (self.n + 5.0);
        Some(
            self.m2
                .iter()
                .map(|m2| (w * m2 / (self.n - 1.0) + 1e-3 * (1.0 - w)).max(1e-12))
                .collect(),
        )
    }

    pub fn reset(&mut self) {
        let dim = self.mean.len();
        *self = Welford::new(dim);
    }
}

/// Warm-up schedule: a step-size-only opening buffer, expanding memoryless
/// mass-adaptation windows (25, 50, 100, ...), and a step-size-only closing
/// buffer.
pub struct WarmupSchedule {
    pub init_end: usize,
    pub term_start: usize,
    pub warmup: usize,
    window_end: usize,
    window_size: usize,
}

impl WarmupSchedule {
    pub fn new(warmup: usize) -> Self {
        let init_end = ((warmup as f64 * 0.15).round() as usize).max(1).min(warmup);
        let term_start = warmup - ((warmup as f64 * 0.10).round() as usize).min(warmup / 2);
        let window_size = 25usize;
        WarmupSchedule {
            init_end,
            term_start,
            warmup,
            window_end: (init_end + window_size).min(term_start),
            window_size,
        }
    }

    pub fn in_mass_window(&self, iter: usize) -> bool {
        iter >= self.init_end && iter < self.term_start
    }

    /// True when `iter` closes the current mass window; advances the schedule.
    pub fn window_closes(&mut self, iter: usize) -> bool {
        if !self.in_mass_window(iter) {
            return false;
        }
        if iter + 1 == self.window_end {
            self.window_size *= 2;
            let next = self.window_end + self.window_size;
            // Absorb a final short window into this one.
            self.window_end = if next + self.window_size / 2 > self.term_start {
                self.term_start
            } else {
                next
            };
            return true;
        }
        if iter + 1 == self.term_start {
            return true;
        }
        false
    }
}

/// Initial point search: retry the initializer until the target is finite.
pub fn initialize(
    target: &dyn Target,
    rng: &mut ChaCha12Rng,
    mut draw: impl FnMut(&mut ChaCha12Rng) -> Vec<f64>,
) -> Result<Phase2> {
    for _ in 0..100 {
        let q = draw(rng);
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        if logp.is_finite() {
            return Ok(Phase2 { q, grad, logp });
        }
    }
    Err(Error::Numeric(
        "failed to find an initial point with finite log density after 100 attempts".into(),
    ))
}
