//! MCMC convergence and efficiency diagnostics.
//!
//! Rank-normalized split R-hat, bulk effective sample size, and tail
//! effective sample size follow Vehtari, Gelman, Simpson, Carpenter and
//! Buerkner (2021): chains are split in half, mapped through fractional ranks
//! `(r - 3/8) / (S + 1/4)` and the standard normal quantile, and the
//! autocovariance sum is truncated by Geyer's initial monotone sequence.
//! All three are invariant under strictly monotone transforms of the draws.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::inv_phi;

/// Strict convergence threshold for max R-hat.
pub const RHAT_STRICT: f64 = 1.01;
/// Lenient convergence threshold.
pub const RHAT_LOOSE: f64 = 1.05;

/// Per-parameter diagnostic summary.
#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub bulk_ess: f64,
    pub tail_ess: f64,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

fn pooled(chains: &[Vec<f64>]) -> Vec<f64> {
    chains.iter().flatten().copied().collect()
}

fn check_nonempty(chains: &[Vec<f64>]) -> Result<()> {
    if chains.is_empty() || chains.iter().any(|c| c.is_empty()) {
        return Err(Error::Validation("diagnostics require non-empty chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Validation("chains must have equal length".into()));
    }
    Ok(())
}

/// Average ranks (ties averaged), mapped through fractional ranks
/// `(r - 3/8)/(S + 1/4)` and the normal quantile. The output preserves the
/// chain layout and is invariant under strictly monotone transforms of the
/// input.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_nonempty(chains)?;
    let flat = pooled(chains);
    let s = flat.len();
    if s < 2 {
        return Err(Error::Validation("rank normalization needs at least 2 draws".into()));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    if flat[order[0]] == flat[order[s - 1]] {
        return Err(Error::Numeric("zero variance parameter".into()));
    }
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0f64; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let denom = s as f64 + 0.25;
    let z: Vec<f64> = ranks.iter().map(|r| inv_phi((r - 0.375) / denom)).collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(z[pos..pos + c.len()].to_vec());
        pos += c.len();
    }
    Ok(out)
}

/// Split each chain into halves (for odd lengths the middle draw is dropped).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn chain_mean_var(c: &[f64]) -> (f64, f64) {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Potential scale reduction from already-split chains.
fn rhat_from_split(split: &[Vec<f64>]) -> Result<f64> {
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    if n < 2.0 {
        return Err(Error::Validation("split R-hat needs at least 4 draws per chain".into()));
    }
    let stats: Vec<(f64, f64)> = split.iter().map(|c| chain_mean_var(c)).collect();
    if stats.iter().any(|(_, v)| *v == 0.0) {
        return Err(Error::Numeric("zero variance parameter".into()));
    }
    let grand = stats.iter().map(|(m, _)| m).sum::<f64>() / m;
    let b = n / (m - 1.0) * stats.iter().map(|(mu, _)| (mu - grand) * (mu - grand)).sum::<f64>();
    let w = stats.iter().map(|(_, v)| v).sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Rank-normalized split R-hat: the maximum of the bulk statistic and the
/// statistic of the folded draws `|x - median|`.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(chains)?;
    if chains[0].len() < 4 {
        return Err(Error::Validation("split R-hat needs at least 4 draws per chain".into()));
    }
    let split = split_chains(chains);
    if split.iter().any(|c| {
        let (_, v) = chain_mean_var(c);
        v == 0.0
    }) {
        return Err(Error::Numeric("zero variance parameter".into()));
    }
    let z = rank_normalize(&split)?;
    let bulk = rhat_from_split(&z)?;
    // Folding measures scale disagreement; applied to the rank-normalized
    // draws so the combined statistic stays exactly invariant under strictly
    // monotone transforms of the input.
    let zmed = quantile_sorted(&sorted(&pooled(&z)), 0.5);
    let folded: Vec<Vec<f64>> =
        z.iter().map(|c| c.iter().map(|v| (v - zmed).abs()).collect()).collect();
    let tail = rhat_from_split(&rank_normalize(&folded)?)?;
    Ok(bulk.max(tail))
}

/// Effective sample size of already-split chains via the multi-chain
/// autocovariance estimate with Geyer initial-monotone truncation, capped at
/// `S log10(S)`.
fn ess_from_split(split: &[Vec<f64>]) -> Result<f64> {
    let m = split.len();
    let n = split[0].len();
    if n < 4 {
        return Err(Error::Validation("ESS needs at least 8 draws per chain".into()));
    }
    let stats: Vec<(f64, f64)> = split.iter().map(|c| chain_mean_var(c)).collect();
    if stats.iter().any(|(_, v)| *v == 0.0) {
        return Err(Error::Numeric("zero variance parameter".into()));
    }
    let w = stats.iter().map(|(_, v)| v).sum::<f64>() / m as f64;
    let grand = stats.iter().map(|(mu, _)| mu).sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        stats.iter().map(|(mu, _)| (mu - grand) * (mu - grand)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;

    // Biased per-chain autocovariances (divisor n).
    let acov = |lag: usize| -> f64 {
        let mut total = 0.0;
        for (c, (mean, _)) in split.iter().zip(&stats) {
            let mut acc = 0.0;
            for i in 0..n - lag {
                acc += (c[i] - mean) * (c[i + lag] - mean);
            }
            total += acc / n as f64;
        }
        total / m as f64
    };

    let mut rho = vec![0.0f64; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0f64;
    let mut rho_odd = 1.0 - (w - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut s = 1usize;
    while s < n.saturating_sub(4) && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (w - acov(s + 1)) / var_plus;
        rho_odd = 1.0 - (w - acov(s + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    // Geyer initial monotone sequence: pair sums must not increase.
    let mut k = 1usize;
    while k + 3 <= max_s {
        if rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k] {
            let half = (rho[k - 1] + rho[k]) / 2.0;
            rho[k + 1] = half;
            rho[k + 2] = half;
        }
        k += 2;
    }
    let total = m * n;
    let mut tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>();
    if max_s < n && rho_even > 0.0 {
        tau += rho[max_s];
    }
    let ess = total as f64 / tau;
    let cap = total as f64 * (total as f64).log10();
    Ok(ess.min(cap).max(0.0))
}

/// Bulk effective sample size: ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(chains)?;
    if chains[0].len() < 8 {
        return Err(Error::Validation("bulk ESS needs at least 8 draws per chain".into()));
    }
    ess_from_split(&rank_normalize(&split_chains(chains))?)
}

/// Tail effective sample size: the minimum over the ESS of the indicator
/// draws `I(x <= q05)` and `I(x >= q95)` (rank-normalized, which for a binary
/// sequence is an affine relabeling).
pub fn ess_tail(chains: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(chains)?;
    if chains[0].len() < 8 {
        return Err(Error::Validation("tail ESS needs at least 8 draws per chain".into()));
    }
    let flat_sorted = sorted(&pooled(chains));
    let q05 = quantile_sorted(&flat_sorted, 0.05);
    let q95 = quantile_sorted(&flat_sorted, 0.95);
    let lower: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|&v| if v <= q05 { 1.0 } else { 0.0 }).collect())
        .collect();
    let upper: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|&v| if v >= q95 { 1.0 } else { 0.0 }).collect())
        .collect();
    let e_lo = ess_from_split(&rank_normalize(&split_chains(&lower))?)?;
    let e_hi = ess_from_split(&rank_normalize(&split_chains(&upper))?)?;
    Ok(e_lo.min(e_hi))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear-interpolation quantile of pre-sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Full summary for one parameter.
pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> Result<ParamDiagnostics> {
    check_nonempty(chains)?;
    let flat = pooled(chains);
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let s = sorted(&flat);
    Ok(ParamDiagnostics {
        name: name.to_string(),
        rhat: split_rhat(chains)?,
        bulk_ess: ess_bulk(chains)?,
        tail_ess: ess_tail(chains)?,
        mean,
        sd: var.max(0.0).sqrt(),
        q05: quantile_sorted(&s, 0.05),
        q50: quantile_sorted(&s, 0.5),
        q95: quantile_sorted(&s, 0.95),
    })
}

/// One run's efficiency summary over its parameters of interest.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyRow {
    pub label: String,
    /// Minimum bulk/tail ESS over the parameters of interest.
    pub min_bulk_ess: f64,
    pub min_tail_ess: f64,
    /// Maximum R-hat over the parameters of interest.
    pub max_rhat: f64,
    pub wall_minutes: f64,
    pub bulk_ess_per_minute: f64,
    pub tail_ess_per_minute: f64,
    /// Projected minutes to reach target bulk ESS (rate extrapolation).
    pub minutes_to_400: f64,
    pub minutes_to_1000: f64,
    pub minutes_to_10000: f64,
}

/// Projected minutes to reach a target ESS at the observed rate.
pub fn minutes_to_target(ess_per_minute: f64, target: f64) -> f64 {
    target / ess_per_minute
}

/// Aggregate one run: `per_param` holds (name, chains) for every parameter of
/// interest; wall time covers warm-up plus sampling.
pub fn efficiency_report(
    label: &str,
    per_param: &[(String, Vec<Vec<f64>>)],
    wall_minutes: f64,
) -> Result<EfficiencyRow> {
    if per_param.is_empty() {
        return Err(Error::Validation("efficiency report needs at least one parameter".into()));
    }
    let mut min_bulk = f64::INFINITY;
    let mut min_tail = f64::INFINITY;
    let mut max_rhat: f64 = 0.0;
    for (_, chains) in per_param {
        min_bulk = min_bulk.min(ess_bulk(chains)?);
        min_tail = min_tail.min(ess_tail(chains)?);
        max_rhat = max_rhat.max(split_rhat(chains)?);
    }
    let bulk_rate = min_bulk / wall_minutes;
    let tail_rate = min_tail / wall_minutes;
    Ok(EfficiencyRow {
        label: label.to_string(),
        min_bulk_ess: min_bulk,
        min_tail_ess: min_tail,
        max_rhat,
        wall_minutes,
        bulk_ess_per_minute: bulk_rate,
        tail_ess_per_minute: tail_rate,
        minutes_to_400: minutes_to_target(bulk_rate, 400.0),
        minutes_to_1000: minutes_to_target(bulk_rate, 1000.0),
        minutes_to_10000: minutes_to_target(bulk_rate, 10_000.0),
    })
}
