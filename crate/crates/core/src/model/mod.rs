//! Declarative multilevel model specification.
//!
//! A model couples a lag-L within-level time-series measurement/structural
//! system with linear between-participant and (optionally) between-timepoint
//! latent models. Within-level parameters are additively composed from static
//! parameters and between-level latent variables through link transforms.
//!
//! The on-disk format is JSON with top-level keys `dims`, `within`,
//! `between_participant`, `between_timepoint`, `priors`, `presets`; matrices
//! are row-major arrays and parameterized entries are objects
//! `{base, theta, eta2, eta3, transform}`.

mod parse;
pub mod presets;
mod realize;

pub use parse::{load_model, load_model_str, load_model_with_overrides, save_model};
pub use realize::{
    between_noncentered, between_noncentered_re, between_prior_moments, between_y_contribution,
    between_y_contribution_re, eval_entry, realize_between, realize_within_params,
    BetweenRealized, RealizedWithin,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::LN_2PI;
use crate::tape::Real;

/// Problem dimensions. `n` and `t` are zero until the model is bound to data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// Observed indicators per timepoint.
    pub u: usize,
    /// Within-level latent dimension.
    pub v1: usize,
    /// Between-participant latent dimension.
    pub v2: usize,
    /// Between-timepoint latent dimension (0 when absent).
    #[serde(default)]
    pub v3: usize,
    /// Maximum lag (at least 1).
    pub lag: usize,
    /// Participants; 0 until bound to data.
    #[serde(default)]
    pub n: usize,
    /// Timepoints; 0 until bound to data.
    #[serde(default)]
    pub t: usize,
}

impl Dimensions {
    /// Augmented state dimension `L*(V1+U)`.
    pub fn state_dim(&self) -> usize {
        self.lag * (self.v1 + self.u)
    }
}

/// Link transform applied after additive composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Tanh,
    Exp,
}

impl Transform {
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Transform::Identity => x,
            Transform::Tanh => x.tanh(),
            Transform::Exp => x.exp(),
        }
    }
}

/// A parameterized scalar: `transform(base + theta[i] + eta2[j] + eta3[k])`,
/// omitted indices contributing zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRef {
    #[serde(default)]
    pub base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta3: Option<usize>,
    #[serde(default = "default_transform")]
    pub transform: Transform,
}

fn default_transform() -> Transform {
    Transform::Identity
}

/// Matrix/vector entry: a fixed real or a [`ParamRef`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Fixed(f64),
    Param(ParamRef),
}

impl Entry {
    pub fn is_fixed_zero(&self) -> bool {
        matches!(self, Entry::Fixed(v) if *v == 0.0)
    }

    pub fn references_eta3(&self) -> bool {
        matches!(self, Entry::Param(p) if p.eta3.is_some())
    }

    fn check_indices(&self, n_theta: usize, v2: usize, v3: usize, ctx: &str) -> Result<()> {
        if let Entry::Param(p) = self {
            if let Some(i) = p.theta {
                if i >= n_theta {
                    return Err(Error::Validation(format!(
                        "{ctx}: theta index {i} out of range (|theta| = {n_theta})"
                    )));
                }
            }
            if let Some(i) = p.eta2 {
                if i >= v2 {
                    return Err(Error::Validation(format!(
                        "{ctx}: eta2 index {i} out of range (V2 = {v2})"
                    )));
                }
            }
            if let Some(i) = p.eta3 {
                if i >= v3 {
                    return Err(Error::Validation(format!(
                        "{ctx}: eta3 index {i} out of range (V3 = {v3})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Polynomial matrix: one coefficient matrix per lag `l = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `lags[l]` is the row-major lag-`l` coefficient matrix.
    pub lags: Vec<Vec<Entry>>,
}

impl PolyMatrix {
    pub fn zero(rows: usize, cols: usize, lag: usize) -> Self {
        PolyMatrix { rows, cols, lags: vec![vec![Entry::Fixed(0.0); rows * cols]; lag + 1] }
    }

    pub fn entry(&self, lag: usize, i: usize, j: usize) -> &Entry {
        &self.lags[lag][i * self.cols + j]
    }

    pub fn entry_mut(&mut self, lag: usize, i: usize, j: usize) -> &mut Entry {
        &mut self.lags[lag][i * self.cols + j]
    }

    fn validate(&self, lag: usize, rows: usize, cols: usize, name: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::Validation(format!(
                "{name}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.lags.len() != lag + 1 {
            return Err(Error::Validation(format!(
                "{name}: expected {} coefficient matrices (lag {lag}), got {}",
                lag + 1,
                self.lags.len()
            )));
        }
        for (l, m) in self.lags.iter().enumerate() {
            if m.len() != rows * cols {
                return Err(Error::Validation(format!(
                    "{name}: lag-{l} coefficient has {} entries, expected {}",
                    m.len(),
                    rows * cols
                )));
            }
        }
        Ok(())
    }

    fn validate_strictly_lower_lag0(&self, name: &str) -> Result<()> {
        for i in 0..self.rows {
            for j in i..self.cols {
                if !self.entry(0, i, j).is_fixed_zero() {
                    return Err(Error::Validation(format!(
                        "{name}: contemporaneous matrix not strictly lower triangular (entry [{i},{j}])"
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when every lag >= 1 coefficient is fixed at zero.
    pub fn is_lag0_only(&self) -> bool {
        self.lags[1..].iter().all(|m| m.iter().all(Entry::is_fixed_zero))
    }

    /// True when every coefficient at every lag is fixed at zero.
    pub fn is_zero(&self) -> bool {
        self.lags.iter().all(|m| m.iter().all(Entry::is_fixed_zero))
    }

    fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.lags.iter().flatten()
    }
}

/// Rectangular matrix of entries (regression coefficient blocks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMatrix {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub entries: Vec<Entry>,
}

impl ParamMatrix {
    pub fn empty(rows: usize) -> Self {
        ParamMatrix { rows, cols: 0, entries: Vec::new() }
    }

    pub fn entry(&self, i: usize, j: usize) -> &Entry {
        &self.entries[i * self.cols + j]
    }

    fn validate(&self, rows: usize, name: &str) -> Result<()> {
        if self.rows != rows {
            return Err(Error::Validation(format!("{name}: expected {rows} rows, got {}", self.rows)));
        }
        if self.entries.len() != self.rows * self.cols {
            return Err(Error::Validation(format!(
                "{name}: {} entries for {}x{}",
                self.entries.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

/// Within-level lag-L model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinModel {
    /// Measurement intercepts (length U).
    pub nu1: Vec<Entry>,
    /// Structural intercepts (length V1).
    pub alpha1: Vec<Entry>,
    /// Factor loadings, U x V1 per lag.
    pub lambda1: PolyMatrix,
    /// Measurement auto/cross-regressions, U x U per lag; lag 0 strictly lower.
    pub r: PolyMatrix,
    /// Structural auto/cross-regressions, V1 x V1 per lag; lag 0 strictly lower.
    pub b1: PolyMatrix,
    /// Observation-to-latent regressions, V1 x U per lag.
    pub q: PolyMatrix,
    /// Measurement covariate coefficients, U x dim(X1).
    #[serde(default = "ParamMatrix::default_empty")]
    pub k1: ParamMatrix,
    /// Structural covariate coefficients, V1 x dim(X1).
    #[serde(default = "ParamMatrix::default_empty")]
    pub gamma1: ParamMatrix,
    /// Measurement noise standard deviations (diagonal, length U).
    pub sigma1_sd: Vec<Entry>,
    /// Process noise standard deviations (diagonal, length V1).
    pub psi1_sd: Vec<Entry>,
}

impl ParamMatrix {
    fn default_empty() -> Self {
        ParamMatrix { rows: 0, cols: 0, entries: Vec::new() }
    }
}

impl WithinModel {
    pub fn x1_dim(&self) -> usize {
        self.k1.cols.max(self.gamma1.cols)
    }

    fn entries(&self) -> Vec<&Entry> {
        let mut out: Vec<&Entry> = Vec::new();
        out.extend(self.nu1.iter());
        out.extend(self.alpha1.iter());
        out.extend(self.lambda1.entries());
        out.extend(self.r.entries());
        out.extend(self.b1.entries());
        out.extend(self.q.entries());
        out.extend(self.k1.entries.iter());
        out.extend(self.gamma1.entries.iter());
        out.extend(self.sigma1_sd.iter());
        out.extend(self.psi1_sd.iter());
        out
    }

    /// A within model is time-invariant for a given participant when no entry
    /// references a timepoint latent and there are no within covariates.
    pub fn is_time_invariant(&self) -> bool {
        self.x1_dim() == 0 && !self.entries().iter().any(|e| e.references_eta3())
    }
}

/// Which between level a model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetweenLevel {
    Participant,
    Timepoint,
}

/// Linear between-level structural model for participant- or timepoint-level
/// latent variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetweenModel {
    pub level: BetweenLevel,
    /// Fixed measurement intercept contribution (length U).
    pub nu: Vec<f64>,
    /// Fixed loading/selection matrix, U x V, row-major rows.
    pub lambda: Vec<Vec<f64>>,
    /// Structural intercepts (length V); may reference theta only.
    pub alpha: Vec<Entry>,
    /// Strictly lower triangular latent regression matrix (V x V).
    #[serde(default = "ParamMatrix::default_empty")]
    pub b: ParamMatrix,
    /// Latent covariate coefficients, V x dim(X).
    #[serde(default = "ParamMatrix::default_empty")]
    pub gamma: ParamMatrix,
    /// Measurement covariate coefficients, U x dim(X).
    #[serde(default = "ParamMatrix::default_empty")]
    pub k: ParamMatrix,
    /// Disturbance standard deviations (diagonal, length V). Entries fixed at
    /// exactly zero mark non-varying latent components.
    pub psi_sd: Vec<Entry>,
    /// Measurement residual standard deviations (length U); folded into extra
    /// latent components at load time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_sd: Vec<Entry>,
    /// Per-unit covariate rows (participants or timepoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<Vec<f64>>>,
}

impl BetweenModel {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn x_dim(&self) -> usize {
        self.gamma.cols.max(self.k.cols)
    }

    /// Latent components with disturbance fixed at exactly zero are pinned to
    /// their structural mean and excluded from sampling.
    pub fn pinned(&self) -> Vec<bool> {
        self.psi_sd.iter().map(Entry::is_fixed_zero).collect()
    }

    pub fn free_components(&self) -> Vec<usize> {
        self.pinned()
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| if p { None } else { Some(i) })
            .collect()
    }

    pub fn covariate_row(&self, unit: usize) -> &[f64] {
        match &self.covariates {
            Some(rows) => &rows[unit],
            None => &[],
        }
    }

    fn validate(&self, u: usize, n_theta: usize, name: &str) -> Result<()> {
        let v = self.dim();
        if v == 0 {
            return Err(Error::Validation(format!("{name}: empty latent dimension")));
        }
        if self.nu.len() != u {
            return Err(Error::Validation(format!("{name}: nu length {} != U {u}", self.nu.len())));
        }
        if self.lambda.len() != u || self.lambda.iter().any(|r| r.len() != v) {
            return Err(Error::Validation(format!("{name}: lambda must be {u}x{v}")));
        }
        if self.psi_sd.len() != v {
            return Err(Error::Validation(format!("{name}: psi_sd length != {v}")));
        }
        if !self.sigma_sd.is_empty() && self.sigma_sd.len() != u {
            return Err(Error::Validation(format!("{name}: sigma_sd length != U {u}")));
        }
        if self.b.cols != 0 {
            self.b.validate(v, &format!("{name}.b"))?;
            if self.b.cols != v {
                return Err(Error::Validation(format!("{name}.b must be {v}x{v}")));
            }
            for i in 0..v {
                for j in i..v {
                    if !self.b.entry(i, j).is_fixed_zero() {
                        return Err(Error::Validation(format!(
                            "{name}.b: not strictly lower triangular (entry [{i},{j}])"
                        )));
                    }
                }
            }
        }
        self.gamma.validate(if self.gamma.cols == 0 { self.gamma.rows } else { v }, &format!("{name}.gamma"))?;
        self.k.validate(if self.k.cols == 0 { self.k.rows } else { u }, &format!("{name}.k"))?;
        if self.gamma.cols != self.k.cols && self.gamma.cols != 0 && self.k.cols != 0 {
            return Err(Error::Validation(format!("{name}: gamma and k covariate dims differ")));
        }
        if self.x_dim() > 0 {
            let rows = self.covariates.as_ref().ok_or_else(|| {
                Error::Validation(format!("{name}: covariates required (dim {})", self.x_dim()))
            })?;
            if rows.iter().any(|r| r.len() != self.x_dim()) {
                return Err(Error::Validation(format!("{name}: covariate row width != {}", self.x_dim())));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name}: missing/non-finite covariate value")));
            }
        }
        for (i, e) in self.alpha.iter().chain(self.psi_sd.iter()).enumerate() {
            e.check_indices(n_theta, 0, 0, &format!("{name} entry {i}"))?;
            if let Entry::Param(p) = e {
                if p.eta2.is_some() || p.eta3.is_some() {
                    return Err(Error::Validation(format!(
                        "{name}: between-level entries may reference theta only"
                    )));
                }
            }
        }
        for e in self.b.entries.iter().chain(self.gamma.entries.iter()).chain(self.k.entries.iter()) {
            e.check_indices(n_theta, 0, 0, name)?;
            if let Entry::Param(p) = e {
                if p.eta2.is_some() || p.eta3.is_some() {
                    return Err(Error::Validation(format!(
                        "{name}: between-level entries may reference theta only"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Prior distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorDist {
    Normal { mean: f64, sd: f64 },
    HalfNormal { sd: f64 },
    Exponential { rate: f64 },
    Uniform { low: f64, high: f64 },
}

/// Scale on which the prior density applies. The sampler always works on the
/// unconstrained coordinate; non-trivial scales add the transform Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScale {
    Unconstrained,
    /// Prior on `exp(theta)`; log-scale Jacobian `theta` is added.
    Exp,
    /// Prior on the scaled-tanh map of `theta` into `(low, high)`.
    Interval { low: f64, high: f64 },
}

/// Prior for one static parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPrior {
    pub name: String,
    pub dist: PriorDist,
    #[serde(default = "default_scale")]
    pub scale: PriorScale,
}

fn default_scale() -> PriorScale {
    PriorScale::Unconstrained
}

impl ThetaPrior {
    /// Constrained value corresponding to unconstrained coordinate `th`.
    pub fn constrain<S: Real>(&self, th: S) -> S {
        match self.scale {
            PriorScale::Unconstrained => th,
            PriorScale::Exp => th.exp(),
            PriorScale::Interval { low, high } => {
                let mid = 0.5 * (low + high);
                let half = 0.5 * (high - low);
                th.lit(mid) + th.lit(half) * th.tanh()
            }
        }
    }

    /// Unconstrained coordinate for a constrained value.
    pub fn unconstrain(&self, v: f64) -> f64 {
        match self.scale {
            PriorScale::Unconstrained => v,
            PriorScale::Exp => v.ln(),
            PriorScale::Interval { low, high } => {
                let z = ((v - 0.5 * (low + high)) / (0.5 * (high - low))).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                z.atanh()
            }
        }
    }

    /// Log prior density of the unconstrained coordinate, Jacobian included.
    pub fn log_density<S: Real>(&self, th: S) -> S {
        let (value, log_jac) = match self.scale {
            PriorScale::Unconstrained => (th, th.lit(0.0)),
            PriorScale::Exp => (th.exp(), th),
            PriorScale::Interval { low, high } => {
                let half = 0.5 * (high - low);
                let t = th.tanh();
                let v = th.lit(0.5 * (low + high)) + th.lit(half) * t;
                let jac = (th.lit(half) * (th.lit(1.0) - t * t)).ln();
                (v, jac)
            }
        };
        let lp = match self.dist {
            PriorDist::Normal { mean, sd } => {
                let z = (value - value.lit(mean)) * value.lit(1.0 / sd);
                value.lit(-0.5 * LN_2PI - sd.ln()) - z * z * value.lit(0.5)
            }
            PriorDist::HalfNormal { sd } => {
                let z = value * value.lit(1.0 / sd);
                value.lit(0.5 * (2.0f64 / std::f64::consts::PI).ln() - sd.ln())
                    - z * z * value.lit(0.5)
            }
            PriorDist::Exponential { rate } => value.lit(rate.ln()) - value * value.lit(rate),
            PriorDist::Uniform { low, high } => value.lit(-(high - low).ln()),
        };
        lp + log_jac
    }

    fn validate(&self) -> Result<()> {
        match (self.dist, self.scale) {
            (PriorDist::HalfNormal { .. }, PriorScale::Exp) => Ok(()),
            (PriorDist::Exponential { .. }, PriorScale::Exp) => Ok(()),
            (PriorDist::HalfNormal { .. }, _) | (PriorDist::Exponential { .. }, _) => {
                Err(Error::Validation(format!(
                    "prior {}: positive-support family requires scale \"exp\"",
                    self.name
                )))
            }
            (PriorDist::Uniform { low, high }, PriorScale::Interval { low: a, high: b }) => {
                if low == a && high == b && high > low {
                    Ok(())
                } else {
                    Err(Error::Validation(format!(
                        "prior {}: interval scale must match uniform bounds",
                        self.name
                    )))
                }
            }
            (PriorDist::Uniform { .. }, _) => Err(Error::Validation(format!(
                "prior {}: uniform family requires matching interval scale",
                self.name
            ))),
            (PriorDist::Normal { sd, .. }, _) => {
                if sd > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Validation(format!("prior {}: sd must be positive", self.name)))
                }
            }
        }
    }
}

/// Preset extras: documented data-generating values, sampler initial values,
/// and default experiment sizes. Values are unconstrained coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PresetExtras {
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub truth: std::collections::BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub init: std::collections::BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_t: Option<usize>,
}

/// The full declarative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub dims: Dimensions,
    pub within: WithinModel,
    pub between_participant: BetweenModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub between_timepoint: Option<BetweenModel>,
    pub priors: Vec<ThetaPrior>,
    #[serde(default, skip_serializing_if = "is_default_extras")]
    pub presets: PresetExtras,
}

fn is_default_extras(e: &PresetExtras) -> bool {
    *e == PresetExtras::default()
}

impl ModelSpec {
    pub fn n_theta(&self) -> usize {
        self.priors.len()
    }

    pub fn theta_names(&self) -> Vec<String> {
        self.priors.iter().map(|p| p.name.clone()).collect()
    }

    pub fn theta_index(&self, name: &str) -> Option<usize> {
        self.priors.iter().position(|p| p.name == name)
    }

    /// Rows of the observation that receive a between-participant contribution.
    pub fn y2_rows(&self) -> Vec<bool> {
        Self::contribution_rows(&self.between_participant, self.dims.u)
    }

    /// Rows of the observation that receive a between-timepoint contribution.
    pub fn y3_rows(&self) -> Vec<bool> {
        match &self.between_timepoint {
            Some(bm) => Self::contribution_rows(bm, self.dims.u),
            None => vec![false; self.dims.u],
        }
    }

    fn contribution_rows(bm: &BetweenModel, u: usize) -> Vec<bool> {
        (0..u)
            .map(|r| {
                bm.nu[r] != 0.0
                    || bm.lambda[r].iter().any(|&v| v != 0.0)
                    || (bm.k.cols > 0 && (0..bm.k.cols).any(|c| !bm.k.entry(r, c).is_fixed_zero()))
            })
            .collect()
    }

    /// Structural validation; does not require data to be bound.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.u == 0 || d.v1 == 0 || d.v2 == 0 {
            return Err(Error::Validation("dims: U, V1, V2 must be positive".into()));
        }
        if d.lag == 0 {
            return Err(Error::Validation(
                "dims: lag must be at least 1 (a lag-0 model is rejected at load time)".into(),
            ));
        }
        match (&self.between_timepoint, d.v3) {
            (Some(_), 0) => {
                return Err(Error::Validation("dims: V3 = 0 but between_timepoint present".into()))
            }
            (None, v3) if v3 > 0 => {
                return Err(Error::Validation("dims: V3 > 0 but no between_timepoint model".into()))
            }
            _ => {}
        }

        let w = &self.within;
        let nt = self.n_theta();
        if w.nu1.len() != d.u {
            return Err(Error::Validation("within.nu1 length != U".into()));
        }
        if w.alpha1.len() != d.v1 {
            return Err(Error::Validation("within.alpha1 length != V1".into()));
        }
        if w.sigma1_sd.len() != d.u {
            return Err(Error::Validation("within.sigma1_sd length != U".into()));
        }
        if w.psi1_sd.len() != d.v1 {
            return Err(Error::Validation("within.psi1_sd length != V1".into()));
        }
        w.lambda1.validate(d.lag, d.u, d.v1, "within.lambda1")?;
        w.r.validate(d.lag, d.u, d.u, "within.r")?;
        w.b1.validate(d.lag, d.v1, d.v1, "within.b1")?;
        w.q.validate(d.lag, d.v1, d.u, "within.q")?;
        w.r.validate_strictly_lower_lag0("within.r")?;
        w.b1.validate_strictly_lower_lag0("within.b1")?;
        if w.k1.cols > 0 {
            w.k1.validate(d.u, "within.k1")?;
        }
        if w.gamma1.cols > 0 {
            w.gamma1.validate(d.v1, "within.gamma1")?;
        }
        if w.k1.cols > 0 && w.gamma1.cols > 0 && w.k1.cols != w.gamma1.cols {
            return Err(Error::Validation("within: k1 and gamma1 covariate dims differ".into()));
        }
        for (i, e) in w.entries().iter().enumerate() {
            e.check_indices(nt, d.v2, d.v3, &format!("within entry {i}"))?;
        }
        for e in w.sigma1_sd.iter().chain(w.psi1_sd.iter()) {
            if let Entry::Param(p) = e {
                if p.transform == Transform::Tanh {
                    return Err(Error::Validation(
                        "standard deviation entries must use exp or identity transforms".into(),
                    ));
                }
            }
        }

        if self.between_participant.level != BetweenLevel::Participant {
            return Err(Error::Validation("between_participant.level must be \"participant\"".into()));
        }
        if self.between_participant.dim() != d.v2 {
            return Err(Error::Validation("between_participant dimension != V2".into()));
        }
        self.between_participant.validate(d.u, nt, "between_participant")?;
        if let Some(bt) = &self.between_timepoint {
            if bt.level != BetweenLevel::Timepoint {
                return Err(Error::Validation("between_timepoint.level must be \"timepoint\"".into()));
            }
            if bt.dim() != d.v3 {
                return Err(Error::Validation("between_timepoint dimension != V3".into()));
            }
            bt.validate(d.u, nt, "between_timepoint")?;
        }

        for p in &self.priors {
            p.validate()?;
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.priors {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Validation(format!("duplicate prior name {}", p.name)));
            }
        }
        Ok(())
    }

    /// Fold nonzero between-level measurement residuals into extra latent
    /// components with identity loadings, exact for Gaussian terms.
    pub(crate) fn absorb_between_residuals(&mut self) {
        let u = self.dims.u;
        let mut grow_v2 = 0;
        absorb_residuals_one(&mut self.between_participant, u, &mut grow_v2);
        self.dims.v2 += grow_v2;
        if let Some(bt) = &mut self.between_timepoint {
            let mut grow_v3 = 0;
            absorb_residuals_one(bt, u, &mut grow_v3);
            self.dims.v3 += grow_v3;
        }
    }
}

fn absorb_residuals_one(bm: &mut BetweenModel, _u: usize, grow: &mut usize) {
    if bm.sigma_sd.is_empty() || bm.sigma_sd.iter().all(Entry::is_fixed_zero) {
        bm.sigma_sd.clear();
        return;
    }
    let sigma = std::mem::take(&mut bm.sigma_sd);
    for (row, sd) in sigma.into_iter().enumerate() {
        if sd.is_fixed_zero() {
            continue;
        }
        let v = bm.dim();
        bm.alpha.push(Entry::Fixed(0.0));
        bm.psi_sd.push(sd);
        for (r, lam_row) in bm.lambda.iter_mut().enumerate() {
            lam_row.push(if r == row { 1.0 } else { 0.0 });
        }
        if bm.b.cols > 0 {
            // Extend B with a zero row and column: residual latents are exogenous.
            let old = std::mem::replace(&mut bm.b, ParamMatrix::empty(0));
            let mut entries = Vec::with_capacity((v + 1) * (v + 1));
            for i in 0..v {
                for j in 0..v {
                    entries.push(old.entries[i * old.cols + j]);
                }
                entries.push(Entry::Fixed(0.0));
            }
            entries.extend(std::iter::repeat(Entry::Fixed(0.0)).take(v + 1));
            bm.b = ParamMatrix { rows: v + 1, cols: v + 1, entries };
        }
        if bm.gamma.cols > 0 {
            bm.gamma.rows += 1;
            bm.gamma.entries.extend(std::iter::repeat(Entry::Fixed(0.0)).take(bm.gamma.cols));
        }
        *grow += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_log_densities() {
        let p = ThetaPrior {
            name: "a".into(),
            dist: PriorDist::Normal { mean: 1.0, sd: 2.0 },
            scale: PriorScale::Unconstrained,
        };
        let lp = p.log_density(0.0f64);
        let want = -0.5 * LN_2PI - 2.0f64.ln() - 0.5 * (0.5f64 * 0.5);
        assert!((lp - want).abs() < 1e-14);

        // Half-normal on exp scale integrates to one over theta in R:
        // numeric check on a grid.
        let hp = ThetaPrior {
            name: "tau".into(),
            dist: PriorDist::HalfNormal { sd: 1.5 },
            scale: PriorScale::Exp,
        };
        let mut total = 0.0;
        let h = 1e-3;
        let mut th = -30.0;
        while th < 10.0 {
            total += hp.log_density(th).exp() * h;
            th += h;
        }
        assert!((total - 1.0).abs() < 1e-4, "half-normal/exp normalization: {total}");

        let up = ThetaPrior {
            name: "u".into(),
            dist: PriorDist::Uniform { low: -1.0, high: 3.0 },
            scale: PriorScale::Interval { low: -1.0, high: 3.0 },
        };
        let mut total = 0.0;
        let mut th = -20.0;
        while th < 20.0 {
            total += up.log_density(th).exp() * h;
            th += h;
        }
        assert!((total - 1.0).abs() < 1e-3, "uniform/interval normalization: {total}");
    }

    #[test]
    fn constrain_unconstrain_roundtrip() {
        let p = ThetaPrior {
            name: "tau".into(),
            dist: PriorDist::HalfNormal { sd: 1.0 },
            scale: PriorScale::Exp,
        };
        for v in [0.05, 0.7, 3.0] {
            let th = p.unconstrain(v);
            assert!((p.constrain(th) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_absorption_adds_latents() {
        let mut spec = presets::build("eg1-scalar-ar1", &presets::PresetOptions::default()).unwrap();
        let v2 = spec.dims.v2;
        spec.between_participant.sigma_sd = vec![Entry::Fixed(0.3)];
        spec.absorb_between_residuals();
        assert_eq!(spec.dims.v2, v2 + 1);
        assert_eq!(spec.between_participant.lambda[0].len(), v2 + 1);
        assert_eq!(*spec.between_participant.lambda[0].last().unwrap(), 1.0);
        spec.validate().unwrap();
    }
}
