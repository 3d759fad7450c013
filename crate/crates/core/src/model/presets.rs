//! Built-in experiment presets.
//!
//! Five model families used by the simulation experiments, shipped both as
//! builder functions (structure knobs: indicator count for `eg3`, lag order
//! for `eg4`) and as JSON files under `presets/` generated from the builders
//! with default knobs.
//!
//! Data-generating `truth` and sampler `init` values are documented defaults
//! on unconstrained scales, not externally mandated values.

use std::collections::BTreeMap;

use super::{
    BetweenLevel, BetweenModel, Dimensions, Entry, ModelSpec, ParamMatrix, ParamRef, PolyMatrix,
    PresetExtras, PriorDist, PriorScale, ThetaPrior, Transform, WithinModel,
};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 5] = [
    "eg1-scalar-ar1",
    "eg2-onefactor-3ind",
    "eg3-trivar-var1",
    "eg4-arp",
    "eg5-crossclassified",
];

/// Structure knobs for parameterized presets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresetOptions {
    /// Indicators per latent variable for `eg3-trivar-var1` (1, 2 or 3).
    pub indicators: Option<usize>,
    /// Autoregressive order for `eg4-arp` (1..=4).
    pub p: Option<usize>,
}

impl PresetOptions {
    pub fn is_default(&self) -> bool {
        *self == PresetOptions::default()
    }

    /// Parse `key=value` pairs separated by commas, e.g. `indicators=3,p=2`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut opts = PresetOptions::default();
        for part in text.split(',').filter(|s| !s.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("bad preset override '{part}'")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad preset override value '{part}'")))?;
            match key.trim() {
                "indicators" => opts.indicators = Some(value),
                "p" | "lag" => opts.p = Some(value),
                other => {
                    return Err(Error::Validation(format!(
                        "unknown preset override '{other}' (expected indicators=.. or p=..)"
                    )))
                }
            }
        }
        Ok(opts)
    }
}

/// Resolve a preset name or short alias (`eg1`..`eg5`).
pub fn resolve_name(name: &str) -> Option<&'static str> {
    PRESET_NAMES
        .iter()
        .find(|full| **full == name || full.split('-').next() == Some(name))
        .copied()
}

/// Build a preset model. The result still goes through the standard
/// validation path in [`super::load_model`].
pub fn build(name: &str, opts: &PresetOptions) -> Result<ModelSpec> {
    let full = resolve_name(name)
        .ok_or_else(|| Error::Validation(format!("unknown preset '{name}'")))?;
    match full {
        "eg1-scalar-ar1" => Ok(eg1()),
        "eg2-onefactor-3ind" => Ok(eg2()),
        "eg3-trivar-var1" => eg3(opts.indicators.unwrap_or(3)),
        "eg4-arp" => eg4(opts.p.unwrap_or(2)),
        "eg5-crossclassified" => Ok(eg5()),
        _ => unreachable!(),
    }
}

/// JSON text of the shipped preset file (builder output at default knobs).
pub fn preset_file(name: &str) -> Option<&'static str> {
    match resolve_name(name)? {
        "eg1-scalar-ar1" => Some(include_str!("../../presets/eg1-scalar-ar1.json")),
        "eg2-onefactor-3ind" => Some(include_str!("../../presets/eg2-onefactor-3ind.json")),
        "eg3-trivar-var1" => Some(include_str!("../../presets/eg3-trivar-var1.json")),
        "eg4-arp" => Some(include_str!("../../presets/eg4-arp.json")),
        "eg5-crossclassified" => Some(include_str!("../../presets/eg5-crossclassified.json")),
        _ => None,
    }
}

fn eref(eta2: usize, transform: Transform) -> Entry {
    Entry::Param(ParamRef { base: 0.0, theta: None, eta2: Some(eta2), eta3: None, transform })
}

fn tref(theta: usize) -> Entry {
    Entry::Param(ParamRef {
        base: 0.0,
        theta: Some(theta),
        eta2: None,
        eta3: None,
        transform: Transform::Identity,
    })
}

fn tref_exp(theta: usize) -> Entry {
    Entry::Param(ParamRef {
        base: 0.0,
        theta: Some(theta),
        eta2: None,
        eta3: None,
        transform: Transform::Exp,
    })
}

fn normal(name: &str, mean: f64, sd: f64) -> ThetaPrior {
    ThetaPrior {
        name: name.into(),
        dist: PriorDist::Normal { mean, sd },
        scale: PriorScale::Unconstrained,
    }
}

fn half_normal_exp(name: &str, sd: f64) -> ThetaPrior {
    ThetaPrior { name: name.into(), dist: PriorDist::HalfNormal { sd }, scale: PriorScale::Exp }
}

fn selection_lambda(u: usize, v: usize) -> Vec<Vec<f64>> {
    (0..u)
        .map(|r| (0..v).map(|c| if c == r { 1.0 } else { 0.0 }).collect())
        .collect()
}

struct TruthInit {
    truth: BTreeMap<String, f64>,
    init: BTreeMap<String, f64>,
}

impl TruthInit {
    fn new() -> Self {
        TruthInit { truth: BTreeMap::new(), init: BTreeMap::new() }
    }
    fn truth(&mut self, name: &str, v: f64) -> &mut Self {
        self.truth.insert(name.into(), v);
        self
    }
    fn init(&mut self, name: &str, v: f64) -> &mut Self {
        self.init.insert(name.into(), v);
        self
    }
}

/// Multilevel scalar latent AR(1) with measurement error. Participant latents:
/// (mean, atanh phi, log sigma, log psi).
fn eg1() -> ModelSpec {
    let dims = Dimensions { u: 1, v1: 1, v2: 4, v3: 0, lag: 1, n: 0, t: 0 };
    let mut b1 = PolyMatrix::zero(1, 1, 1);
    *b1.entry_mut(1, 0, 0) = eref(1, Transform::Tanh);
    let mut lambda1 = PolyMatrix::zero(1, 1, 1);
    *lambda1.entry_mut(0, 0, 0) = Entry::Fixed(1.0);
    let within = WithinModel {
        nu1: vec![Entry::Fixed(0.0)],
        alpha1: vec![Entry::Fixed(0.0)],
        lambda1,
        r: PolyMatrix::zero(1, 1, 1),
        b1,
        q: PolyMatrix::zero(1, 1, 1),
        k1: ParamMatrix::empty(1),
        gamma1: ParamMatrix::empty(1),
        sigma1_sd: vec![eref(2, Transform::Exp)],
        psi1_sd: vec![eref(3, Transform::Exp)],
    };
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0],
        lambda: vec![vec![1.0, 0.0, 0.0, 0.0]],
        alpha: (0..4).map(tref).collect(),
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd: (4..8).map(tref_exp).collect(),
        sigma_sd: Vec::new(),
        covariates: None,
    };
    let priors = vec![
        normal("alpha2.1", 0.0, 5.0),
        normal("alpha2.2", 0.0, 1.0),
        normal("alpha2.3", 0.0, 1.0),
        normal("alpha2.4", 0.0, 1.0),
        half_normal_exp("tau.nu", 1.0),
        half_normal_exp("tau.phi", 1.0),
        half_normal_exp("tau.log_sigma", 1.0),
        half_normal_exp("tau.log_psi", 1.0),
    ];
    let mut ti = TruthInit::new();
    ti.truth("alpha2.1", 1.0)
        .truth("alpha2.2", 0.4f64.atanh())
        .truth("alpha2.3", 0.8f64.ln())
        .truth("alpha2.4", 0.0)
        .truth("tau.nu", 0.5f64.ln())
        .truth("tau.phi", 0.3f64.ln())
        .truth("tau.log_sigma", 0.2f64.ln())
        .truth("tau.log_psi", 0.2f64.ln());
    ModelSpec {
        name: "eg1-scalar-ar1".into(),
        dims,
        within,
        between_participant,
        between_timepoint: None,
        priors,
        presets: PresetExtras {
            truth: ti.truth,
            init: ti.init,
            default_n: Some(100),
            default_t: Some(200),
        },
    }
}

/// One-factor latent AR(1) measured by three indicators; indicator intercepts
/// share one between-participant scale.
fn eg2() -> ModelSpec {
    let dims = Dimensions { u: 3, v1: 1, v2: 6, v3: 0, lag: 1, n: 0, t: 0 };
    let mut b1 = PolyMatrix::zero(1, 1, 1);
    *b1.entry_mut(1, 0, 0) = eref(3, Transform::Tanh);
    let mut lambda1 = PolyMatrix::zero(3, 1, 1);
    *lambda1.entry_mut(0, 0, 0) = Entry::Fixed(1.0);
    *lambda1.entry_mut(0, 1, 0) = tref(6); // lambda.2
    *lambda1.entry_mut(0, 2, 0) = tref(7); // lambda.3
    let within = WithinModel {
        nu1: vec![Entry::Fixed(0.0); 3],
        alpha1: vec![Entry::Fixed(0.0)],
        lambda1,
        r: PolyMatrix::zero(3, 3, 1),
        b1,
        q: PolyMatrix::zero(1, 3, 1),
        k1: ParamMatrix::empty(3),
        gamma1: ParamMatrix::empty(1),
        sigma1_sd: vec![eref(4, Transform::Exp); 3],
        psi1_sd: vec![eref(5, Transform::Exp)],
    };
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0; 3],
        lambda: selection_lambda(3, 6),
        alpha: (0..6).map(tref).collect(),
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        // One shared scale for the three indicator means, then phi/sigma/psi.
        psi_sd: vec![
            tref_exp(8),
            tref_exp(8),
            tref_exp(8),
            tref_exp(9),
            tref_exp(10),
            tref_exp(11),
        ],
        sigma_sd: Vec::new(),
        covariates: None,
    };
    let priors = vec![
        normal("alpha2.1", 0.0, 5.0),
        normal("alpha2.2", 0.0, 5.0),
        normal("alpha2.3", 0.0, 5.0),
        normal("alpha2.4", 0.0, 1.0),
        normal("alpha2.5", 0.0, 1.0),
        normal("alpha2.6", 0.0, 1.0),
        normal("lambda.2", 1.0, 1.0),
        normal("lambda.3", 1.0, 1.0),
        half_normal_exp("tau.nu", 1.0),
        half_normal_exp("tau.phi", 1.0),
        half_normal_exp("tau.log_sigma", 1.0),
        half_normal_exp("tau.log_psi", 1.0),
    ];
    let mut ti = TruthInit::new();
    ti.truth("alpha2.1", 1.0)
        .truth("alpha2.2", 2.0)
        .truth("alpha2.3", 0.5)
        .truth("alpha2.4", 0.4f64.atanh())
        .truth("alpha2.5", 0.8f64.ln())
        .truth("alpha2.6", 0.0)
        .truth("lambda.2", 0.8)
        .truth("lambda.3", 1.2)
        .truth("tau.nu", 0.4f64.ln())
        .truth("tau.phi", 0.3f64.ln())
        .truth("tau.log_sigma", 0.2f64.ln())
        .truth("tau.log_psi", 0.2f64.ln());
    ModelSpec {
        name: "eg2-onefactor-3ind".into(),
        dims,
        within,
        between_participant,
        between_timepoint: None,
        priors,
        presets: PresetExtras {
            truth: ti.truth,
            init: ti.init,
            default_n: Some(100),
            default_t: Some(50),
        },
    }
}

/// Trivariate latent VAR(1), each latent measured by `m` indicators in an
/// independent cluster pattern (first loading per latent fixed to one).
fn eg3(m: usize) -> Result<ModelSpec> {
    if !(1..=3).contains(&m) {
        return Err(Error::Validation(format!("eg3: indicators must be 1..=3, got {m}")));
    }
    let v1 = 3usize;
    let u = v1 * m;
    let v2 = u + 11;
    let dims = Dimensions { u, v1, v2, v3: 0, lag: 1, n: 0, t: 0 };

    let mut priors: Vec<ThetaPrior> = Vec::new();
    let mut ti = TruthInit::new();
    for r in 0..u {
        priors.push(normal(&format!("mu.{}", r + 1), 0.0, 5.0));
        ti.truth(&format!("mu.{}", r + 1), 0.5 * (r as f64 + 1.0));
    }
    let phi_truth: [[f64; 3]; 3] = [[0.4, 0.1, 0.0], [0.1, 0.3, 0.1], [0.0, 0.1, 0.35]];
    for i in 0..3 {
        for j in 0..3 {
            let name = format!("phi.{}{}", i + 1, j + 1);
            priors.push(normal(&name, 0.0, 1.0));
            ti.truth(&name, phi_truth[i][j].atanh());
            ti.init(&name, 0.0);
        }
    }
    priors.push(normal("log_sigma", 0.0, 1.0));
    priors.push(normal("log_psi", 0.0, 1.0));
    ti.truth("log_sigma", 0.7f64.ln()).truth("log_psi", 0.8f64.ln());
    ti.init("log_sigma", 0.05).init("log_psi", 0.05);
    let n_alpha = u + 11;
    let mut lambda_theta = Vec::new();
    for latent in 0..v1 {
        for rep in 1..m {
            let name = format!("lambda.{}.{}", latent + 1, rep + 1);
            lambda_theta.push(priors.len());
            priors.push(normal(&name, 1.0, 1.0));
            ti.truth(&name, 0.8 + 0.2 * rep as f64);
        }
    }
    let tau_mu = priors.len();
    priors.push(half_normal_exp("tau.mu", 1.0));
    let tau_phi = priors.len();
    priors.push(half_normal_exp("tau.phi", 1.0));
    let tau_ls = priors.len();
    priors.push(half_normal_exp("tau.log_sigma", 1.0));
    let tau_lp = priors.len();
    priors.push(half_normal_exp("tau.log_psi", 1.0));
    ti.truth("tau.mu", 0.4f64.ln())
        .truth("tau.phi", 0.1f64.ln())
        .truth("tau.log_sigma", 0.2f64.ln())
        .truth("tau.log_psi", 0.2f64.ln());

    // Within level.
    let mut lambda1 = PolyMatrix::zero(u, v1, 1);
    let mut free = lambda_theta.iter();
    for latent in 0..v1 {
        for rep in 0..m {
            let row = latent * m + rep;
            *lambda1.entry_mut(0, row, latent) = if rep == 0 {
                Entry::Fixed(1.0)
            } else {
                tref(*free.next().expect("loading index"))
            };
        }
    }
    let mut b1 = PolyMatrix::zero(v1, v1, 1);
    for i in 0..3 {
        for j in 0..3 {
            *b1.entry_mut(1, i, j) = eref(u + 3 * i + j, Transform::Tanh);
        }
    }
    let within = WithinModel {
        nu1: vec![Entry::Fixed(0.0); u],
        alpha1: vec![Entry::Fixed(0.0); v1],
        lambda1,
        r: PolyMatrix::zero(u, u, 1),
        b1,
        q: PolyMatrix::zero(v1, u, 1),
        k1: ParamMatrix::empty(u),
        gamma1: ParamMatrix::empty(v1),
        sigma1_sd: vec![eref(u + 9, Transform::Exp); u],
        psi1_sd: vec![eref(u + 10, Transform::Exp); v1],
    };

    let mut psi_sd = Vec::with_capacity(v2);
    psi_sd.extend(std::iter::repeat(tref_exp(tau_mu)).take(u));
    psi_sd.extend(std::iter::repeat(tref_exp(tau_phi)).take(9));
    psi_sd.push(tref_exp(tau_ls));
    psi_sd.push(tref_exp(tau_lp));
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0; u],
        lambda: selection_lambda(u, v2),
        alpha: (0..n_alpha).map(tref).collect(),
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd,
        sigma_sd: Vec::new(),
        covariates: None,
    };
    Ok(ModelSpec {
        name: "eg3-trivar-var1".into(),
        dims,
        within,
        between_participant,
        between_timepoint: None,
        priors,
        presets: PresetExtras {
            truth: ti.truth,
            init: ti.init,
            default_n: Some(50),
            default_t: Some(50),
        },
    })
}

/// Scalar latent AR(p) with measurement error; lag coefficients share one
/// between-participant scale.
fn eg4(p: usize) -> Result<ModelSpec> {
    if !(1..=4).contains(&p) {
        return Err(Error::Validation(format!("eg4: p must be 1..=4, got {p}")));
    }
    let v2 = 3 + p;
    let dims = Dimensions { u: 1, v1: 1, v2, v3: 0, lag: p, n: 0, t: 0 };
    let mut b1 = PolyMatrix::zero(1, 1, p);
    for l in 1..=p {
        *b1.entry_mut(l, 0, 0) = eref(l, Transform::Tanh);
    }
    let mut lambda1 = PolyMatrix::zero(1, 1, p);
    *lambda1.entry_mut(0, 0, 0) = Entry::Fixed(1.0);
    let within = WithinModel {
        nu1: vec![Entry::Fixed(0.0)],
        alpha1: vec![Entry::Fixed(0.0)],
        lambda1,
        r: PolyMatrix::zero(1, 1, p),
        b1,
        q: PolyMatrix::zero(1, 1, p),
        k1: ParamMatrix::empty(1),
        gamma1: ParamMatrix::empty(1),
        sigma1_sd: vec![eref(p + 1, Transform::Exp)],
        psi1_sd: vec![eref(p + 2, Transform::Exp)],
    };

    let mut priors = vec![normal("alpha2.nu", 0.0, 5.0)];
    let mut ti = TruthInit::new();
    ti.truth("alpha2.nu", 1.0);
    let phi_means: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
    for l in 1..=p {
        let name = format!("alpha2.phi{l}");
        priors.push(normal(&name, 0.0, 1.0));
        ti.truth(&name, phi_means[l - 1].atanh());
        ti.init(&name, 0.0);
    }
    priors.push(normal("alpha2.log_sigma", 0.0, 1.0));
    priors.push(normal("alpha2.log_psi", 0.0, 1.0));
    ti.truth("alpha2.log_sigma", 0.8f64.ln()).truth("alpha2.log_psi", 0.0);
    let tau_nu = priors.len();
    priors.push(half_normal_exp("tau.nu", 1.0));
    let tau_phi = priors.len();
    priors.push(half_normal_exp("tau.phi", 1.0));
    let tau_ls = priors.len();
    priors.push(half_normal_exp("tau.log_sigma", 1.0));
    let tau_lp = priors.len();
    priors.push(half_normal_exp("tau.log_psi", 1.0));
    ti.truth("tau.nu", 0.5f64.ln())
        .truth("tau.phi", 0.05f64.ln())
        .truth("tau.log_sigma", 0.2f64.ln())
        .truth("tau.log_psi", 0.2f64.ln());

    let mut psi_sd = vec![tref_exp(tau_nu)];
    psi_sd.extend(std::iter::repeat(tref_exp(tau_phi)).take(p));
    psi_sd.push(tref_exp(tau_ls));
    psi_sd.push(tref_exp(tau_lp));
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0],
        lambda: vec![{
            let mut row = vec![0.0; v2];
            row[0] = 1.0;
            row
        }],
        alpha: (0..v2).map(tref).collect(),
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd,
        sigma_sd: Vec::new(),
        covariates: None,
    };
    Ok(ModelSpec {
        name: "eg4-arp".into(),
        dims,
        within,
        between_participant,
        between_timepoint: None,
        priors,
        presets: PresetExtras {
            truth: ti.truth,
            init: ti.init,
            default_n: Some(40),
            default_t: Some(50),
        },
    })
}

/// Cross-classified bivariate VAR(1): three items measuring a latent trait
/// plus one manifest variable, with item intercepts and loadings varying both
/// between participants and between timepoints. The manifest intercept does
/// not vary between timepoints (its disturbance is pinned at zero), and the
/// population loading means are kept non-negative through an exp link.
fn eg5() -> ModelSpec {
    let u = 4usize;
    let v1 = 2usize;
    let v2 = 13usize;
    let v3 = 7usize;
    let dims = Dimensions { u, v1, v2, v3, lag: 1, n: 0, t: 0 };

    // eta2 components: 0-3 item intercepts, 4-6 loading deviations,
    // 7-10 atanh Phi entries (row-major 2x2), 11 log sigma, 12 log psi.
    // eta3 components: 0-3 item intercept deviations (3 pinned), 4-6 loadings.
    let mut lambda1 = PolyMatrix::zero(u, v1, 1);
    for r in 0..3 {
        *lambda1.entry_mut(0, r, 0) = Entry::Param(ParamRef {
            base: 0.0,
            theta: None,
            eta2: Some(4 + r),
            eta3: Some(4 + r),
            transform: Transform::Identity,
        });
    }
    *lambda1.entry_mut(0, 3, 1) = Entry::Fixed(1.0);
    let mut b1 = PolyMatrix::zero(v1, v1, 1);
    for i in 0..2 {
        for j in 0..2 {
            *b1.entry_mut(1, i, j) = eref(7 + 2 * i + j, Transform::Tanh);
        }
    }
    let mut sigma1_sd = vec![eref(11, Transform::Exp); 3];
    sigma1_sd.push(Entry::Fixed(0.0)); // the manifest indicator is noiseless
    let within = WithinModel {
        nu1: vec![Entry::Fixed(0.0); u],
        alpha1: vec![Entry::Fixed(0.0); v1],
        lambda1,
        r: PolyMatrix::zero(u, u, 1),
        b1,
        q: PolyMatrix::zero(v1, u, 1),
        k1: ParamMatrix::empty(u),
        gamma1: ParamMatrix::empty(v1),
        sigma1_sd,
        psi1_sd: vec![Entry::Fixed(1.0), eref(12, Transform::Exp)],
    };

    let mut priors: Vec<ThetaPrior> = Vec::new();
    let mut ti = TruthInit::new();
    for r in 0..4 {
        priors.push(normal(&format!("alpha2.item{}", r + 1), 0.0, 5.0));
        ti.init(&format!("alpha2.item{}", r + 1), 0.0);
    }
    ti.truth("alpha2.item1", 1.0)
        .truth("alpha2.item2", 1.5)
        .truth("alpha2.item3", 2.0)
        .truth("alpha2.item4", 0.5);
    // Non-negative loading means: exp link on the structural intercept.
    for r in 0..3 {
        let name = format!("alpha2.lambda{}", r + 1);
        priors.push(normal(&name, 0.0, 1.0));
        ti.init(&name, 0.0);
    }
    ti.truth("alpha2.lambda1", 0.9f64.ln())
        .truth("alpha2.lambda2", 0.8f64.ln())
        .truth("alpha2.lambda3", 0.7f64.ln());
    let phi_truth: [[f64; 2]; 2] = [[0.3, 0.1], [0.05, 0.25]];
    for i in 0..2 {
        for j in 0..2 {
            let name = format!("alpha2.phi{}{}", i + 1, j + 1);
            priors.push(normal(&name, 0.0, 1.0));
            ti.truth(&name, phi_truth[i][j].atanh());
            ti.init(&name, 0.0);
        }
    }
    priors.push(normal("alpha2.log_sigma", 0.0, 1.0));
    priors.push(normal("alpha2.log_psi", 0.0, 1.0));
    ti.truth("alpha2.log_sigma", 0.6f64.ln()).truth("alpha2.log_psi", 0.8f64.ln());
    ti.init("alpha2.log_sigma", 0.05).init("alpha2.log_psi", 0.05);

    let tau2_item = priors.len();
    priors.push(half_normal_exp("tau2.item", 1.0));
    let tau2_lambda = priors.len();
    priors.push(half_normal_exp("tau2.lambda", 1.0));
    let tau2_phi = priors.len();
    priors.push(half_normal_exp("tau2.phi", 1.0));
    let tau2_ls = priors.len();
    priors.push(half_normal_exp("tau2.log_sigma", 1.0));
    let tau2_lp = priors.len();
    priors.push(half_normal_exp("tau2.log_psi", 1.0));
    let tau3_item = priors.len();
    priors.push(half_normal_exp("tau3.item", 1.0));
    let tau3_lambda = priors.len();
    priors.push(half_normal_exp("tau3.lambda", 1.0));
    ti.truth("tau2.item", 0.4f64.ln())
        .truth("tau2.lambda", 0.1f64.ln())
        .truth("tau2.phi", 0.1f64.ln())
        .truth("tau2.log_sigma", 0.2f64.ln())
        .truth("tau2.log_psi", 0.2f64.ln())
        .truth("tau3.item", 0.2f64.ln())
        .truth("tau3.lambda", 0.1f64.ln());
    for name in
        ["tau2.item", "tau2.lambda", "tau2.phi", "tau2.log_sigma", "tau2.log_psi", "tau3.item", "tau3.lambda"]
    {
        ti.init(name, 0.2f64.ln());
    }

    let mut alpha2: Vec<Entry> = (0..4).map(tref).collect();
    alpha2.extend((4..7).map(|i| tref_exp(i)));
    alpha2.extend((7..13).map(tref));
    let mut psi2_sd = vec![tref_exp(tau2_item); 4];
    psi2_sd.extend(std::iter::repeat(tref_exp(tau2_lambda)).take(3));
    psi2_sd.extend(std::iter::repeat(tref_exp(tau2_phi)).take(4));
    psi2_sd.push(tref_exp(tau2_ls));
    psi2_sd.push(tref_exp(tau2_lp));
    let between_participant = BetweenModel {
        level: BetweenLevel::Participant,
        nu: vec![0.0; u],
        lambda: selection_lambda(u, v2),
        alpha: alpha2,
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd: psi2_sd,
        sigma_sd: Vec::new(),
        covariates: None,
    };

    let mut lambda3 = vec![vec![0.0; v3]; u];
    for r in 0..3 {
        lambda3[r][r] = 1.0;
    }
    let mut psi3_sd = vec![tref_exp(tau3_item); 3];
    psi3_sd.push(Entry::Fixed(0.0)); // manifest intercept does not vary by timepoint
    psi3_sd.extend(std::iter::repeat(tref_exp(tau3_lambda)).take(3));
    let between_timepoint = BetweenModel {
        level: BetweenLevel::Timepoint,
        nu: vec![0.0; u],
        lambda: lambda3,
        alpha: vec![Entry::Fixed(0.0); v3],
        b: ParamMatrix::empty(0),
        gamma: ParamMatrix::empty(0),
        k: ParamMatrix::empty(0),
        psi_sd: psi3_sd,
        sigma_sd: Vec::new(),
        covariates: None,
    };

    ModelSpec {
        name: "eg5-crossclassified".into(),
        dims,
        within,
        between_participant,
        between_timepoint: Some(between_timepoint),
        priors,
        presets: PresetExtras {
            truth: ti.truth,
            init: ti.init,
            default_n: Some(40),
            default_t: Some(150),
        },
    }
}
