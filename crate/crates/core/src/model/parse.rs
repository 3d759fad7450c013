//! Model file loading, validation and canonical serialization.

use std::path::Path;

use super::presets::{self, PresetOptions};
use super::ModelSpec;
use crate::error::{Error, Result};

/// Load a model from a file path or a built-in preset name (`eg1-scalar-ar1`,
/// ..., or the short aliases `eg1`..`eg5`). The model is validated end to end,
/// including one compile dry run at a reference parameter point.
pub fn load_model(path_or_name: &str) -> Result<ModelSpec> {
    load_model_with_overrides(path_or_name, &PresetOptions::default())
}

/// As [`load_model`], with preset structure overrides (`indicators=..`,
/// `p=..`). Overrides are rejected for file-based models.
pub fn load_model_with_overrides(path_or_name: &str, opts: &PresetOptions) -> Result<ModelSpec> {
    if let Some(name) = presets::resolve_name(path_or_name) {
        let spec = presets::build(name, opts)?;
        return finish(spec);
    }
    if !opts.is_default() {
        return Err(Error::Validation(
            "preset overrides apply only to built-in preset names".into(),
        ));
    }
    let path = Path::new(path_or_name);
    if !path.exists() {
        return Err(Error::Io(format!(
            "model '{path_or_name}' is neither a file nor a known preset"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    load_model_str(&text)
}

/// Parse a model from JSON text and validate it.
pub fn load_model_str(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(text)
        .map_err(|e| Error::Validation(format!("model parse error: {e}")))?;
    finish(spec)
}

fn finish(mut spec: ModelSpec) -> Result<ModelSpec> {
    spec.absorb_between_residuals();
    spec.validate()?;
    crate::compile::dry_run(&spec)?;
    Ok(spec)
}

/// Canonical JSON serialization; `load_model_str(save_model(m))` is
/// structurally equal to `m`.
pub fn save_model(spec: &ModelSpec) -> String {
    serde_json::to_string_pretty(spec).expect("model serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_save_roundtrip_all_presets() {
        for name in presets::PRESET_NAMES {
            let spec = load_model(name).unwrap();
            let text = save_model(&spec);
            let back = load_model_str(&text).unwrap();
            assert_eq!(spec, back, "round-trip mismatch for {name}");
        }
    }

    #[test]
    fn aliases_resolve() {
        let a = load_model("eg1").unwrap();
        let b = load_model("eg1-scalar-ar1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eg1_has_expected_shape_and_transforms() {
        use crate::model::{Entry, Transform};
        let spec = load_model("eg1-scalar-ar1").unwrap();
        assert_eq!(spec.dims.u, 1);
        assert_eq!(spec.dims.v1, 1);
        assert_eq!(spec.dims.v2, 4);
        assert_eq!(spec.dims.lag, 1);
        // (nu, phi, log sigma, log psi) enter via (identity, tanh, exp, exp).
        assert_eq!(spec.between_participant.lambda[0], vec![1.0, 0.0, 0.0, 0.0]);
        match spec.within.b1.entry(1, 0, 0) {
            Entry::Param(p) => assert_eq!(p.transform, Transform::Tanh),
            _ => panic!("phi entry should be parameterized"),
        }
        match &spec.within.sigma1_sd[0] {
            Entry::Param(p) => assert_eq!(p.transform, Transform::Exp),
            _ => panic!(),
        }
        match &spec.within.psi1_sd[0] {
            Entry::Param(p) => assert_eq!(p.transform, Transform::Exp),
            _ => panic!(),
        }
        assert_eq!(spec.n_theta(), 8);
    }

    #[test]
    fn eg4_with_p3_has_lag3() {
        use crate::model::{Entry, Transform};
        let spec =
            load_model_with_overrides("eg4-arp", &PresetOptions { p: Some(3), ..Default::default() })
                .unwrap();
        assert_eq!(spec.dims.lag, 3);
        for l in 1..=3 {
            match spec.within.b1.entry(l, 0, 0) {
                Entry::Param(p) => assert_eq!(p.transform, Transform::Tanh),
                _ => panic!("lag {l} coefficient should be parameterized"),
            }
        }
    }

    #[test]
    fn non_lower_triangular_r0_is_rejected() {
        let mut spec = load_model("eg1").unwrap();
        spec.within.r.lags[0][0] = crate::model::Entry::Fixed(0.5);
        let text = save_model(&spec);
        let err = load_model_str(&text).unwrap_err();
        assert!(err.to_string().contains("not strictly lower triangular"), "{err}");
    }

    #[test]
    fn missing_prior_is_rejected() {
        let mut spec = load_model("eg1").unwrap();
        spec.priors.pop();
        let text = save_model(&spec);
        let err = load_model_str(&text).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }
}
