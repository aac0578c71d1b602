//! Loading experiment configs from JSON.

use std::path::Path;

use cos2p_core::config::ExperimentConfig;

use crate::error::{CliError, Result};

/// Environment variable that replaces `data.seed`.
pub const SEED_VAR: &str = "COS2P_SEED";

/// Parses and validates a config document; blank input means all defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

/// Applies a seed override given as text, as read from [`SEED_VAR`].
pub fn override_seed(cfg: &mut ExperimentConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        cfg.data.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{} must be an unsigned integer, got {:?}", SEED_VAR, v)))?;
    }
    Ok(())
}

/// [`load_config`] followed by the environment seed override.
pub fn load_with_env(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    let var = std::env::var(SEED_VAR).ok();
    override_seed(&mut cfg, var.as_deref())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config("  \n").unwrap(), ExperimentConfig::default());
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_config(r#"{"federation": {"mu": 0.5, "bogus": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{}", e);
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_config("{\n  \"model\": {\n    \"depth\": x\n  }\n}").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{}", e);
    }

    #[test]
    fn range_violation_names_the_field() {
        let e = parse_config(r#"{"federation": {"mu": 1.5}}"#).unwrap_err();
        assert!(e.to_string().contains("federation.mu"), "{}", e);
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn seed_override() {
        let mut c = ExperimentConfig::default();
        override_seed(&mut c, Some("7")).unwrap();
        assert_eq!(c.data.seed, 7);
        assert!(override_seed(&mut c, Some("seven")).is_err());
        override_seed(&mut c, None).unwrap();
        assert_eq!(c.data.seed, 7);
    }
}
