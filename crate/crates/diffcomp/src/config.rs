//! Flat `key = value` configuration files for composition jobs.
//!
//! Recognized keys (defaults in parentheses):
//!
//! ```text
//! steps                    (20)           integration steps per ODE
//! order                    (2)            solver order, 1..=3
//! tau_a                    (0.4)          attention-injection threshold
//! tau_b                    (0)            background-rectification threshold
//! cfg_scale                (2.5)          guidance scale for prompted runs
//! start_mode               (noise_space)  noise_space | latent_paste
//! inject_values            (false)        also inject composed value rows
//! renormalize_rows         (false)        renormalize composite map rows
//! reverse_cross            (false)        mirrored green cells from softmax(q_r k_m^T)
//! seed                     (0)            job seed (starting noise)
//! prompt.text              (empty)        composition prompt; empty means the
//!                                         exceptional prompt with no guidance
//! prompt.exceptional_token (7788)         common token id of the exceptional prompt
//! prompt.max_length        (77)           exceptional-prompt row count
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{CompositionConfig, StartMode};

/// A parsed config file: composition knobs plus the prompt text.
#[derive(Debug, Clone, Default)]
pub struct ResolvedConfig {
    pub composition: CompositionConfig,
    pub prompt_text: Option<String>,
}

pub fn parse_config_text(text: &str) -> Result<ResolvedConfig> {
    let mut resolved = ResolvedConfig {
        composition: CompositionConfig::default(),
        prompt_text: None,
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        apply_key(&mut resolved, key.trim(), value.trim())
            .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
    }
    resolved.composition.validate()?;
    Ok(resolved)
}

pub fn parse_config_file(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn apply_key(resolved: &mut ResolvedConfig, key: &str, value: &str) -> Result<()> {
    let c = &mut resolved.composition;
    match key {
        "steps" => c.steps = parse_num(key, value)?,
        "order" => c.order = parse_num(key, value)?,
        "tau_a" => c.tau_a = parse_num(key, value)?,
        "tau_b" => c.tau_b = parse_num(key, value)?,
        "cfg_scale" => c.cfg_scale = parse_num(key, value)?,
        "start_mode" => c.start_mode = StartMode::parse(value)?,
        "inject_values" => c.inject_values = parse_bool(key, value)?,
        "renormalize_rows" => c.renormalize_rows = parse_bool(key, value)?,
        "reverse_cross" => c.reverse_cross = parse_bool(key, value)?,
        "seed" => c.seed = parse_num(key, value)?,
        "prompt.text" => {
            let trimmed = value.trim_matches('"');
            resolved.prompt_text = if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_string())
            };
        }
        "prompt.exceptional_token" => c.token_value = parse_num(key, value)?,
        "prompt.max_length" => c.prompt_max_len = parse_num(key, value)?,
        other => return Err(Error::config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Canonical echo of a resolved config, same key set the parser accepts.
pub fn echo_config_text(config: &CompositionConfig, prompt_text: &Option<String>) -> String {
    let mut out = String::new();
    out.push_str(&format!("steps = {}\n", config.steps));
    out.push_str(&format!("order = {}\n", config.order));
    out.push_str(&format!("tau_a = {}\n", config.tau_a));
    out.push_str(&format!("tau_b = {}\n", config.tau_b));
    out.push_str(&format!("cfg_scale = {}\n", config.cfg_scale));
    out.push_str(&format!("start_mode = {}\n", config.start_mode.as_str()));
    out.push_str(&format!("inject_values = {}\n", config.inject_values));
    out.push_str(&format!("renormalize_rows = {}\n", config.renormalize_rows));
    out.push_str(&format!("reverse_cross = {}\n", config.reverse_cross));
    out.push_str(&format!("seed = {}\n", config.seed));
    out.push_str(&format!(
        "prompt.text = \"{}\"\n",
        prompt_text.clone().unwrap_or_default()
    ));
    out.push_str(&format!(
        "prompt.exceptional_token = {}\n",
        config.token_value
    ));
    out.push_str(&format!("prompt.max_length = {}\n", config.prompt_max_len));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = parse_config_text("").unwrap();
        assert_eq!(c.composition.steps, 20);
        assert_eq!(c.composition.order, 2);
        assert_eq!(c.composition.tau_a, 0.4);
        assert_eq!(c.composition.tau_b, 0.0);
        assert_eq!(c.composition.cfg_scale, 2.5);
        assert_eq!(c.composition.token_value, 7788);
        assert_eq!(c.composition.start_mode, StartMode::NoiseSpace);
        assert!(c.prompt_text.is_none());
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "# a comment\nsteps = 10\ntau_a = 0.5\nprompt.text = \"a red fox\"\nstart_mode = latent_paste\ninject_values = true\n";
        let c = parse_config_text(text).unwrap();
        assert_eq!(c.composition.steps, 10);
        assert_eq!(c.composition.tau_a, 0.5);
        assert_eq!(c.prompt_text.as_deref(), Some("a red fox"));
        assert_eq!(c.composition.start_mode, StartMode::LatentPaste);
        assert!(c.composition.inject_values);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_config_text("bogus = 1\n").is_err());
        assert!(parse_config_text("steps = many\n").is_err());
        assert!(parse_config_text("tau_a = 2.0\n").is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn echo_roundtrips_through_parser() {
        let mut cfg = CompositionConfig::default();
        cfg.steps = 12;
        cfg.tau_a = 0.25;
        cfg.inject_values = true;
        let text = echo_config_text(&cfg, &Some("hello world".into()));
        let parsed = parse_config_text(&text).unwrap();
        assert_eq!(parsed.composition.steps, 12);
        assert_eq!(parsed.composition.tau_a, 0.25);
        assert!(parsed.composition.inject_values);
        assert_eq!(parsed.prompt_text.as_deref(), Some("hello world"));
    }
}
