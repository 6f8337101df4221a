//! Flat key-value experiment configuration.
//!
//! Files are TOML with one key per line and no tables. Learning keys follow
//! the hyper-parameter names (`target_entropy`, `hidden_actor`,
//! `lambda_critic`, ...), market keys are `n, a0, a, mu, c, xi, k` and the
//! run length is `steps`. Command-line `--set key=value` overrides are
//! applied on top and checked the same way.

use pricelab::agent::AgentHyper;
use pricelab::market::MarketParams;
use pricelab::orchestrator::{Precision, SessionConfig};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{key}'{}", suggestion.as_ref().map(|s| format!(" (did you mean '{s}'?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("config key '{key}': expected {expected}")]
    BadValue { key: String, expected: &'static str },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override '{0}' is not of the form key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "target_entropy",
    "hidden_actor",
    "hidden_critic",
    "layers_actor",
    "layers_critic",
    "batch_size",
    "buffer_size",
    "tau",
    "lambda_actor",
    "lambda_critic",
    "lambda_temperature",
    "lambda_reward",
    "log_std_min",
    "log_std_max",
    "n",
    "a0",
    "a",
    "mu",
    "c",
    "xi",
    "k",
    "steps",
    "checkpoints",
    "window",
    "diag_every",
    "checkpoint_replay",
    "precision",
];

/// Default checkpoint steps; those beyond the run length are dropped and
/// the final step is always included.
pub const DEFAULT_CHECKPOINTS: &[u64] = &[10_000, 20_000, 30_000, 40_000, 50_000];

/// Closest valid key for a misspelt one. Common synonyms (`lr_*`,
/// `learning_rate_*`) map onto the step-size names first.
pub fn suggest(key: &str) -> Option<String> {
    for (from, to) in [("learning_rate_", "lambda_"), ("lr_", "lambda_"), ("alpha_", "lambda_")] {
        if let Some(rest) = key.strip_prefix(from) {
            let candidate = format!("{to}{rest}");
            if KEYS.contains(&candidate.as_str()) {
                return Some(candidate);
            }
        }
    }
    KEYS.iter()
        .map(|k| (strsim::jaro_winkler(key, k), *k))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

fn float(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            expected: "a number",
        }),
    }
}

fn uint(key: &str, v: &Value) -> Result<u64, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            expected: "a non-negative integer",
        }),
    }
}

/// A number applied to every firm, or one number per firm.
fn per_firm(key: &str, v: &Value) -> Result<Vec<f64>, ConfigError> {
    match v {
        Value::Array(items) => items.iter().map(|x| float(key, x)).collect(),
        other => Ok(vec![float(key, other)?]),
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.into()))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key, parsed))
}

/// Builds a session config from file text plus overrides (seed left at 0).
pub fn build(text: &str, overrides: &[(String, Value)]) -> Result<SessionConfig, ConfigError> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    for key in table.keys() {
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                suggestion: suggest(key),
            });
        }
    }

    let mut hyper = AgentHyper::default();
    let mut cfg = SessionConfig::default();
    let mut n = 2usize;
    let base = MarketParams::<f64>::duopoly();
    let (mut a0, mut mu, mut xi, mut k) = (base.a0, base.mu, base.xi, base.k);
    let (mut a, mut c) = (vec![base.a[0]], vec![base.c[0]]);
    let mut checkpoints: Option<Vec<u64>> = None;
    for (key, v) in &table {
        let key = key.as_str();
        match key {
            "target_entropy" => hyper.target_entropy = float(key, v)?,
            "hidden_actor" => hyper.hidden_actor = uint(key, v)? as usize,
            "hidden_critic" => hyper.hidden_critic = uint(key, v)? as usize,
            "layers_actor" => hyper.layers_actor = uint(key, v)? as usize,
            "layers_critic" => hyper.layers_critic = uint(key, v)? as usize,
            "batch_size" => hyper.batch_size = uint(key, v)? as usize,
            "buffer_size" => hyper.buffer_size = uint(key, v)? as usize,
            "tau" => hyper.tau = float(key, v)?,
            "lambda_actor" => hyper.lambda_actor = float(key, v)?,
            "lambda_critic" => hyper.lambda_critic = float(key, v)?,
            "lambda_temperature" => hyper.lambda_temperature = float(key, v)?,
            "lambda_reward" => hyper.lambda_reward = float(key, v)?,
            "log_std_min" => hyper.log_std_min = float(key, v)?,
            "log_std_max" => hyper.log_std_max = float(key, v)?,
            "n" => n = uint(key, v)? as usize,
            "a0" => a0 = float(key, v)?,
            "a" => a = per_firm(key, v)?,
            "mu" => mu = float(key, v)?,
            "c" => c = per_firm(key, v)?,
            "xi" => xi = float(key, v)?,
            "k" => k = uint(key, v)? as usize,
            "steps" => cfg.total_steps = uint(key, v)?,
            "checkpoints" => {
                let Value::Array(items) = v else {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        expected: "an array of steps",
                    });
                };
                checkpoints = Some(items.iter().map(|x| uint(key, x)).collect::<Result<_, _>>()?);
            }
            "window" => cfg.window = uint(key, v)? as usize,
            "diag_every" => cfg.diag_every = uint(key, v)?,
            "checkpoint_replay" => {
                cfg.checkpoint_replay = v.as_bool().ok_or(ConfigError::BadValue {
                    key: key.into(),
                    expected: "true or false",
                })?
            }
            "precision" => {
                cfg.precision = match v.as_str() {
                    Some("f32") => Precision::F32,
                    Some("f64") => Precision::F64,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            expected: "\"f32\" or \"f64\"",
                        })
                    }
                }
            }
            _ => unreachable!("keys validated above"),
        }
    }
    let widen = |key: &str, v: Vec<f64>| -> Result<Vec<f64>, ConfigError> {
        match v.len() {
            1 => Ok(vec![v[0]; n]),
            len if len == n => Ok(v),
            _ => Err(ConfigError::BadValue {
                key: key.into(),
                expected: "one value or one per firm",
            }),
        }
    };
    cfg.market = MarketParams {
        n,
        a0,
        a: widen("a", a)?,
        mu,
        c: widen("c", c)?,
        xi,
        k,
    };
    cfg.hyper = hyper;
    cfg.checkpoint_steps = match checkpoints {
        Some(list) => list,
        None => default_checkpoints(cfg.total_steps),
    };
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn default_checkpoints(steps: u64) -> Vec<u64> {
    let mut list: Vec<u64> = DEFAULT_CHECKPOINTS.iter().copied().filter(|&s| s < steps).collect();
    list.push(steps);
    list
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_experiment() {
        let cfg = build("", &[]).unwrap();
        let want = SessionConfig {
            checkpoint_steps: DEFAULT_CHECKPOINTS.to_vec(),
            ..SessionConfig::default()
        };
        assert_eq!(cfg, want);
    }

    #[test]
    fn keys_map_onto_fields() {
        let text =
            "lambda_actor = 0.01\nhidden_actor = 64\nn = 3\nc = [1.0, 1.1, 1.2]\nsteps = 2000\nprecision = \"f64\"\n";
        let cfg = build(text, &[]).unwrap();
        assert_eq!(cfg.hyper.lambda_actor, 0.01);
        assert_eq!(cfg.hyper.hidden_actor, 64);
        assert_eq!(cfg.market.n, 3);
        assert_eq!(cfg.market.a, vec![2.0; 3]);
        assert_eq!(cfg.market.c, vec![1.0, 1.1, 1.2]);
        assert_eq!(cfg.checkpoint_steps, vec![2000]);
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn unknown_key_names_the_valid_one() {
        let err = build("lr_actor = 0.1", &[]).unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "lr_actor".into(),
                suggestion: Some("lambda_actor".into())
            }
        );
        assert!(err.to_string().contains("lambda_actor"));
        assert_eq!(suggest("hiden_critic").as_deref(), Some("hidden_critic"));
    }

    #[test]
    fn overrides_win_and_are_checked() {
        let o = parse_override("tau=0.5").unwrap();
        let cfg = build("tau = 0.1", &[o]).unwrap();
        assert_eq!(cfg.hyper.tau, 0.5);
        assert!(matches!(
            build("", &[parse_override("bogus=1").unwrap()]),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("precision=f32").unwrap().1, Value::String("f32".into()));
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(matches!(build("tau = \"x\"", &[]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(
            build("c = [1.0, 2.0, 3.0]", &[]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(build("steps = 10", &[]), Err(ConfigError::Invalid(_))));
        assert!(matches!(build("tau = [", &[]), Err(ConfigError::Parse(_))));
    }
}
