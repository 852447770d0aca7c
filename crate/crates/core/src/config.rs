//! Flat `key = value` configuration files with `#` comments.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Recognised keys with their defaults, for help output.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("env", "pointmass", "environment: pendulum | pointmass"),
    ("k", "5", "mixture components"),
    ("beta", "1.0", "proximity weight"),
    ("gamma", "0.99", "discount factor in (0, 1)"),
    ("proximity", "euclidean", "euclidean | wasserstein"),
    ("episodes_per_iter", "20", "rollouts per outer iteration"),
    ("outer_iters", "40", "outer iterations"),
    ("inner_prox_iters", "10", "proximal steps per outer iteration"),
    ("seed", "0", "master seed"),
    ("floor", "1e-8", "eigenvalue floor of every SPD component"),
    ("horizon", "env default", "episode length (pendulum 200, pointmass 100)"),
    ("step_size", "auto", "inner step size; auto is 1/(L+beta) with L probed"),
    ("init_variance", "0.5", "initial per-coordinate component variance"),
    ("record_time", "false", "write wall-clock seconds to metrics"),
    ("out", "none", "output directory for metrics.csv and policy.gmm (train falls back to rppo-out)"),
];

/// `(line, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got {content:?}", idx + 1))
        })?;
        out.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a command-line override `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override must be key=value, got {arg:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, auto: &str) -> Result<Option<T>> {
    if value == auto {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Sets one key; unknown keys are an error naming the key.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "env" => cfg.env = value.parse()?,
        "k" => cfg.k = parse(key, value)?,
        "beta" => cfg.beta = parse(key, value)?,
        "gamma" => cfg.gamma = parse(key, value)?,
        "proximity" => cfg.proximity = value.parse()?,
        "episodes_per_iter" => cfg.episodes_per_iter = parse(key, value)?,
        "outer_iters" => cfg.outer_iters = parse(key, value)?,
        "inner_prox_iters" => cfg.inner_prox_iters = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "floor" => cfg.floor = parse(key, value)?,
        "horizon" => cfg.horizon = optional(key, value, "default")?,
        "step_size" => cfg.step_size = optional(key, value, "auto")?,
        "init_variance" => cfg.init_variance = parse(key, value)?,
        "record_time" => cfg.record_time = parse(key, value)?,
        "out" => cfg.out_dir = optional::<PathBuf>(key, value, "none")?,
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Defaults, then the file's pairs, then the overrides, in that order.
pub fn load(text: Option<&str>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = text {
        for (line, k, v) in parse_pairs(text)? {
            apply(&mut cfg, &k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
    }
    for (k, v) in overrides {
        apply(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::surrogate::ProximityKind;

    #[test]
    fn parses_file_with_comments() {
        let text = "# run\nenv = pendulum\nk = 3   # fewer\n\nbeta=2.5\nproximity = wasserstein\nhorizon = 50\n";
        let cfg = load(Some(text), &[]).unwrap();
        assert_eq!(cfg.env, EnvKind::Pendulum);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.beta, 2.5);
        assert_eq!(cfg.proximity, ProximityKind::Wasserstein);
        assert_eq!(cfg.horizon, Some(50));
        assert_eq!(cfg.gamma, 0.99);
    }

    #[test]
    fn overrides_win() {
        let cfg = load(Some("k = 3\n"), &[parse_override("k=4").unwrap()]).unwrap();
        assert_eq!(cfg.k, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = load(Some("betta = 1\n"), &[]).unwrap_err().to_string();
        assert!(err.contains("betta"), "{err}");
        assert!(err.contains("line 1"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(load(Some("k = many\n"), &[]).is_err());
        assert!(load(Some("gamma = 1.5\n"), &[]).is_err());
        assert!(load(Some("just words\n"), &[]).is_err());
        assert!(parse_override("k").is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let samples = [
            ("env", "pendulum"),
            ("proximity", "euclidean"),
            ("horizon", "default"),
            ("step_size", "auto"),
            ("record_time", "true"),
            ("out", "none"),
        ];
        for (key, _, _) in KEYS {
            let value = samples
                .iter()
                .find(|(k, _)| k == key)
                .map_or("1", |(_, v)| v);
            let mut cfg = TrainConfig::default();
            apply(&mut cfg, key, value).unwrap();
        }
    }
}
