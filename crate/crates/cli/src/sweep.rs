//! One sub-run per value of a single parameter. Stages upstream of the
//! parameter run once in the parent directory and are copied into each
//! sub-run.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use picl_core::retrieval::Strategy;

use crate::config::PipelineConfig;
use crate::stages::{seed_accuracy, write_csv, Run, Stage};
use crate::CliError;

/// Expand a short parameter name to its config key.
pub fn resolve_param(param: &str) -> Result<String, CliError> {
    let key = match param {
        "delta" => "constructor.delta",
        "alpha" => "pretrain.alpha",
        "strategy" => "retrieval.strategy",
        "k" => "retrieval.k",
        "budget" => "constructor.budget",
        "n_shots" | "shots" => "eval.n_shots",
        other => other,
    };
    if !PipelineConfig::valid_keys().contains(key) {
        return Err(CliError::Config(format!("cannot sweep unknown parameter {param:?}")));
    }
    Ok(key.to_string())
}

/// First stage whose output depends on `key`.
pub fn first_affected(key: &str) -> Stage {
    let section = key.split('.').next().unwrap_or_default();
    match (section, key) {
        ("corpus", _) => Stage::BuildCorpus,
        ("encoder", _) => Stage::TrainEncoder,
        (_, "retrieval.strategy") | ("index", _) => Stage::BuildIndex,
        ("retrieval", _) => Stage::Retrieve,
        (_, "constructor.delta") => Stage::Filter,
        ("constructor", _) => Stage::Construct,
        ("pretrain", _) => Stage::Pretrain,
        _ => Stage::Eval,
    }
}

/// Normalize a value for `key`; strategy aliases map to canonical names.
fn normalize_value(key: &str, raw: &str) -> Result<String, CliError> {
    if key == "retrieval.strategy" {
        let s = Strategy::from_str(raw.trim()).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(format!("\"{}\"", s.as_str()));
    }
    Ok(raw.trim().to_string())
}

fn sub_dir_name(key: &str, value: &str) -> String {
    let v: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{key}={v}")
}

/// Copy completed stages (records and files) from `from` into `to`.
fn copy_stages(from: &Run, to: &mut Run, stages: &[Stage]) -> Result<(), CliError> {
    for s in stages {
        let Some(rec) = from.manifest.stages.get(s.name()) else {
            continue;
        };
        for art in rec.artifacts.values() {
            let src = from.dir.join(&art.path);
            let dst = to.dir.join(&art.path);
            std::fs::copy(&src, &dst).map_err(|e| CliError::io(&src, e))?;
        }
        to.manifest.stages.insert(s.name().to_string(), rec.clone());
    }
    Ok(())
}

/// Run the sweep and write `sweep_<param>.csv` into `run_dir`.
pub fn sweep(run_dir: &Path, base: &PipelineConfig, param: &str, values: &str) -> Result<PathBuf, CliError> {
    let key = resolve_param(param)?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let affected = first_affected(&key);
    let sweep_root = run_dir.join(format!("sweep_{}", param.replace('.', "_")));

    let mut rows = Vec::new();
    let mut parent: Option<Run> = None;
    for raw in values {
        let value = normalize_value(&key, raw)?;
        let cfg = with_override(base, &key, &value)?;
        let upstream: Vec<Stage> = Stage::plan(&cfg).into_iter().filter(|s| *s < affected).collect();
        // Upstream stages do not read the swept key, so the parent builds
        // them under the base config.
        let p = match parent.as_mut() {
            Some(p) => p,
            None => parent.insert(Run::open(run_dir, base.clone())?),
        };
        for s in &upstream {
            if !p.has(*s) {
                p.execute(*s)?;
            }
        }
        let dir = sweep_root.join(sub_dir_name(&key, raw));
        let mut sub = Run::open(&dir, cfg)?;
        sub.manifest.stages.clear();
        copy_stages(p, &mut sub, &upstream)?;
        sub.run_missing()?;
        let retained = sub
            .manifest
            .stages
            .get(Stage::Filter.name())
            .and_then(|r| r.counts.get("retained_fraction"))
            .and_then(serde_json::Value::as_f64);
        let accuracy = if sub.has(Stage::Eval) {
            Some(seed_accuracy(&sub.load_eval_reports()?).0)
        } else {
            None
        };
        let fmt = |x: Option<f64>| x.filter(|v| v.is_finite()).map_or(String::new(), |v| format!("{v:.6}"));
        rows.push(vec![key.clone(), raw.to_string(), fmt(retained), fmt(accuracy)]);
    }
    let out = run_dir.join(format!("sweep_{}.csv", param.replace('.', "_")));
    write_csv(&out, &["param", "value", "retained_fraction", "accuracy"], &rows)?;
    Ok(out)
}

fn with_override(base: &PipelineConfig, key: &str, value: &str) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::from_toml(&base.canonical(), &[format!("{key}={value}")])?;
    // Paths in `base` are already absolute, so no base directory is needed.
    cfg.resolve_paths(Path::new(""));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_resolve_to_config_keys() {
        assert_eq!(resolve_param("delta").unwrap(), "constructor.delta");
        assert_eq!(resolve_param("pretrain.alpha").unwrap(), "pretrain.alpha");
        assert!(matches!(resolve_param("nope"), Err(CliError::Config(_))));
    }

    #[test]
    fn delta_only_reruns_filter_onwards() {
        assert_eq!(first_affected("constructor.delta"), Stage::Filter);
        assert_eq!(first_affected("constructor.budget"), Stage::Construct);
        assert_eq!(first_affected("retrieval.strategy"), Stage::BuildIndex);
        assert_eq!(first_affected("retrieval.k"), Stage::Retrieve);
        assert_eq!(first_affected("pretrain.alpha"), Stage::Pretrain);
    }

    #[test]
    fn strategy_values_are_normalized() {
        assert_eq!(normalize_value("retrieval.strategy", "dense").unwrap(), "\"dense_exact\"");
        assert_eq!(normalize_value("constructor.delta", "-inf").unwrap(), "-inf");
    }

    #[test]
    fn negative_infinity_override_parses() {
        let c = with_override(&PipelineConfig::default(), "constructor.delta", "-inf").unwrap();
        assert_eq!(c.constructor.delta, f64::NEG_INFINITY);
    }
}
