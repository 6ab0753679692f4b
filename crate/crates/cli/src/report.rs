//! `picl report`: one row per completed run found under a directory.

use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::stages::{seed_accuracy, write_csv, Run, Stage, CONFIG_FILE};
use crate::CliError;

pub const REPORT_COLUMNS: [&str; 8] = [
    "run",
    "strategy",
    "k",
    "delta",
    "alpha",
    "retained_fraction",
    "accuracy_mean",
    "accuracy_std",
];

/// Directories under `root` (inclusive) that hold a manifest, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut todo = vec![root.to_path_buf()];
    while let Some(dir) = todo.pop() {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.clone());
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            if entry.file_type().map_err(|e| CliError::io(&entry.path(), e))?.is_dir() {
                todo.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn fmt_f64(x: Option<f64>) -> String {
    match x {
        Some(v) if v == f64::NEG_INFINITY => "-inf".into(),
        Some(v) if v.is_finite() => format!("{v:.4}"),
        _ => String::new(),
    }
}

/// Report row for one run dir, or `None` if it has not reached `filter`.
fn row(root: &Path, dir: &Path) -> Result<Option<Vec<String>>, CliError> {
    let manifest = RunManifest::load(dir)?.expect("dir holds a manifest");
    let Some(filter) = manifest.stages.get(Stage::Filter.name()) else {
        return Ok(None);
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
    let cfg = PipelineConfig::from_toml(&text, &[])?;
    let retained = filter.counts.get("retained_fraction").and_then(serde_json::Value::as_f64);
    let run = Run {
        dir: dir.to_path_buf(),
        hash: cfg.hash(),
        cfg: cfg.clone(),
        manifest,
    };
    let (acc, std) = if run.has(Stage::Eval) {
        let (m, s) = seed_accuracy(&run.load_eval_reports()?);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let name = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
    Ok(Some(vec![
        if name.is_empty() { ".".into() } else { name },
        cfg.retrieval.strategy.as_str().into(),
        cfg.retrieval.k.to_string(),
        fmt_f64(Some(cfg.constructor.delta)),
        fmt_f64(Some(cfg.pretrain.alpha)),
        fmt_f64(retained),
        fmt_f64(acc),
        fmt_f64(std),
    ]))
}

pub fn markdown(rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

/// Write `report.md` and `report.csv` into `root`; returns their paths.
pub fn report(root: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    if !root.is_dir() {
        return Err(CliError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut rows = Vec::new();
    for dir in find_runs(root)? {
        if let Some(r) = row(root, &dir)? {
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(CliError::runtime(format!(
            "no completed runs under {}",
            root.display()
        )));
    }
    let md = root.join("report.md");
    let csv = root.join("report.csv");
    std::fs::write(&md, markdown(&rows)).map_err(|e| CliError::io(&md, e))?;
    write_csv(&csv, &REPORT_COLUMNS, &rows)?;
    Ok((md, csv))
}
