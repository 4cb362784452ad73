//! Writes an [`Outcome`] to its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;
use crate::runner::Outcome;

/// Files are rendered first and written together at the end.
pub fn write_outcome(cfg: &ExperimentConfig, out_dir: &Path, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let formats = &cfg.output.formats;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if formats.iter().any(|f| f == "csv") {
        for (name, body) in &outcome.csv {
            files.push((out_dir.join(name), body.clone()));
        }
    }
    if formats.iter().any(|f| f == "json") {
        let mut text = serde_json::to_string_pretty(&outcome.summary)?;
        text.push('\n');
        files.push((out_dir.join("summary.json"), text));
        let mut timings = Map::new();
        for (k, v) in &outcome.timings {
            timings.insert(k.clone(), json!(v));
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(timings))?;
        text.push('\n');
        files.push((out_dir.join("timings.json"), text));
    }
    let mut written = Vec::new();
    for (path, body) in files {
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
