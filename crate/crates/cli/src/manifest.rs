//! Run manifests.
//!
//! Every training-style command writes a manifest into its run directory
//! before the first expensive step, then rewrites it with a terminal status
//! at the end. A crashed or diverged run therefore still leaves an honest
//! record of what was attempted against which data.

use std::fs;
use std::path::Path;

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use mhcn_core::eval::EvalConfig;
use mhcn_core::motifs::ChannelConfig;
use mhcn_core::train::TrainConfig;

use crate::bundle::Bundle;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_name: String,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// "running", "complete", or "failed: <reason>".
    pub status: String,
    pub bundle_dir: String,
    pub dataset_fingerprint: String,
    pub folds: usize,
    pub train: TrainConfig,
    pub channels: ChannelConfig,
    pub eval: EvalConfig,
    /// Grid cell labels, for ablate/sweep runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<String>,
    /// Paths relative to the run directory, filled in on completion.
    pub outputs: Vec<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(
        command: &str,
        run_name: &str,
        bundle: &Bundle,
        train: TrainConfig,
        channels: ChannelConfig,
        eval: EvalConfig,
    ) -> Self {
        Self {
            command: command.to_owned(),
            run_name: run_name.to_owned(),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_at: now(),
            finished_at: None,
            status: "running".to_owned(),
            bundle_dir: bundle.dir.display().to_string(),
            dataset_fingerprint: bundle.fingerprint.clone(),
            folds: bundle.folds.len(),
            train,
            channels,
            eval,
            cells: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<(), Failure> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self, Failure> {
        Self::load_file(&run_dir.join(MANIFEST_FILE))
    }

    pub fn load_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(manifest)
    }

    pub fn finish(&mut self, status: &str, outputs: Vec<String>) {
        self.finished_at = Some(now());
        self.status = status.to_owned();
        self.outputs = outputs;
    }
}
