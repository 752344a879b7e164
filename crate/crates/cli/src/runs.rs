//! Cross-validated training runner shared by train, ablate, and sweep.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;

use mhcn_core::eval::{evaluate, mean_report, EvalConfig, EvalReport};
use mhcn_core::model::{final_embeddings, ChannelOperators};
use mhcn_core::motifs::{build_channels, build_motifs, ChannelConfig};
use mhcn_core::train::{train, TrainConfig, TrainOutcome};

use crate::bundle::Bundle;
use crate::Failure;

pub struct CvOptions {
    /// Store per-fold model checkpoints (train does, grids skip them).
    pub save_checkpoints: bool,
    /// Suppress per-fold progress lines (grids print per-cell lines instead).
    pub quiet: bool,
}

pub fn fold_dir_name(fold_id: usize) -> String {
    format!("fold{fold_id}")
}

/// Train and evaluate every fold of the bundle under `dir`.
///
/// Each fold writes `foldN/history.jsonl` (one JSON record per epoch) and,
/// when requested, `foldN/checkpoint.bin`. The returned report is the
/// unweighted mean across folds.
pub fn run_cv(
    bundle: &Bundle,
    train_config: &TrainConfig,
    channel_config: &ChannelConfig,
    eval_config: &EvalConfig,
    dir: &Path,
    opts: &CvOptions,
) -> Result<EvalReport, Failure> {
    let mut fold_reports = Vec::with_capacity(bundle.folds.len());
    for fold in &bundle.folds {
        let fold_dir = dir.join(fold_dir_name(fold.fold_id));
        fs::create_dir_all(&fold_dir)
            .with_context(|| format!("creating {}", fold_dir.display()))?;

        let motifs = build_motifs(&bundle.dataset.social, &fold.train);
        let channels = build_channels(&motifs, &fold.train, channel_config);
        let empty = channels.empty_channels();
        if !empty.is_empty() && !opts.quiet {
            eprintln!(
                "warning: fold {}: channels with no edges: {}",
                fold.fold_id,
                empty.join(", ")
            );
        }

        let outcome = train(&channels, &fold.train, train_config)?;
        write_history(&fold_dir.join("history.jsonl"), &outcome)?;
        if opts.save_checkpoints {
            outcome.params.save(&fold_dir.join("checkpoint.bin"), train_config.layers)?;
        }

        let ops = ChannelOperators::new(&channels, &fold.train);
        let (user_final, item_final) =
            final_embeddings(&outcome.params, &ops, &train_config.forward_config());
        let report = evaluate(&user_final, &item_final, &fold.train, &fold.test, eval_config)?;
        if !opts.quiet {
            let first = &report.metrics[0];
            println!(
                "fold {}: best epoch {}, ndcg@{} {:.5} over {} users",
                fold.fold_id, outcome.best_epoch, first.k, first.ndcg, report.users_evaluated
            );
        }
        fold_reports.push(report);
    }
    Ok(mean_report(&fold_reports))
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<(), Failure> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for record in &outcome.history {
        let line = serde_json::to_string(record).context("serializing epoch record")?;
        writeln!(w, "{line}").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Write a report as pretty JSON.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(report).context("serializing report")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_report_json(path: &Path) -> Result<EvalReport, Failure> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(report)
}
