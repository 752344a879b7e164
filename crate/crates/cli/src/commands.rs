//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use mhcn_core::eval::{mean_report, EvalReport};
use mhcn_core::model::{final_embeddings, ChannelMask, ChannelOperators, ModelParams};
use mhcn_core::motifs::{build_channels, build_motifs, motif_instance_counts, ChannelConfig};
use mhcn_core::ssl::SslVariant;
use mhcn_core::train::TrainConfig;

use crate::bundle::{self, Bundle};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::plot;
use crate::runs::{self, fold_dir_name, CvOptions};
use crate::table::{print_text_table, MetricTable};
use crate::{
    AblateArgs, CensusArgs, EvaluateArgs, Failure, PrepareArgs, ReportArgs, SweepArgs, SweepAxis,
    TrainArgs,
};

pub fn prepare(out_root: &Path, args: &PrepareArgs) -> Result<(), Failure> {
    let (dir, summary, fingerprint) = bundle::prepare(
        out_root,
        &args.name,
        &args.ratings,
        &args.trust,
        args.rating_threshold,
        args.folds,
        args.seed,
    )?;
    println!("bundle written to {}", dir.display());
    println!(
        "users {}  items {}  interactions {}  relations {}  density {:.6}",
        summary.users, summary.items, summary.interactions, summary.relations, summary.density
    );
    println!("folds {}  split seed {}", args.folds, args.seed);
    println!("fingerprint {fingerprint}");
    Ok(())
}

#[derive(Serialize)]
struct CensusReport {
    /// Distinct motif instances, index k-1 for motif k.
    instances: [u64; 10],
    /// Nonzero entries of each motif adjacency matrix.
    adjacency_nonzeros: [usize; 10],
    /// Total closed social triangles (motifs 1 through 7).
    social_triangles: u64,
    social_channel_nonzeros: usize,
    joint_channel_nonzeros: usize,
    purchase_channel_nonzeros: usize,
    empty_channels: Vec<String>,
}

pub fn motif_census(args: &CensusArgs) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&args.popularity_cutoff) {
        return Err(Failure::usage(anyhow!("--popularity-cutoff must lie in [0, 1)")));
    }
    if !(args.entry_threshold >= 0.0 && args.entry_threshold.is_finite()) {
        return Err(Failure::usage(anyhow!("--entry-threshold must be nonnegative and finite")));
    }
    let bundle = bundle::load(&args.bundle)?;
    let data = &bundle.dataset;
    let config = ChannelConfig {
        popular_item_fraction: args.popularity_cutoff,
        entry_threshold: args.entry_threshold,
    };

    let motifs = build_motifs(&data.social, &data.interactions);
    let instances = motif_instance_counts(&motifs);
    let channels = build_channels(&motifs, &data.interactions, &config);

    let mut adjacency_nonzeros = [0usize; 10];
    for k in 1..=10 {
        adjacency_nonzeros[k - 1] = motifs.adjacency(k).nnz();
    }
    let census = CensusReport {
        instances,
        adjacency_nonzeros,
        social_triangles: instances[..7].iter().sum(),
        social_channel_nonzeros: channels.social.nnz(),
        joint_channel_nonzeros: channels.joint.nnz(),
        purchase_channel_nonzeros: channels.purchase.nnz(),
        empty_channels: channels.empty_channels().iter().map(|s| s.to_string()).collect(),
    };

    let headers: Vec<String> =
        ["motif", "instances", "nonzeros"].into_iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = (1..=10)
        .map(|k| {
            vec![
                format!("M{k}"),
                census.instances[k - 1].to_string(),
                census.adjacency_nonzeros[k - 1].to_string(),
            ]
        })
        .collect();
    print_text_table(&headers, &rows);
    println!("social triangles (motifs 1-7): {}", census.social_triangles);
    println!();

    let headers: Vec<String> = ["channel", "nonzeros"].into_iter().map(String::from).collect();
    let rows = vec![
        vec!["social".to_owned(), census.social_channel_nonzeros.to_string()],
        vec!["joint".to_owned(), census.joint_channel_nonzeros.to_string()],
        vec!["purchase".to_owned(), census.purchase_channel_nonzeros.to_string()],
    ];
    print_text_table(&headers, &rows);
    if !census.empty_channels.is_empty() {
        println!("channels with no edges: {}", census.empty_channels.join(", "));
    }

    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&census).context("serializing census")?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        println!("census written to {}", path.display());
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["name", "instances", "nonzeros"]).context("writing CSV header")?;
        for k in 1..=10 {
            w.write_record([
                format!("M{k}"),
                census.instances[k - 1].to_string(),
                census.adjacency_nonzeros[k - 1].to_string(),
            ])
            .context("writing CSV row")?;
        }
        for (name, nnz) in [
            ("social_channel", census.social_channel_nonzeros),
            ("joint_channel", census.joint_channel_nonzeros),
            ("purchase_channel", census.purchase_channel_nonzeros),
        ] {
            w.write_record([name.to_owned(), String::new(), nnz.to_string()])
                .context("writing CSV row")?;
        }
        w.flush().with_context(|| format!("flushing {}", path.display()))?;
        println!("census table written to {}", path.display());
    }
    Ok(())
}

/// Create (or reuse with --force) a run directory under the output root.
fn create_run_dir(out_root: &Path, name: &str, force: bool) -> Result<PathBuf, Failure> {
    let dir = out_root.join(name);
    if dir.join(MANIFEST_FILE).exists() && !force {
        return Err(Failure::usage(anyhow!(
            "run directory {} already exists; pass --force to overwrite or pick another --name",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Everything under the run directory except the manifest itself, as sorted
/// relative paths.
fn list_outputs(dir: &Path) -> Result<Vec<String>, Failure> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("child of base");
                let rel = rel.to_string_lossy().into_owned();
                if rel != MANIFEST_FILE {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).with_context(|| format!("listing {}", dir.display()))?;
    out.sort();
    Ok(out)
}

/// Run the closure, then stamp the manifest complete or failed accordingly.
/// The manifest has already been written once before the work started, so a
/// hard crash still leaves a "running" record behind.
fn with_manifest<T>(
    manifest: &mut RunManifest,
    dir: &Path,
    work: impl FnOnce(&mut RunManifest) -> Result<T, Failure>,
) -> Result<T, Failure> {
    manifest.write(dir)?;
    match work(manifest) {
        Ok(value) => {
            manifest.finish("complete", list_outputs(dir)?);
            manifest.write(dir)?;
            Ok(value)
        }
        Err(failure) => {
            let status = format!("failed: {:#}", failure.err);
            manifest.finish(&status, list_outputs(dir).unwrap_or_default());
            let _ = manifest.write(dir);
            Err(failure)
        }
    }
}

pub fn train(out_root: &Path, args: &TrainArgs) -> Result<(), Failure> {
    let bundle = bundle::load(&args.bundle)?;
    let (train_config, channel_config, eval_config) = match &args.from_manifest {
        Some(path) => {
            if args.model.any_explicit() {
                return Err(Failure::usage(anyhow!(
                    "--from-manifest replays a recorded configuration; \
                     hyperparameter flags and --config cannot be combined with it"
                )));
            }
            let source = RunManifest::load_file(path)?;
            if source.dataset_fingerprint != bundle.fingerprint {
                return Err(Failure::data(anyhow!(
                    "manifest {} records dataset fingerprint {}, bundle {} has {}",
                    path.display(),
                    source.dataset_fingerprint,
                    args.bundle.display(),
                    bundle.fingerprint
                )));
            }
            crate::validate_config(&source.train, &source.channels)?;
            (source.train, source.channels, source.eval)
        }
        None => {
            let resolved = args.model.resolve()?;
            (resolved.train, resolved.channels, args.eval.eval_config(false))
        }
    };
    let name =
        args.name.clone().unwrap_or_else(|| format!("train-seed{}", train_config.seed));
    let dir = create_run_dir(out_root, &name, args.force)?;
    println!("run directory: {}", dir.display());

    let mut manifest = RunManifest::new(
        "train",
        &name,
        &bundle,
        train_config.clone(),
        channel_config,
        eval_config.clone(),
    );
    let report = with_manifest(&mut manifest, &dir, |_| {
        let opts = CvOptions { save_checkpoints: true, quiet: false };
        let report =
            runs::run_cv(&bundle, &train_config, &channel_config, &eval_config, &dir, &opts)?;
        runs::write_report_json(&dir.join("report.json"), &report)?;
        Ok(report)
    })?;

    let table = MetricTable::from_reports(&[(name, &report)]);
    table.write_csv(&dir.join("report.csv"))?;
    table.print();
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let bundle = bundle::load(&args.bundle)?;
    let manifest = RunManifest::load(&args.run)?;
    if manifest.dataset_fingerprint != bundle.fingerprint {
        return Err(Failure::data(anyhow!(
            "run {} was trained on dataset fingerprint {} but bundle {} has {}",
            args.run.display(),
            manifest.dataset_fingerprint,
            args.bundle.display(),
            bundle.fingerprint
        )));
    }
    if manifest.folds != bundle.folds.len() {
        return Err(Failure::data(anyhow!(
            "run expects {} folds, bundle has {}",
            manifest.folds,
            bundle.folds.len()
        )));
    }

    let eval_config = args.eval.eval_config(args.include_train_items);
    let forward = manifest.train.forward_config();
    let mut fold_reports = Vec::with_capacity(bundle.folds.len());
    for fold in &bundle.folds {
        let ckpt = args.run.join(fold_dir_name(fold.fold_id)).join("checkpoint.bin");
        let (params, layers) = ModelParams::load(&ckpt)?;
        if layers != manifest.train.layers {
            return Err(Failure::data(anyhow!(
                "checkpoint {} stores {} layers, manifest says {}",
                ckpt.display(),
                layers,
                manifest.train.layers
            )));
        }
        if params.num_users() != bundle.dataset.num_users()
            || params.num_items() != bundle.dataset.num_items()
        {
            return Err(Failure::data(anyhow!(
                "checkpoint {} is shaped {}x{}, bundle has {} users and {} items",
                ckpt.display(),
                params.num_users(),
                params.num_items(),
                bundle.dataset.num_users(),
                bundle.dataset.num_items()
            )));
        }

        let motifs = build_motifs(&bundle.dataset.social, &fold.train);
        let channels = build_channels(&motifs, &fold.train, &manifest.channels);
        let ops = ChannelOperators::new(&channels, &fold.train);
        let (user_final, item_final) = final_embeddings(&params, &ops, &forward);
        let report = mhcn_core::eval::evaluate(
            &user_final,
            &item_final,
            &fold.train,
            &fold.test,
            &eval_config,
        )?;
        let first = &report.metrics[0];
        println!(
            "fold {}: ndcg@{} {:.5} over {} users",
            fold.fold_id, first.k, first.ndcg, report.users_evaluated
        );
        fold_reports.push(report);
    }

    let report = mean_report(&fold_reports);
    runs::write_report_json(&args.run.join("evaluation.json"), &report)?;
    let table = MetricTable::from_reports(&[(manifest.run_name.clone(), &report)]);
    table.write_csv(&args.run.join("evaluation.csv"))?;
    table.print();
    Ok(())
}

fn mask_cells() -> [(&'static str, ChannelMask); 4] {
    [
        ("complete", ChannelMask { social: true, joint: true, purchase: true }),
        ("no-social", ChannelMask { social: false, joint: true, purchase: true }),
        ("no-joint", ChannelMask { social: true, joint: false, purchase: true }),
        ("no-purchase", ChannelMask { social: true, joint: true, purchase: false }),
    ]
}

fn task_cells() -> [(&'static str, Option<SslVariant>); 5] {
    [
        ("disabled", None),
        ("local_only", Some(SslVariant::LocalOnly)),
        ("global_only", Some(SslVariant::GlobalOnly)),
        ("hierarchical", Some(SslVariant::Hierarchical)),
        ("dgi_style", Some(SslVariant::DgiStyle)),
    ]
}

struct GridCell {
    label: String,
    config: TrainConfig,
}

/// The channel-removal by auxiliary-task grid, optionally filtered to the
/// requested labels.
fn ablation_grid(base: &TrainConfig, only: Option<&str>) -> Result<Vec<GridCell>, Failure> {
    let mut cells = Vec::new();
    for (mask_label, mask) in mask_cells() {
        for (task_label, task) in task_cells() {
            let mut config = base.clone();
            config.channel_mask = mask;
            match task {
                None => config.ssl_beta = 0.0,
                Some(variant) => config.ssl_variant = variant,
            }
            cells.push(GridCell { label: format!("{mask_label}-{task_label}"), config });
        }
    }
    let Some(only) = only else { return Ok(cells) };

    let mut picked = Vec::new();
    for label in only.split(',').map(str::trim) {
        match cells.iter().position(|c| c.label == label) {
            Some(idx) => picked.push(cells.swap_remove(idx)),
            None => {
                let mut valid = Vec::new();
                for (mask_label, _) in mask_cells() {
                    for (task_label, _) in task_cells() {
                        valid.push(format!("{mask_label}-{task_label}"));
                    }
                }
                valid.sort();
                return Err(Failure::usage(anyhow!(
                    "unknown ablation cell {label:?}; valid cells: {}",
                    valid.join(", ")
                )));
            }
        }
    }
    Ok(picked)
}

/// Train a list of grid cells under `dir/cells/<label>` and assemble the
/// combined table. Shared by ablate and sweep.
fn run_grid(
    bundle: &Bundle,
    cells: &[GridCell],
    channel_config: &ChannelConfig,
    eval_config: &mhcn_core::eval::EvalConfig,
    dir: &Path,
) -> Result<Vec<(String, EvalReport)>, Failure> {
    let opts = CvOptions { save_checkpoints: false, quiet: true };
    let mut reports = Vec::with_capacity(cells.len());
    for cell in cells {
        let cell_dir = dir.join("cells").join(&cell.label);
        fs::create_dir_all(&cell_dir)
            .with_context(|| format!("creating {}", cell_dir.display()))?;
        let report =
            runs::run_cv(bundle, &cell.config, channel_config, eval_config, &cell_dir, &opts)?;
        runs::write_report_json(&cell_dir.join("report.json"), &report)?;
        let first = &report.mean[0];
        println!("cell {}: ndcg@{} {:.5}", cell.label, first.k, first.ndcg);
        reports.push((cell.label.clone(), report));
    }
    Ok(reports)
}

pub fn ablate(out_root: &Path, args: &AblateArgs) -> Result<(), Failure> {
    let resolved = args.model.resolve()?;
    let (base, channel_config) = (resolved.train, resolved.channels);
    if base.ssl_beta == 0.0 {
        return Err(Failure::usage(anyhow!(
            "beta must be positive for ablate; the disabled cells zero it themselves"
        )));
    }
    let bundle = bundle::load(&args.bundle)?;
    let eval_config = args.eval.eval_config(false);
    let cells = ablation_grid(&base, args.cells.as_deref())?;
    let name = args.name.clone().unwrap_or_else(|| format!("ablate-seed{}", base.seed));
    let dir = create_run_dir(out_root, &name, args.force)?;
    println!("run directory: {}", dir.display());

    let mut manifest = RunManifest::new(
        "ablate",
        &name,
        &bundle,
        base,
        channel_config,
        eval_config.clone(),
    );
    manifest.cells = cells.iter().map(|c| c.label.clone()).collect();
    let reports = with_manifest(&mut manifest, &dir, |_| {
        run_grid(&bundle, &cells, &channel_config, &eval_config, &dir)
    })?;

    let labeled: Vec<(String, &EvalReport)> =
        reports.iter().map(|(label, report)| (label.clone(), report)).collect();
    let table = MetricTable::from_reports(&labeled);
    table.write_csv(&dir.join("ablation.csv"))?;
    table.print();

    let k0 = eval_config.k_list[0];
    let labels: Vec<String> = reports.iter().map(|(label, _)| label.clone()).collect();
    let values: Vec<f64> = reports.iter().map(|(_, r)| r.mean[0].ndcg).collect();
    plot::bar_chart(
        &dir.join("ablation.svg"),
        "Channel and auxiliary-task ablation",
        &format!("ndcg@{k0}"),
        &labels,
        &values,
    )?;
    Ok(())
}

pub fn sweep(out_root: &Path, args: &SweepArgs) -> Result<(), Failure> {
    let bundle = bundle::load(&args.bundle)?;
    let resolved = args.model.resolve()?;
    let (base, channel_config) = (resolved.train, resolved.channels);
    let eval_config = args.eval.eval_config(false);

    let values: Vec<f64> = match &args.values {
        Some(text) => {
            let mut parsed = Vec::new();
            for token in text.split(',').map(str::trim) {
                let value: f64 = token
                    .parse()
                    .map_err(|_| Failure::usage(anyhow!("bad sweep value {token:?}")))?;
                parsed.push(value);
            }
            parsed
        }
        None => match args.parameter {
            SweepAxis::Beta => vec![0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5],
            SweepAxis::Layers => vec![1.0, 2.0, 3.0, 4.0, 5.0],
        },
    };
    if values.is_empty() {
        return Err(Failure::usage(anyhow!("--values must list at least one value")));
    }

    let mut cells = Vec::with_capacity(values.len());
    let mut value_labels = Vec::with_capacity(values.len());
    for &value in &values {
        let mut config = base.clone();
        let value_label = match args.parameter {
            SweepAxis::Beta => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Failure::usage(anyhow!(
                        "beta values must be nonnegative and finite, got {value}"
                    )));
                }
                config.ssl_beta = value;
                format!("{value}")
            }
            SweepAxis::Layers => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Failure::usage(anyhow!(
                        "layer counts must be positive integers, got {value}"
                    )));
                }
                config.layers = value as usize;
                format!("{}", value as usize)
            }
        };
        value_labels.push(value_label.clone());
        cells.push(GridCell { label: format!("{}-{value_label}", args.parameter.name()), config });
    }

    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("sweep-{}-seed{}", args.parameter.name(), base.seed));
    let dir = create_run_dir(out_root, &name, args.force)?;
    println!("run directory: {}", dir.display());

    let mut manifest = RunManifest::new(
        "sweep",
        &name,
        &bundle,
        base,
        channel_config,
        eval_config.clone(),
    );
    manifest.cells = cells.iter().map(|c| c.label.clone()).collect();
    let reports = with_manifest(&mut manifest, &dir, |_| {
        run_grid(&bundle, &cells, &channel_config, &eval_config, &dir)
    })?;

    let labeled: Vec<(String, &EvalReport)> =
        reports.iter().map(|(label, report)| (label.clone(), report)).collect();
    let table = MetricTable::from_reports(&labeled);
    table.write_csv(&dir.join("sweep.csv"))?;
    table.print();

    let k0 = eval_config.k_list[0];
    let series = vec![
        (format!("precision@{k0}"), reports.iter().map(|(_, r)| r.mean[0].precision).collect()),
        (format!("recall@{k0}"), reports.iter().map(|(_, r)| r.mean[0].recall).collect()),
        (format!("ndcg@{k0}"), reports.iter().map(|(_, r)| r.mean[0].ndcg).collect()),
    ];
    plot::line_chart(
        &dir.join("sweep.svg"),
        &format!("Sweep over {}", args.parameter.name()),
        "metric value",
        &value_labels,
        &series,
    )?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), Failure> {
    struct Row {
        label: String,
        command: String,
        status: String,
        report: Option<EvalReport>,
    }

    let mut entries = Vec::new();
    for run_dir in &args.runs {
        let manifest = RunManifest::load(run_dir)?;
        let main_report = ["evaluation.json", "report.json"]
            .iter()
            .map(|name| run_dir.join(name))
            .find(|p| p.exists());
        let report = match main_report {
            Some(path) => Some(runs::load_report_json(&path)?),
            None => None,
        };
        entries.push(Row {
            label: manifest.run_name.clone(),
            command: manifest.command.clone(),
            status: manifest.status.clone(),
            report,
        });
        for cell in &manifest.cells {
            let path = run_dir.join("cells").join(cell).join("report.json");
            let report = if path.exists() { Some(runs::load_report_json(&path)?) } else { None };
            entries.push(Row {
                label: format!("{}/{}", manifest.run_name, cell),
                command: manifest.command.clone(),
                status: manifest.status.clone(),
                report,
            });
        }
    }

    let headers: Vec<String> = ["run", "command", "status", "k", "precision", "recall", "ndcg"]
        .into_iter()
        .map(String::from)
        .collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for entry in &entries {
        match &entry.report {
            Some(report) => {
                for row in &report.mean {
                    rows.push(vec![
                        entry.label.clone(),
                        entry.command.clone(),
                        entry.status.clone(),
                        row.k.to_string(),
                        format!("{:.5}", row.precision),
                        format!("{:.5}", row.recall),
                        format!("{:.5}", row.ndcg),
                    ]);
                    csv_rows.push(vec![
                        entry.label.clone(),
                        entry.command.clone(),
                        entry.status.clone(),
                        row.k.to_string(),
                        row.precision.to_string(),
                        row.recall.to_string(),
                        row.ndcg.to_string(),
                    ]);
                }
            }
            None => {
                let blank = vec![
                    entry.label.clone(),
                    entry.command.clone(),
                    entry.status.clone(),
                    "-".to_owned(),
                    "-".to_owned(),
                    "-".to_owned(),
                    "-".to_owned(),
                ];
                rows.push(blank.clone());
                csv_rows.push(blank);
            }
        }
    }
    print_text_table(&headers, &rows);

    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&headers).context("writing CSV header")?;
        for row in &csv_rows {
            w.write_record(row).context("writing CSV row")?;
        }
        w.flush().with_context(|| format!("flushing {}", path.display()))?;
        println!("combined table written to {}", path.display());
    }
    Ok(())
}
