//! `mhcn` command-line interface.
//!
//! Subcommands cover the full experiment cycle: `prepare` turns raw TSV
//! files into a reusable bundle, `motif-census` audits the bundle's motif
//! structure, `train` and `evaluate` run the cross-validated protocol,
//! `ablate` and `sweep` drive experiment grids, and `report` collects
//! finished runs into a single table.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 training
//! divergence.

mod bundle;
mod commands;
mod config;
mod manifest;
mod plot;
mod runs;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mhcn_core::data::DataError;
use mhcn_core::eval::{EvalConfig, EvalError};
use mhcn_core::model::{ChannelMask, ModelError};
use mhcn_core::motifs::ChannelConfig;
use mhcn_core::ssl::SslVariant;
use mhcn_core::train::{TrainConfig, TrainError};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// An error tagged with the process exit code it should produce.
pub struct Failure {
    pub code: u8,
    pub err: anyhow::Error,
}

impl Failure {
    pub fn usage(err: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, err: err.into() }
    }

    pub fn data(err: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_DATA, err: err.into() }
    }

    pub fn diverged(err: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_DIVERGED, err: err.into() }
    }
}

/// Anything context-wrapped with anyhow is a data problem by default;
/// usage and divergence failures are constructed explicitly.
impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure::data(err)
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::data(err)
    }
}

impl From<DataError> for Failure {
    fn from(err: DataError) -> Self {
        Failure::data(err)
    }
}

impl From<ModelError> for Failure {
    fn from(err: ModelError) -> Self {
        Failure::data(err)
    }
}

impl From<EvalError> for Failure {
    fn from(err: EvalError) -> Self {
        Failure::data(err)
    }
}

impl From<TrainError> for Failure {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Diverged { .. } => Failure::diverged(err),
            TrainError::EmptyTraining => Failure::data(err),
        }
    }
}

#[derive(Parser)]
#[command(name = "mhcn", version, about = "Motif-channel recommender experiment driver")]
struct Cli {
    /// Root directory for bundles and run outputs.
    /// Defaults to $MHCN_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw TSV files, split folds, and write a reusable bundle.
    Prepare(PrepareArgs),
    /// Count motif instances and channel edges in a prepared bundle.
    MotifCensus(CensusArgs),
    /// Train across folds and evaluate the resulting embeddings.
    Train(TrainArgs),
    /// Re-evaluate stored checkpoints, possibly at different cutoffs.
    Evaluate(EvaluateArgs),
    /// Train the channel-removal by auxiliary-task grid.
    Ablate(AblateArgs),
    /// Train along one hyperparameter axis.
    Sweep(SweepArgs),
    /// Summarize finished runs into one table.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Interaction TSV: user<TAB>item, with an optional weight column.
    #[arg(long)]
    pub ratings: PathBuf,
    /// Directed social TSV: user<TAB>user.
    #[arg(long)]
    pub trust: PathBuf,
    /// Drop interactions whose weight is below this before binarizing.
    #[arg(long)]
    pub rating_threshold: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed for the per-user fold assignment.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Bundle directory name under the output root.
    #[arg(long, default_value = "bundle")]
    pub name: String,
}

#[derive(Args)]
pub struct CensusArgs {
    /// Prepared bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Fraction of most-popular items excluded from the purchase channel.
    #[arg(long, default_value_t = 0.01)]
    pub popularity_cutoff: f64,
    /// Minimum surviving co-purchase count in the purchase channel.
    #[arg(long, default_value_t = 5.0)]
    pub entry_threshold: f64,
    /// Also write the census as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the census table as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Hyperparameters shared by every training-style subcommand.
///
/// Each value resolves as: explicit flag, then config-file key, then the
/// built-in default. The config file holds `key = value` lines (`#` for
/// comments) addressing every field below by flag name or struct name
/// (e.g. `d` or `embedding_dim`).
#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Plain-text key-value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Embedding dimension (default 50).
    #[arg(long)]
    pub d: Option<usize>,
    /// Propagation depth per channel (default 2).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Auxiliary task weight; 0 disables the task entirely (default 0.01).
    #[arg(long)]
    pub beta: Option<f64>,
    /// L2 penalty weight (default 0.001).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ranking pairs per training step (default 2000).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate (default 0.001).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs (default 100).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Base seed for init, shuffling, sampling, and corruption (default 1).
    #[arg(long)]
    pub seed: Option<u64>,
    /// One of: hierarchical, local_only, global_only, dgi_style.
    #[arg(long, value_parser = parse_variant)]
    pub ssl_variant: Option<SslVariant>,
    /// Comma-separated channel subset, e.g. "s,j,p" or "social,joint".
    #[arg(long, value_parser = parse_channels)]
    pub channels: Option<ChannelMask>,
    /// Fraction of most-popular items excluded from the purchase channel
    /// (default 0.01).
    #[arg(long)]
    pub popularity_cutoff: Option<f64>,
    /// Minimum surviving co-purchase count in the purchase channel
    /// (default 5).
    #[arg(long)]
    pub entry_threshold: Option<f64>,
    /// Training fraction held out for epoch selection; 0 keeps the last
    /// epoch (default 0.05).
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Half-width of the uniform parameter init (default 0.05).
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Recompute channel attention at every propagation layer.
    #[arg(long)]
    pub per_layer_attention: bool,
    /// Penalize every parameter tensor instead of batch embedding rows.
    #[arg(long)]
    pub full_table_l2: bool,
}

/// Fully resolved training-side configuration.
pub struct Resolved {
    pub train: TrainConfig,
    pub channels: ChannelConfig,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl ModelArgs {
    /// Merge flags over the config file over defaults, then validate.
    pub fn resolve(&self) -> Result<Resolved, Failure> {
        let mut file = match &self.config {
            Some(path) => config::ConfigFile::load(path)?,
            None => config::ConfigFile::empty(),
        };
        let channels = match (self.channels, file.take_raw(&["channels", "channel_mask"])) {
            (Some(mask), _) => mask,
            (None, Some(raw)) => parse_channels(&raw)
                .map_err(|e| Failure::usage(anyhow::anyhow!("config channels: {e}")))?,
            (None, None) => ChannelMask::default(),
        };
        let td = TrainConfig::default();
        let cd = ChannelConfig::default();
        let train = TrainConfig {
            embedding_dim: pick(self.d, file.take(&["d", "embedding_dim"])?, td.embedding_dim),
            layers: pick(self.layers, file.take(&["layers"])?, td.layers),
            reg_lambda: pick(self.lambda, file.take(&["lambda", "reg_lambda"])?, td.reg_lambda),
            ssl_beta: pick(self.beta, file.take(&["beta", "ssl_beta"])?, td.ssl_beta),
            ssl_variant: pick(self.ssl_variant, file.take(&["ssl_variant"])?, td.ssl_variant),
            batch_size: pick(self.batch_size, file.take(&["batch_size"])?, td.batch_size),
            learning_rate: pick(self.lr, file.take(&["lr", "learning_rate"])?, td.learning_rate),
            epochs: pick(self.epochs, file.take(&["epochs"])?, td.epochs),
            init_scale: pick(self.init_scale, file.take(&["init_scale"])?, td.init_scale),
            seed: pick(self.seed, file.take(&["seed"])?, td.seed),
            val_fraction: pick(self.val_fraction, file.take(&["val_fraction"])?, td.val_fraction),
            channel_mask: channels,
            per_layer_attention: self.per_layer_attention
                || file.take(&["per_layer_attention"])?.unwrap_or(false),
            full_table_l2: self.full_table_l2
                || file.take(&["full_table_l2"])?.unwrap_or(false),
        };
        let channels = ChannelConfig {
            popular_item_fraction: pick(
                self.popularity_cutoff,
                file.take(&["popularity_cutoff", "popular_item_fraction"])?,
                cd.popular_item_fraction,
            ),
            entry_threshold: pick(
                self.entry_threshold,
                file.take(&["entry_threshold"])?,
                cd.entry_threshold,
            ),
        };
        file.finish()?;
        validate_config(&train, &channels)?;
        Ok(Resolved { train, channels })
    }

    /// Whether any hyperparameter was given explicitly (flag or file).
    pub fn any_explicit(&self) -> bool {
        self.config.is_some()
            || self.d.is_some()
            || self.layers.is_some()
            || self.beta.is_some()
            || self.lambda.is_some()
            || self.batch_size.is_some()
            || self.lr.is_some()
            || self.epochs.is_some()
            || self.seed.is_some()
            || self.ssl_variant.is_some()
            || self.channels.is_some()
            || self.popularity_cutoff.is_some()
            || self.entry_threshold.is_some()
            || self.val_fraction.is_some()
            || self.init_scale.is_some()
            || self.per_layer_attention
            || self.full_table_l2
    }
}

pub fn validate_config(train: &TrainConfig, channels: &ChannelConfig) -> Result<(), Failure> {
    let mut problems = Vec::new();
    if train.embedding_dim == 0 {
        problems.push("embedding dimension must be at least 1");
    }
    if train.layers == 0 {
        problems.push("layers must be at least 1");
    }
    if train.epochs == 0 {
        problems.push("epochs must be at least 1");
    }
    if train.batch_size == 0 {
        problems.push("batch size must be at least 1");
    }
    if !(train.learning_rate > 0.0 && train.learning_rate.is_finite()) {
        problems.push("learning rate must be positive and finite");
    }
    if !(train.ssl_beta >= 0.0 && train.ssl_beta.is_finite()) {
        problems.push("beta must be nonnegative and finite");
    }
    if !(train.reg_lambda >= 0.0 && train.reg_lambda.is_finite()) {
        problems.push("lambda must be nonnegative and finite");
    }
    if !(0.0..1.0).contains(&train.val_fraction) {
        problems.push("val fraction must lie in [0, 1)");
    }
    if !(train.init_scale > 0.0 && train.init_scale.is_finite()) {
        problems.push("init scale must be positive and finite");
    }
    if !(0.0..1.0).contains(&channels.popular_item_fraction) {
        problems.push("popularity cutoff must lie in [0, 1)");
    }
    if !(channels.entry_threshold >= 0.0 && channels.entry_threshold.is_finite()) {
        problems.push("entry threshold must be nonnegative and finite");
    }
    if train.channel_mask.enabled().is_empty() {
        problems.push("at least one channel must be enabled");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::usage(anyhow::anyhow!(problems.join("; "))))
    }
}

/// Evaluation knobs shared by train/evaluate/ablate/sweep.
#[derive(Args, Clone)]
pub struct EvalArgs {
    /// Comma-separated ranking cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub k: Vec<usize>,
    /// Users with fewer training interactions count as cold-start.
    #[arg(long, default_value_t = 20)]
    pub cold_threshold: usize,
}

impl EvalArgs {
    pub fn eval_config(&self, include_train_items: bool) -> EvalConfig {
        EvalConfig {
            k_list: self.k.clone(),
            cold_start_threshold: self.cold_threshold,
            include_train_items,
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Failure::usage(anyhow::anyhow!(
                "--k needs at least one cutoff, all of them positive"
            )));
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Prepared bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Run directory name under the output root; defaults to train-seed<seed>.
    #[arg(long)]
    pub name: Option<String>,
    /// Overwrite an existing run directory of the same name.
    #[arg(long)]
    pub force: bool,
    /// Rerun the exact configuration recorded in a previous run's
    /// manifest.json; conflicts with hyperparameter flags.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Prepared bundle directory (must match the run's fingerprint).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Run directory holding manifest.json and per-fold checkpoints.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Rank training positives alongside unseen items instead of masking.
    #[arg(long)]
    pub include_train_items: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Prepared bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Run directory name under the output root; defaults to ablate-seed<seed>.
    #[arg(long)]
    pub name: Option<String>,
    /// Overwrite an existing run directory of the same name.
    #[arg(long)]
    pub force: bool,
    /// Comma-separated cell labels to run instead of the full grid,
    /// e.g. "complete-hierarchical,no-social-disabled".
    #[arg(long)]
    pub cells: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SweepAxis {
    Beta,
    Layers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Layers => "layers",
        }
    }
}

#[derive(Args)]
pub struct SweepArgs {
    /// Prepared bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Hyperparameter axis to sweep.
    #[arg(long, value_enum)]
    pub parameter: SweepAxis,
    /// Comma-separated values; defaults depend on the axis.
    #[arg(long)]
    pub values: Option<String>,
    /// Run directory name; defaults to sweep-<axis>-seed<seed>.
    #[arg(long)]
    pub name: Option<String>,
    /// Overwrite an existing run directory of the same name.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories to summarize.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the combined table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<SslVariant, String> {
    SslVariant::from_str(s)
}

fn parse_channels(s: &str) -> Result<ChannelMask, String> {
    let mut mask = ChannelMask { social: false, joint: false, purchase: false };
    for token in s.split(',') {
        match token.trim() {
            "s" | "social" => mask.social = true,
            "j" | "joint" => mask.joint = true,
            "p" | "purchase" => mask.purchase = true,
            other => return Err(format!("unknown channel {other:?} (use s, j, p)")),
        }
    }
    Ok(mask)
}

/// Output root: --out flag, then $MHCN_OUT, then ./runs.
fn output_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os("MHCN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let out_root = output_root(cli.out);
    match cli.command {
        Command::Prepare(args) => commands::prepare(&out_root, &args),
        Command::MotifCensus(args) => commands::motif_census(&args),
        Command::Train(args) => {
            args.eval.validate()?;
            commands::train(&out_root, &args)
        }
        Command::Evaluate(args) => {
            args.eval.validate()?;
            commands::evaluate(&args)
        }
        Command::Ablate(args) => {
            args.eval.validate()?;
            commands::ablate(&out_root, &args)
        }
        Command::Sweep(args) => {
            args.eval.validate()?;
            commands::sweep(&out_root, &args)
        }
        Command::Report(args) => commands::report(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; they are not failures
            let is_usage_error = err.use_stderr();
            let _ = err.print();
            return if is_usage_error { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.err);
            ExitCode::from(failure.code)
        }
    }
}
