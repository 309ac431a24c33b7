//! The `hyperst` command-line tool.
//!
//! Subcommands: `synth` (write a synthetic dataset), `train` (fit a model
//! and write checkpoint / history / panel), `eval` (score a checkpoint on
//! a split), `gradcheck` (compare analytic gradients against finite
//! differences) and `ablate` (run the ablation arm matrix over several
//! seeds and test the expected orderings).
//!
//! Configuration is one flat TOML file (`--config`); every key has a
//! matching command-line flag that overrides the file, and unknown keys
//! are a hard error. Exit codes: 0 success, 1 validation error, 2 runtime
//! failure, 3 acceptance-threshold failure (gradcheck / ablate).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{
    generate_synthetic, load_dataset, prepare, prepare_with_panel, save_dataset, DataError,
    Dataset, GenePanel, GridKind, SynthConfig,
};
use crate::metrics::{sign_test_p_greater, MetricsReport};
use crate::predict::DecoderInput;
use crate::train::{
    evaluate_split, grad_check, gradcheck_batch, resume_from_groups, total_loss, train,
    train_from, train_state_groups, AblationFlags, ModelParams, ResumeState, TrainConfig,
    TrainError, TrainOutput,
};

/// Flat, typed configuration; every key has a CLI flag of the same name.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // paths
    pub data_dir: String,
    pub out_dir: String,
    // synthetic data
    pub slides: usize,
    pub spots_per_slide: usize,
    pub grid: String,
    pub genes: usize,
    pub feature_dim: usize,
    pub niche_latent_dim: usize,
    pub spot_noise: f64,
    pub latent_perturbation: f64,
    pub feature_noise: f64,
    pub niche_block: usize,
    pub spacing_um: f64,
    pub gene_loading_seed: u64,
    // shared
    pub seed: u64,
    // model and training
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub gene_hidden: usize,
    pub decoder_hidden: usize,
    pub adapter_rank: usize,
    pub adapter_layers: usize,
    pub knn_k: usize,
    pub n_panel_genes: usize,
    pub tau_init: f64,
    pub curvature_init: f64,
    pub no_hea: bool,
    pub no_gi_hea: bool,
    pub no_hca: bool,
    pub no_align: bool,
    pub euclidean: bool,
    pub inverted_nce: bool,
    pub decoder_input: String,
    pub resume: bool,
    // eval
    pub split: String,
    pub per_gene_csv: String,
    pub pseudo_bulk_csv: String,
    // gradcheck
    pub eps: f64,
    pub gradcheck_batch_size: usize,
    // ablate
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
            slides: 5,
            spots_per_slide: 400,
            grid: "hex".into(),
            genes: 200,
            feature_dim: 32,
            niche_latent_dim: 8,
            spot_noise: 0.3,
            latent_perturbation: 0.4,
            feature_noise: 0.8,
            niche_block: 3,
            spacing_um: 100.0,
            gene_loading_seed: 7,
            seed: 0,
            alpha: 1.0,
            beta: 0.2,
            batch_size: 128,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            embed_dim: 32,
            gene_hidden: 512,
            decoder_hidden: 512,
            adapter_rank: 4,
            adapter_layers: 2,
            knn_k: 7,
            n_panel_genes: 200,
            tau_init: 0.07,
            curvature_init: 1.0,
            no_hea: false,
            no_gi_hea: false,
            no_hca: false,
            no_align: false,
            euclidean: false,
            inverted_nce: false,
            decoder_input: "both".into(),
            resume: false,
            split: "test".into(),
            per_gene_csv: String::new(),
            pseudo_bulk_csv: String::new(),
            eps: 1e-5,
            gradcheck_batch_size: 16,
            ablate_seeds: 5,
        }
    }
}

impl RunConfig {
    pub fn synth_config(&self) -> Result<SynthConfig, AppError> {
        let grid: GridKind = self.grid.parse().map_err(AppError::Validation)?;
        Ok(SynthConfig {
            slides: self.slides,
            spots_per_slide: self.spots_per_slide,
            grid,
            genes: self.genes,
            feature_dim: self.feature_dim,
            niche_latent_dim: self.niche_latent_dim,
            spot_noise: self.spot_noise,
            latent_perturbation: self.latent_perturbation,
            feature_noise: self.feature_noise,
            niche_block: self.niche_block,
            spacing_um: self.spacing_um,
            seed: self.seed,
            gene_loading_seed: self.gene_loading_seed,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, AppError> {
        let decoder_input: DecoderInput =
            self.decoder_input.parse().map_err(AppError::Validation)?;
        Ok(TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
            embed_dim: self.embed_dim,
            gene_hidden: self.gene_hidden,
            decoder_hidden: self.decoder_hidden,
            adapter_rank: self.adapter_rank,
            adapter_layers: self.adapter_layers,
            knn_k: self.knn_k,
            n_panel_genes: self.n_panel_genes,
            tau_init: self.tau_init,
            curvature_init: self.curvature_init,
            ablation: AblationFlags {
                no_hea: self.no_hea || self.no_align,
                no_gi_hea: self.no_gi_hea,
                no_hca: self.no_hca || self.no_align,
                euclidean_mode: self.euclidean,
                decoder_input,
                inverted_nce: self.inverted_nce,
            },
        })
    }

    /// SHA-256 over the canonical TOML serialization.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// CLI flag overrides; `None` falls back to the config file, then to the
/// built-in default.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Dataset directory [default: data]
    #[arg(long, global = true)]
    pub data_dir: Option<String>,
    /// Output directory for checkpoints and reports [default: out]
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    /// Synthetic slides [default: 5]
    #[arg(long, global = true)]
    pub slides: Option<usize>,
    /// Spots per synthetic slide [default: 400]
    #[arg(long = "spots", global = true)]
    pub spots_per_slide: Option<usize>,
    /// Grid kind: hex or square [default: hex]
    #[arg(long, global = true)]
    pub grid: Option<String>,
    /// Raw synthetic gene count [default: 200]
    #[arg(long, global = true)]
    pub genes: Option<usize>,
    /// Image feature dimension [default: 32]
    #[arg(long, global = true)]
    pub feature_dim: Option<usize>,
    /// Latent dimension of the generator [default: 8]
    #[arg(long, global = true)]
    pub niche_latent_dim: Option<usize>,
    /// Log-expression noise [default: 0.3]
    #[arg(long, global = true)]
    pub spot_noise: Option<f64>,
    /// Spot-level latent offset scale [default: 0.4]
    #[arg(long, global = true)]
    pub latent_perturbation: Option<f64>,
    /// Image feature noise [default: 0.8]
    #[arg(long, global = true)]
    pub feature_noise: Option<f64>,
    /// Niche block side in grid cells [default: 3]
    #[arg(long, global = true)]
    pub niche_block: Option<usize>,
    /// Grid spacing in micrometers [default: 100]
    #[arg(long, global = true)]
    pub spacing_um: Option<f64>,
    /// Seed of the fixed generator loading maps [default: 7]
    #[arg(long, global = true)]
    pub gene_loading_seed: Option<u64>,
    /// Master seed (data, split, init, shuffling) [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Alignment weight in the total loss [default: 1]
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Entailment weight inside the alignment term [default: 0.2]
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Batch size (at least 2) [default: 128]
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Training epochs [default: 20]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Base learning rate (cosine-decayed) [default: 0.001]
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Decoupled weight decay on matrices [default: 0.0001]
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    /// Shared embedding dimension [default: 32]
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    /// Gene encoder hidden width [default: 512]
    #[arg(long, global = true)]
    pub gene_hidden: Option<usize>,
    /// Decoder hidden width [default: 512]
    #[arg(long, global = true)]
    pub decoder_hidden: Option<usize>,
    /// Low-rank adapter rank [default: 4]
    #[arg(long, global = true)]
    pub adapter_rank: Option<usize>,
    /// Image layers carrying adapters: 0, 1 or 2 [default: 2]
    #[arg(long, global = true)]
    pub adapter_layers: Option<usize>,
    /// Niche size K (center + K-1 neighbors) [default: 7]
    #[arg(long, global = true)]
    pub knn_k: Option<usize>,
    /// Gene panel size [default: 200]
    #[arg(long, global = true)]
    pub n_panel_genes: Option<usize>,
    /// Initial contrastive temperature [default: 0.07]
    #[arg(long, global = true)]
    pub tau_init: Option<f64>,
    /// Initial curvature magnitude [default: 1]
    #[arg(long, global = true)]
    pub curvature_init: Option<f64>,
    /// Drop the entailment composite [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub no_hea: Option<bool>,
    /// Drop only the image-gene entailment terms [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub no_gi_hea: Option<bool>,
    /// Drop the contrastive composite [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub no_hca: Option<bool>,
    /// Drop both alignment losses [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub no_align: Option<bool>,
    /// Cosine InfoNCE in Euclidean space instead of hyperbolic alignment
    /// [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub euclidean: Option<bool>,
    /// Inverted InfoNCE reading (positive distances, positive pair
    /// excluded) [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub inverted_nce: Option<bool>,
    /// Decoder input: spot, niche or both [default: both]
    #[arg(long, global = true)]
    pub decoder_input: Option<String>,
    /// Resume training from the saved state [default: false]
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,
    /// Split to evaluate: train, val or test [default: test]
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Write per-gene PCCs to this CSV [default: none]
    #[arg(long, global = true)]
    pub per_gene_csv: Option<String>,
    /// Write the pseudo-bulk profile to this CSV [default: none]
    #[arg(long, global = true)]
    pub pseudo_bulk_csv: Option<String>,
    /// Finite-difference step for gradcheck [default: 1e-5]
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Gradcheck batch size [default: 16]
    #[arg(long, global = true)]
    pub gradcheck_batch_size: Option<usize>,
    /// Seeds per ablation arm [default: 5]
    #[arg(long, global = true)]
    pub ablate_seeds: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, base: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { base.$field = v.clone(); })*
            };
        }
        set!(
            data_dir,
            out_dir,
            slides,
            spots_per_slide,
            grid,
            genes,
            feature_dim,
            niche_latent_dim,
            spot_noise,
            latent_perturbation,
            feature_noise,
            niche_block,
            spacing_um,
            gene_loading_seed,
            seed,
            alpha,
            beta,
            batch_size,
            epochs,
            learning_rate,
            weight_decay,
            embed_dim,
            gene_hidden,
            decoder_hidden,
            adapter_rank,
            adapter_layers,
            knn_k,
            n_panel_genes,
            tau_init,
            curvature_init,
            no_hea,
            no_gi_hea,
            no_hca,
            no_align,
            euclidean,
            inverted_nce,
            decoder_input,
            resume,
            split,
            per_gene_csv,
            pseudo_bulk_csv,
            eps,
            gradcheck_batch_size,
            ablate_seeds,
        );
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "hyperst",
    version,
    about = "Multi-level hyperbolic image-gene alignment for spatial transcriptomics prediction"
)]
pub struct Cli {
    /// Flat TOML config file; flags override file values, unknown keys
    /// are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic dataset and write it to the data directory.
    Synth,
    /// Train a model; writes checkpoint.bin, train_state.bin,
    /// history.jsonl and panel.json to the output directory.
    Train,
    /// Evaluate a checkpoint on one split and write a JSON report.
    Eval,
    /// Compare analytic gradients against central finite differences.
    Gradcheck,
    /// Run the ablation arm matrix over several seeds and check the
    /// expected orderings.
    Ablate,
}

/// Errors mapped to process exit codes.
#[derive(Debug)]
pub enum AppError {
    /// Exit 1: bad flags, bad config values, contract violations.
    Validation(String),
    /// Exit 2: missing files, IO failures, training divergence.
    Runtime(String),
    /// Exit 3: a gradcheck or ablate threshold was not met.
    Threshold(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
            AppError::Threshold(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Runtime(m) | AppError::Threshold(m) => m,
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Validation(_)
            | DataError::TooFewSpots(_)
            | DataError::PanelTooLarge { .. }
            | DataError::NegativeCount
            | DataError::Split(_)
            | DataError::Niche(_) => AppError::Validation(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::Align(_)
            | TrainError::Geometry(_)
            | TrainError::Represent(_)
            | TrainError::Predict(_)
            | TrainError::Metrics(_) => AppError::Validation(e.to_string()),
            TrainError::Data(d) => d.into(),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for AppError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn io_runtime(path: &Path, e: std::io::Error) -> AppError {
    AppError::Runtime(format!("io error on {}: {e}", path.display()))
}

/// Resolve the effective config: defaults, then file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_runtime(path, e))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| {
                AppError::Validation(format!("bad config {}: {e}", path.display()))
            })?
        }
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut config);
    Ok(config)
}

pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), AppError> {
    let config = resolve_config(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&config),
        Command::Train => cmd_train(&config),
        Command::Eval => cmd_eval(&config),
        Command::Gradcheck => cmd_gradcheck(&config),
        Command::Ablate => cmd_ablate(&config),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_runtime(parent, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| io_runtime(path, e))
}

pub fn cmd_synth(config: &RunConfig) -> Result<(), AppError> {
    let synth = config.synth_config()?;
    synth.validate().map_err(AppError::from)?;
    let ds = generate_synthetic(&synth)?;
    let dir = PathBuf::from(&config.data_dir);
    save_dataset(&ds, &dir)?;
    println!(
        "wrote {} slides, {} spots, {} genes, feature dim {} to {}",
        synth.slides,
        ds.spots.len(),
        ds.n_genes_raw(),
        ds.feature_dim(),
        dir.display()
    );
    Ok(())
}

fn load_dataset_checked(config: &RunConfig) -> Result<Dataset, AppError> {
    let dir = PathBuf::from(&config.data_dir);
    if !dir.join("spots.csv").exists() {
        return Err(AppError::Runtime(format!(
            "no dataset at {} (run `hyperst synth` first)",
            dir.display()
        )));
    }
    Ok(load_dataset(&dir)?)
}

/// Write checkpoint, resume state, history and panel for a finished (or
/// aborted) run.
fn persist_train_output(
    out_dir: &Path,
    output: &TrainOutput,
    panel: &GenePanel,
) -> Result<(), AppError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_runtime(out_dir, e))?;
    checkpoint::save_groups(&out_dir.join("checkpoint.bin"), &output.best.to_groups())?;
    checkpoint::save_groups(&out_dir.join("train_state.bin"), &train_state_groups(output))?;
    let mut history = String::new();
    for rec in &output.history {
        history.push_str(&serde_json::to_string(rec).expect("history serializes"));
        history.push('\n');
    }
    write_file(&out_dir.join("history.jsonl"), history.as_bytes())?;
    let panel_json = serde_json::to_string_pretty(panel).expect("panel serializes");
    write_file(&out_dir.join("panel.json"), panel_json.as_bytes())?;
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<(), AppError> {
    let train_config = config.train_config()?;
    train_config.validate().map_err(AppError::from)?;
    let ds = load_dataset_checked(config)?;
    let prepared = prepare(&ds, config.seed, train_config.knn_k, train_config.n_panel_genes)?;
    let out_dir = PathBuf::from(&config.out_dir);

    let result = if config.resume {
        let state_path = out_dir.join("train_state.bin");
        if !state_path.exists() {
            return Err(AppError::Runtime(format!(
                "no resume state at {}",
                state_path.display()
            )));
        }
        let groups = checkpoint::load_groups(&state_path)?;
        let state: ResumeState = resume_from_groups(&groups).map_err(AppError::from)?;
        train_from(&prepared, &train_config, state)
    } else {
        train(&prepared, &train_config)
    };

    match result {
        Ok(output) => {
            persist_train_output(&out_dir, &output, &prepared.panel)?;
            let best = output.history.iter().find(|r| r.epoch == output.best_epoch);
            match best {
                Some(rec) => println!(
                    "trained {} epochs; best epoch {} with val PCC {:.4}; wrote {}",
                    output.epochs_done,
                    output.best_epoch,
                    rec.val_pcc.iter().next_back().map(|(_, v)| *v).unwrap_or(f64::NAN),
                    out_dir.display()
                ),
                None => println!(
                    "trained {} epochs (no history); wrote initialization to {}",
                    output.epochs_done,
                    out_dir.display()
                ),
            }
            Ok(())
        }
        Err(TrainError::Divergence { epoch, last }) => {
            persist_train_output(&out_dir, &last, &prepared.panel)?;
            Err(AppError::Runtime(format!(
                "non-finite loss at epoch {epoch}; last finite checkpoint written to {}",
                out_dir.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Evaluation report document.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_spots: usize,
    pub n_genes: usize,
    pub config_digest: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub fn cmd_eval(config: &RunConfig) -> Result<(), AppError> {
    let train_config = config.train_config()?;
    let ds = load_dataset_checked(config)?;
    let out_dir = PathBuf::from(&config.out_dir);
    let ck_path = out_dir.join("checkpoint.bin");
    if !ck_path.exists() {
        return Err(AppError::Runtime(format!("no checkpoint at {}", ck_path.display())));
    }
    let params = ModelParams::from_groups(&checkpoint::load_groups(&ck_path)?)
        .map_err(AppError::from)?;
    let panel_path = out_dir.join("panel.json");
    let panel_text =
        std::fs::read_to_string(&panel_path).map_err(|e| io_runtime(&panel_path, e))?;
    let panel: GenePanel = serde_json::from_str(&panel_text)
        .map_err(|e| AppError::Runtime(format!("bad panel.json: {e}")))?;

    let prepared = prepare_with_panel(&ds, config.seed, train_config.knn_k, panel)?;
    let split = prepared
        .split_named(&config.split)
        .ok_or_else(|| {
            AppError::Validation(format!("unknown split '{}' (train|val|test)", config.split))
        })?;

    let pred = crate::train::predict_split(split, &params, train_config.ablation.decoder_input)
        .map_err(AppError::from)?;
    let metrics = MetricsReport::compute(&pred, &split.y_spot)
        .map_err(|e| AppError::Validation(e.to_string()))?;

    if !config.per_gene_csv.is_empty() {
        let mut csv = String::from("gene,pcc\n");
        for (name, pcc) in prepared.panel.names.iter().zip(&metrics.per_gene_pcc) {
            csv.push_str(&format!("{name},{pcc}\n"));
        }
        write_file(Path::new(&config.per_gene_csv), csv.as_bytes())?;
    }
    if !config.pseudo_bulk_csv.is_empty() {
        let bulk = crate::metrics::pseudo_bulk(&pred)
            .map_err(|e| AppError::Validation(e.to_string()))?;
        let mut csv = String::from("gene,mean_pred\n");
        for (name, v) in prepared.panel.names.iter().zip(&bulk) {
            csv.push_str(&format!("{name},{v}\n"));
        }
        write_file(Path::new(&config.pseudo_bulk_csv), csv.as_bytes())?;
    }

    let report = EvalReport {
        split: config.split.clone(),
        n_spots: split.n_spots(),
        n_genes: prepared.panel.len(),
        config_digest: config.digest(),
        metrics,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let report_path = out_dir.join(format!("report_{}.json", config.split));
    write_file(&report_path, json.as_bytes())?;
    let headline = report.metrics.headline_pcc();
    println!(
        "split {}: {} spots, PCC@{} = {:.4}, MSE = {:.4}, MAE = {:.4} -> {}",
        report.split,
        report.n_spots,
        report.metrics.pcc_at.keys().next_back().unwrap(),
        headline,
        report.metrics.mse,
        report.metrics.mae,
        report_path.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(config: &RunConfig) -> Result<(), AppError> {
    let train_config = config.train_config()?;
    train_config.validate().map_err(AppError::from)?;
    if !(1e-7..=1e-3).contains(&config.eps) {
        eprintln!(
            "warning: eps = {} is outside [1e-7, 1e-3]; finite differences may be poorly conditioned",
            config.eps
        );
    }
    let params = ModelParams::init(&train_config, config.feature_dim, config.n_panel_genes)
        .map_err(AppError::from)?;

    // Deterministically resample until the batch stays clear of clamp
    // boundaries, so finite differences are trustworthy.
    let b = config.gradcheck_batch_size.max(2);
    let mut batch = gradcheck_batch(b, config.feature_dim, config.n_panel_genes, config.seed);
    for attempt in 0..10u64 {
        let (_, events) = total_loss(&batch, &params, &train_config).map_err(AppError::from)?;
        if events.is_clean() {
            break;
        }
        batch = gradcheck_batch(
            b,
            config.feature_dim,
            config.n_panel_genes,
            config.seed.wrapping_add((attempt + 1) * 1_000_003),
        );
    }

    let report =
        grad_check(&params, &batch, &train_config, config.eps).map_err(AppError::from)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&PathBuf::from(&config.out_dir).join("gradcheck.json"), json.as_bytes())?;
    println!(
        "gradcheck: {} scalars checked, {} skipped, max relative error {:.3e}",
        report.checked,
        report.skipped.len(),
        report.max_rel_err
    );
    for entry in &report.worst {
        if entry.rel_err >= 1e-4 {
            println!(
                "  FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                entry.group, entry.index, entry.analytic, entry.numeric, entry.rel_err
            );
        }
    }
    if report.max_rel_err >= 1e-4 {
        return Err(AppError::Threshold(format!(
            "gradient check failed: max relative error {:.3e} >= 1e-4",
            report.max_rel_err
        )));
    }
    Ok(())
}

/// One ablation arm: a label plus the flag changes it applies.
fn ablation_arms() -> Vec<(&'static str, AblationFlags)> {
    let base = AblationFlags::default();
    vec![
        ("full", base),
        ("no_gi_hea", AblationFlags { no_gi_hea: true, ..base }),
        ("no_hea", AblationFlags { no_hea: true, ..base }),
        ("no_align", AblationFlags { no_hea: true, no_hca: true, ..base }),
        ("euclidean", AblationFlags { euclidean_mode: true, ..base }),
        ("only_spot", AblationFlags { decoder_input: DecoderInput::Spot, ..base }),
        ("only_niche", AblationFlags { decoder_input: DecoderInput::Niche, ..base }),
    ]
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ArmStats {
    pub per_seed_pcc: Vec<f64>,
    pub per_seed_mse: Vec<f64>,
    pub per_seed_mae: Vec<f64>,
    pub mean_pcc: f64,
    pub std_pcc: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct AblateReport {
    pub seeds: Vec<u64>,
    pub arms: BTreeMap<String, ArmStats>,
    pub p_full_gt_no_hea: f64,
    pub p_no_hea_gt_no_align: f64,
    pub p_full_gt_only_spot: f64,
    pub hyperbolic_euclidean_gap: f64,
    pub ordering_ok: bool,
    pub euclidean_ok: bool,
    pub config_digest: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablate(config: &RunConfig) -> Result<(), AppError> {
    let base_config = config.train_config()?;
    base_config.validate().map_err(AppError::from)?;
    let synth = config.synth_config()?;
    let ds = generate_synthetic(&synth)?;
    let arms = ablation_arms();
    let seeds: Vec<u64> = (0..config.ablate_seeds as u64).collect();

    let mut per_arm: BTreeMap<String, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &seed in &seeds {
        let prepared = prepare(&ds, seed, base_config.knn_k, base_config.n_panel_genes)?;
        for (name, flags) in &arms {
            let arm_config = TrainConfig { seed, ablation: *flags, ..base_config.clone() };
            let output = train(&prepared, &arm_config).map_err(AppError::from)?;
            let report = evaluate_split(&prepared.test, &output.best, flags.decoder_input)
                .map_err(AppError::from)?;
            let entry = per_arm.entry(name.to_string()).or_default();
            entry.0.push(report.headline_pcc());
            entry.1.push(report.mse);
            entry.2.push(report.mae);
            println!(
                "seed {seed} arm {name:<10} test PCC@{} = {:.4}",
                report.pcc_at.keys().next_back().unwrap(),
                report.headline_pcc()
            );
        }
    }

    let arms_stats: BTreeMap<String, ArmStats> = per_arm
        .iter()
        .map(|(name, (pcc, mse, mae))| {
            let (mean_pcc, std_pcc) = mean_std(pcc);
            (
                name.clone(),
                ArmStats {
                    per_seed_pcc: pcc.clone(),
                    per_seed_mse: mse.clone(),
                    per_seed_mae: mae.clone(),
                    mean_pcc,
                    std_pcc,
                },
            )
        })
        .collect();

    let pcc = |name: &str| -> &[f64] { &per_arm[name].0 };
    let p_full_gt_no_hea = sign_test_p_greater(pcc("full"), pcc("no_hea"));
    let p_no_hea_gt_no_align = sign_test_p_greater(pcc("no_hea"), pcc("no_align"));
    let p_full_gt_only_spot = sign_test_p_greater(pcc("full"), pcc("only_spot"));
    let gap = arms_stats["full"].mean_pcc - arms_stats["euclidean"].mean_pcc;
    let ordering_ok =
        p_full_gt_no_hea < 0.1 && p_no_hea_gt_no_align < 0.1 && p_full_gt_only_spot < 0.1;
    let euclidean_ok = gap >= 0.0;

    let report = AblateReport {
        seeds,
        arms: arms_stats,
        p_full_gt_no_hea,
        p_no_hea_gt_no_align,
        p_full_gt_only_spot,
        hyperbolic_euclidean_gap: gap,
        ordering_ok,
        euclidean_ok,
        config_digest: config.digest(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&PathBuf::from(&config.out_dir).join("ablate.json"), json.as_bytes())?;

    println!("\narm           mean PCC  +/- std");
    for (name, stats) in &report.arms {
        println!("{name:<13} {:.4}    {:.4}", stats.mean_pcc, stats.std_pcc);
    }
    println!("sign test p (full > no_hea)      = {p_full_gt_no_hea:.4}");
    println!("sign test p (no_hea > no_align)  = {p_no_hea_gt_no_align:.4}");
    println!("sign test p (full > only_spot)   = {p_full_gt_only_spot:.4}");
    println!("hyperbolic - euclidean mean gap  = {gap:+.4}");

    if !(ordering_ok && euclidean_ok) {
        return Err(AppError::Threshold(format!(
            "ablation trend check failed (ordering_ok = {ordering_ok}, euclidean_ok = {euclidean_ok}); see ablate.json"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("nonsense_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense_key"), "{err}");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.alpha = 2.0;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn no_align_implies_both_flags() {
        let config = RunConfig { no_align: true, ..RunConfig::default() };
        let tc = config.train_config().unwrap();
        assert!(tc.ablation.no_hca);
        assert!(tc.ablation.no_hea);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut config = RunConfig::default();
        let overrides =
            Overrides { epochs: Some(3), no_hea: Some(true), ..Overrides::default() };
        overrides.apply(&mut config);
        assert_eq!(config.epochs, 3);
        assert!(config.no_hea);
    }
}
