//! Command-line front end: `generate`, `ingest`, `train`, `evaluate` and
//! `visualize`, each driven by one TOML run configuration.
//!
//! Output layout under `--out` (or `output_dir` from the config):
//!
//! ```text
//! data/                      synthetic images and generation_log.csv (generate)
//! manifest.csv               split assignment (ingest, train)
//! checkpoints/best.ckpt      lowest validation loss (train)
//! checkpoints/last.ckpt      most recent epoch, used by --resume (train)
//! history.csv                per-epoch metrics (train)
//! eval/                      report.json, figures and their CSV sources (evaluate)
//! overlays/                  activation overlays and summaries (visualize)
//! records/<command>.json     run record with artifact checksums
//! ```

pub mod config;
pub mod record;

use std::fs;
use std::path::{Path, PathBuf};

use cellfate::dataset::{load_images, load_manifest, split_dataset, DatasetManifest, Split};
use cellfate::evaluation::{evaluate, render_figures};
use cellfate::interpretability::{capture_activations, class_activation_summary, render_overlay, write_class_summary, Reduction};
use cellfate::model::checkpoint::{load_checkpoint_for, load_checkpoint_with, save_checkpoint_with, CheckpointInfo};
use cellfate::model::{build_model, NetworkState};
use cellfate::synth::generate_dataset;
use cellfate::training::{train_with, EpochReport, OptimizerMoments, ResumeState, TrainHistory, TrainOptions};
use cellfate::{Error, Result};
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
use record::{artifacts, RunRecord, PIPELINE_VERSION};

#[derive(Debug, Parser)]
#[command(name = "cellfate", version, about = "Cell-fate image classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for decoding, rendering and per-sample network passes.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset described by the config.
    Generate(Common),
    /// Scan a class-directory dataset and write its split manifest.
    Ingest(Common),
    /// Split, train, and save checkpoints and history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoints/last.ckpt if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and emit the report and figures.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoints/best.ckpt under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Render activation overlays for chosen samples and layers.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample id, e.g. `neuron_like/img_00003`. Repeatable.
        #[arg(long = "sample")]
        samples: Vec<String>,
        /// Layer id; defaults to the last convolutional stage. Repeatable.
        #[arg(long = "layer")]
        layers: Vec<String>,
        #[arg(long, default_value = "channel_mean")]
        reduction: String,
        /// Also write per-class mean activation maps.
        #[arg(long)]
        per_class_summary: bool,
        #[arg(long, default_value_t = 4)]
        samples_per_class: usize,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::Ingest(c) => c,
            Command::Train { common, .. } | Command::Evaluate { common, .. } | Command::Visualize { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Ingest(_) => "ingest",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Visualize { .. } => "visualize",
        }
    }
}

/// Process exit status for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        cellfate::ErrorKind::Config => 2,
        cellfate::ErrorKind::Data => 3,
        cellfate::ErrorKind::Numeric => 4,
        cellfate::ErrorKind::Io => 5,
    }
}

/// One-line JSON error description for stderr.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({
        "error": err.code(),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    })
    .to_string()
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    command: &'static str,
    started_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Context {
    fn new(command: &Command) -> Result<Self> {
        let common = command.common();
        let mut config = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            config = config.with_seed(seed);
        }
        config.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Context {
            config,
            out,
            command: command.name(),
            started_at: now(),
        })
    }

    fn finish(&self, files: &[PathBuf]) -> Result<RunRecord> {
        let config_checksum = self.config.checksum()?;
        let record = RunRecord {
            run_id: format!("{}-{}-{}", self.config.run_label, self.command, &config_checksum[..12]),
            command: self.command.to_string(),
            run_label: self.config.run_label.clone(),
            seed: self.config.seed,
            config_checksum,
            pipeline_version: PIPELINE_VERSION.to_string(),
            started_at: self.started_at.clone(),
            finished_at: now(),
            artifacts: artifacts(&self.out, files)?,
        };
        record.write(&self.record_path())?;
        Ok(record)
    }

    fn record_path(&self) -> PathBuf {
        self.out.join("records").join(format!("{}.json", self.command))
    }

    fn data_dir(&self) -> PathBuf {
        self.config.data_dir(&self.out)
    }

    /// Scans the data directory and applies the configured split.
    fn manifest(&self) -> Result<DatasetManifest> {
        let scanned = load_manifest(&self.data_dir(), &self.config.taxonomy)?;
        split_dataset(&scanned, self.config.dataset.split, self.config.split_seed())
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>) -> Result<NetworkState> {
        let path = explicit.clone().unwrap_or_else(|| self.checkpoint_dir().join("best.ckpt"));
        if !path.exists() {
            return Err(Error::NotFound(format!("checkpoint {}", path.display())));
        }
        load_checkpoint_for(&path, &self.config.taxonomy)
    }
}

/// Runs one command and returns its record.
pub fn run(command: &Command) -> Result<RunRecord> {
    let workers = command.common().workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        let ctx = Context::new(command)?;
        match command {
            Command::Generate(_) => cmd_generate(&ctx),
            Command::Ingest(_) => cmd_ingest(&ctx),
            Command::Train { resume, .. } => cmd_train(&ctx, *resume),
            Command::Evaluate { checkpoint, split, .. } => cmd_evaluate(&ctx, checkpoint, *split),
            Command::Visualize {
                checkpoint,
                samples,
                layers,
                reduction,
                per_class_summary,
                samples_per_class,
                split,
                ..
            } => cmd_visualize(
                &ctx,
                checkpoint,
                samples,
                layers,
                reduction,
                per_class_summary.then_some(*samples_per_class),
                *split,
            ),
        }
    })
}

fn cmd_generate(ctx: &Context) -> Result<RunRecord> {
    let spec = ctx.config.synthetic_spec()?;
    let data = ctx.data_dir();
    let generated = generate_dataset(&spec, &data)?;
    let split = split_dataset(&generated.manifest, ctx.config.dataset.split, ctx.config.split_seed())?;
    let manifest_path = data.join("manifest.csv");
    split.write_csv(&manifest_path)?;
    let mut files = generated.files;
    files.push(manifest_path);
    log::info!("generated {} images in {}", split.len(), data.display());
    ctx.finish(&files)
}

fn cmd_ingest(ctx: &Context) -> Result<RunRecord> {
    let manifest = ctx.manifest()?;
    for r in &manifest.rejected {
        log::warn!("rejected {}: {}", r.path.display(), r.reason);
    }
    let path = ctx.out.join("manifest.csv");
    manifest.write_csv(&path)?;
    log::info!("{} samples, {} rejected", manifest.len(), manifest.rejected.len());
    ctx.finish(&[path])
}

/// Trainer state stored in `last.ckpt`. Epoch durations are zeroed so the
/// checkpoint depends only on the configuration; `history.csv` keeps them.
#[derive(serde::Serialize, serde::Deserialize)]
struct TrainerBookkeeping {
    history: TrainHistory,
    epochs_since_best: usize,
    optimizer_steps: u32,
}

impl TrainerBookkeeping {
    fn new(report: &EpochReport<'_>) -> Self {
        let mut history = report.history.clone();
        history.records.iter_mut().for_each(|r| r.seconds = 0.0);
        TrainerBookkeeping {
            history,
            epochs_since_best: report.epochs_since_best,
            optimizer_steps: report.optimizer.steps,
        }
    }

    /// Restores epoch durations from a previously written history file.
    fn restore_seconds(&mut self, history_csv: &Path) {
        let Ok(timed) = TrainHistory::read_csv(history_csv) else {
            return;
        };
        for record in &mut self.history.records {
            if let Some(t) = timed.iter().find(|t| t.epoch == record.epoch) {
                record.seconds = t.seconds;
            }
        }
    }
}

fn cmd_train(ctx: &Context, resume: bool) -> Result<RunRecord> {
    let manifest = ctx.manifest()?;
    let manifest_path = ctx.out.join("manifest.csv");
    manifest.write_csv(&manifest_path)?;
    let dir = ctx.checkpoint_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let best_path = dir.join("best.ckpt");
    let last_path = dir.join("last.ckpt");
    let history_path = ctx.out.join("history.csv");

    let mut resume_state = None;
    let state = if resume && last_path.exists() {
        let (state, info) = load_checkpoint_with(&last_path)?;
        cellfate::model::checkpoint::ensure_compatible(&state, &ctx.config.taxonomy)?;
        if state.config != ctx.config.model {
            return Err(Error::Compatibility(
                "model section differs from the checkpoint being resumed".into(),
            ));
        }
        let mut book: TrainerBookkeeping = serde_json::from_value(info.extra).map_err(|e| Error::CorruptCheckpoint {
            path: last_path.clone(),
            reason: format!("trainer bookkeeping: {e}"),
        })?;
        book.restore_seconds(&history_path);
        log::info!("resuming after epoch {}", info.epoch);
        resume_state = Some(ResumeState {
            best: load_checkpoint_for(&best_path, &ctx.config.taxonomy)?,
            history: book.history,
            epochs_since_best: book.epochs_since_best,
            optimizer: OptimizerMoments {
                steps: book.optimizer_steps,
                tensors: info.auxiliary,
            },
        });
        state
    } else {
        if resume {
            log::warn!("no checkpoint at {}; starting fresh", last_path.display());
        }
        build_model(&ctx.config.model, &ctx.config.taxonomy, ctx.config.init_seed())?
    };

    let mut save = |r: &EpochReport<'_>| -> Result<()> {
        if r.improved {
            save_checkpoint_with(
                r.best,
                &CheckpointInfo {
                    epoch: r.record.epoch,
                    ..CheckpointInfo::default()
                },
                &best_path,
            )?;
        }
        r.history.write_csv(&history_path)?;
        save_checkpoint_with(
            r.state,
            &CheckpointInfo {
                epoch: r.record.epoch,
                extra: serde_json::to_value(TrainerBookkeeping::new(r))?,
                auxiliary: r.optimizer.tensors.clone(),
            },
            &last_path,
        )
    };
    let options = TrainOptions {
        resume: resume_state,
        on_epoch: Some(&mut save),
    };
    let (_, history) = train_with(state, &manifest, &ctx.config.train, &ctx.config.preprocess, options)?;
    history.write_csv(&history_path)?;
    if let Some(best) = history.best() {
        log::info!(
            "best epoch {} (val_loss {:.4}, val_acc {:.4})",
            best.epoch,
            best.val_loss,
            best.val_acc
        );
    }
    ctx.finish(&[manifest_path, best_path, last_path, history_path])
}

fn cmd_evaluate(ctx: &Context, checkpoint: &Option<PathBuf>, split: Split) -> Result<RunRecord> {
    let state = ctx.checkpoint(checkpoint)?;
    let manifest = ctx.manifest()?;
    let mut evaluation = evaluate(&state, &manifest, split, &ctx.config.preprocess)?;
    evaluation.report.config_checksum = ctx.config.checksum()?;
    evaluation.report.timestamp = Some(now());
    let dir = ctx.out.join("eval");
    let mut files = render_figures(&evaluation.report, &evaluation.curves, &dir)?;
    let report_path = dir.join("report.json");
    evaluation.report.write(&report_path)?;
    files.insert(0, report_path);
    log::info!(
        "{split}: accuracy {:.4}, macro AUC {:.4} over {} samples",
        evaluation.report.accuracy,
        evaluation.report.macro_auc,
        evaluation.report.n
    );
    ctx.finish(&files)
}

fn cmd_visualize(
    ctx: &Context,
    checkpoint: &Option<PathBuf>,
    samples: &[String],
    layers: &[String],
    reduction: &str,
    summary: Option<usize>,
    split: Split,
) -> Result<RunRecord> {
    let reduction: Reduction = reduction.parse()?;
    let state = ctx.checkpoint(checkpoint)?;
    let manifest = ctx.manifest()?;
    let ids = state.layer_ids();
    let default_layer = ids[ids.len() - 2].clone();
    let layers: Vec<&str> = if layers.is_empty() {
        vec![default_layer.as_str()]
    } else {
        layers.iter().map(String::as_str).collect()
    };
    let dir = ctx.out.join("overlays");
    let mut files = Vec::new();
    let chosen = samples
        .iter()
        .map(|id| manifest.sample(id).ok_or_else(|| Error::NotFound(format!("sample `{id}`"))))
        .collect::<Result<Vec<_>>>()?;
    let images = load_images(&manifest, &chosen, &ctx.config.preprocess)?;
    for (sample, image) in chosen.iter().zip(&images) {
        for trace in capture_activations(&state, image.view(), &sample.id, &layers)? {
            let written = render_overlay(&trace, image.view(), reduction, &dir)?;
            files.push(written.png);
            files.push(written.csv);
        }
    }
    if let Some(per_class) = summary {
        for layer in &layers {
            let s = class_activation_summary(
                &state,
                &manifest,
                split,
                layer,
                per_class,
                &ctx.config.preprocess,
                ctx.config.seed,
            )?;
            files.extend(write_class_summary(&s, layer, ctx.config.preprocess.target_height, &dir)?);
        }
    }
    if files.is_empty() {
        log::warn!("nothing to render: pass --sample or --per-class-summary");
    }
    ctx.finish(&files)
}

/// Convenience for callers holding a config in memory: writes it to
/// `<out>/config.toml` and returns that path.
pub fn write_config(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
