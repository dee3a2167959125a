//! Command-line plumbing: one configuration document, six subcommands,
//! stable artifact names.
//!
//! Every run resolves a [`RunConfig`] (file content plus flag overrides),
//! archives the resolved copy as `run_config.json` beside the outputs, and
//! then executes one subcommand. Artifacts live under the output directory
//! with fixed names, so successive commands compose without extra flags:
//! `gen-data` writes `manifest.jsonl`, `calibrate` writes `calibration.txt`,
//! `finetune` reads both and writes `adapters.ckpt` plus
//! `train_report.json`, `evaluate` writes `eval_report.json` and
//! `eval_report.txt`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or inconsistent inputs, bad checkpoints), 3 numeric failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCheckpoint, CheckpointManifest};
use crate::backbone::{Site, ToyBackbone, ToyBackboneConfig};
use crate::datasim::{generate_benchmark, DatasetManifest, GenerateConfig, Split};
use crate::error::{PetalError, Result};
use crate::evalmetrics::evaluate_model;
use crate::imaging::ImageBuf;
use crate::injection::{
    apply_base_tensors, derive_seed, inject, AdaptedModel, InjectMode, InjectionConfig,
};
use crate::losses::{MarginHead, MarginVariant};
use crate::quality::{
    calibrate, calibration_from_scores, estimator_by_name, GateCalibration, SharpnessEstimator,
};
use crate::trainer::{finetune, grad_probe, GradProbeMode, TrainConfig, TrainMode};

/// Resolved-config copy written beside every command's outputs.
pub const CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.txt";
pub const CHECKPOINT_FILE: &str = "adapters.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TEXT: &str = "eval_report.txt";
pub const GRAD_PROBE_FILE: &str = "grad_probe.json";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Quality-gate settings: which estimator scores images and how many train
/// images the calibration pass samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub estimator: String,
    pub samples: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            estimator: SharpnessEstimator::NAME.to_string(),
            samples: 32,
        }
    }
}

/// Margin-head settings for the classification loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: MarginVariant,
    pub margin: f64,
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let variant = MarginVariant::Cosface;
        LossConfig {
            variant,
            margin: variant.default_margin(),
            scale: variant.default_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch_size: 16 }
    }
}

/// The whole run in one strict document. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
///
/// `seed` feeds the run-level derivations (adapter init, head init, gate
/// calibration); the nested `backbone`, `data`, and `train` sections carry
/// their own seed fields so a config file can pin them independently. The
/// `--seed` flag stamps all of them at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub backbone: ToyBackboneConfig,
    pub injection: InjectionConfig,
    pub gate: GateConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: GenerateConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("petal-run"),
            backbone: ToyBackboneConfig::default(),
            injection: InjectionConfig::default(),
            gate: GateConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: GenerateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Sets the run seed and every nested seed field to `seed`. The
    /// consumers draw from unrelated streams (patch projections, face
    /// geometry, batch shuffling), so sharing the raw value is safe;
    /// run-level derivations namespace themselves through `derive_seed`.
    pub fn stamp_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.backbone.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.injection.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.backbone.image_size != self.data.image_size {
            return Err(PetalError::Config(format!(
                "backbone expects {}px images but the data section generates {}px",
                self.backbone.image_size, self.data.image_size
            )));
        }
        estimator_by_name(&self.gate.estimator)?;
        if self.gate.samples == 0 {
            return Err(PetalError::Config(
                "gate.samples must be at least 1".into(),
            ));
        }
        if !(self.loss.margin.is_finite() && self.loss.margin >= 0.0) {
            return Err(PetalError::Config(format!(
                "loss.margin must be finite and non-negative, got {}",
                self.loss.margin
            )));
        }
        if !(self.loss.scale.is_finite() && self.loss.scale > 0.0) {
            return Err(PetalError::Config(format!(
                "loss.scale must be finite and positive, got {}",
                self.loss.scale
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(PetalError::Config(
                "eval.batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "petal",
    version,
    about = "Quality-gated low-rank adapters for face embeddings at toy scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed; stamps every per-module seed field.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Allow gen-data to write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic benchmark and write its manifest.
    GenData,
    /// Freeze quality statistics from the train split (or explicit scores).
    Calibrate {
        /// Skip image scoring and calibrate on these scores directly.
        #[arg(long, value_delimiter = ',', value_name = "S,S,...")]
        scores: Option<Vec<f64>>,
    },
    /// Fit the configured parameter set on the train split.
    Finetune {
        /// Override train.mode: petalface, single_lora, full_ft, frozen.
        #[arg(long)]
        mode: Option<String>,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed gallery and probes, write retrieval and verification metrics.
    Evaluate {
        /// Adapter checkpoint to load; without it the pristine backbone runs.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// One forward/backward pass; gradient statistics per training mode.
    GradProbe {
        /// Modes to report (default: all four).
        #[arg(long, value_delimiter = ',', value_name = "M,M,...")]
        modes: Vec<String>,
    },
    /// Parameter totals per injection preset at the configured rank.
    ParamCount,
}

/// Entry point for the binary: parses arguments, runs the command, maps
/// errors to exit codes. Clap's own usage failures become exit 1.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

/// Loads the config, applies flag overrides, validates, dispatches.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.stamp_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::Finetune { mode, epochs } = &cli.command {
        if let Some(name) = mode {
            cfg.train.mode = TrainMode::parse(name)?;
        }
        if let Some(epochs) = epochs {
            cfg.train.epochs = *epochs;
            // Keep the schedule legal when the override shortens the run.
            cfg.train.warmup_epochs = match epochs {
                0 => 0,
                n => cfg.train.warmup_epochs.min(n - 1),
            };
        }
    }
    cfg.validate()?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, cli.force),
        Command::Calibrate { scores } => cmd_calibrate(&cfg, scores.as_deref()),
        Command::Finetune { .. } => cmd_finetune(&cfg),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, checkpoint.as_deref()),
        Command::GradProbe { modes } => cmd_grad_probe(&cfg, modes),
        Command::ParamCount => cmd_param_count(&cfg),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|err| {
        PetalError::Config(format!("cannot read config {}: {err}", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|err| {
        PetalError::Config(format!("bad run config {}: {err}", path.display()))
    })
}

/// Creates the output directory and archives the resolved configuration.
fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(cfg.out.join(CONFIG_FILE), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    if !force && cfg.out.is_dir() && fs::read_dir(&cfg.out)?.next().is_some() {
        return Err(PetalError::Config(format!(
            "output directory {} is not empty; pass --force to write into it",
            cfg.out.display()
        )));
    }
    prepare_out_dir(cfg)?;
    let report = generate_benchmark(&cfg.data, &cfg.out)?;
    println!("wrote {}", report.manifest_path.display());
    let counts: Vec<String> = report
        .counts
        .iter()
        .map(|(split, n)| format!("{split}={n}"))
        .collect();
    println!("records: {}", counts.join(" "));
    let q = &report.quality;
    println!(
        "quality: gallery_mean={:.4} probe_mean={:.4} gap={:.4}",
        q.gallery_mean,
        q.probe_mean,
        q.gallery_mean - q.probe_mean
    );
    Ok(())
}

fn cmd_calibrate(cfg: &RunConfig, scores: Option<&[f64]>) -> Result<()> {
    prepare_out_dir(cfg)?;
    let calibration = match scores {
        Some([]) => {
            return Err(PetalError::Config(
                "--scores needs at least one value".into(),
            ))
        }
        Some(scores) => calibration_from_scores(scores, "explicit-scores", cfg.seed),
        None => calibrate_from_manifest(cfg)?,
    };
    let path = cfg.out.join(CALIBRATION_FILE);
    calibration.write_text_file(&path)?;
    println!(
        "calibration: mu={} sigma={} threshold={} l={} estimator={}",
        calibration.mu,
        calibration.sigma,
        calibration.threshold,
        calibration.sample_count,
        calibration.estimator
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let manifest = read_manifest(cfg)?;
    let gate = resolve_calibration(cfg)?;
    println!(
        "calibration: mu={} sigma={} threshold={}",
        gate.mu, gate.sigma, gate.threshold
    );

    let mut model = build_model(cfg, cfg.injection.clone(), gate)?;
    let mut head = fresh_head(cfg, &manifest)?;

    // First-step gradient summary on the exact batch the loop will see.
    if cfg.train.epochs > 0 {
        let probe = grad_probe(
            &model,
            &head,
            &manifest,
            cfg.train.batch_size,
            &[cfg.train.mode],
            cfg.train.seed,
        )?;
        print_grad_line("step0 grad:", &probe.modes[0]);
    }

    // The gate was frozen above (from disk or a fresh pass), so the
    // trainer's own lazy calibration stays off.
    let mut train_cfg = cfg.train.clone();
    train_cfg.calibration_samples = None;
    let report = finetune(&mut model, &mut head, &manifest, &train_cfg)?;

    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    report.checkpoint.write_file(&ckpt_path)?;
    let series_path = cfg.out.join(TRAIN_REPORT_FILE);
    fs::write(
        &series_path,
        serde_json::to_string_pretty(&report.series)? + "\n",
    )?;
    println!(
        "trained: mode={} trainable_params={} head_params={} epochs={}",
        report.series.mode.name(),
        report.series.trainable_params,
        report.series.head_params,
        report.series.epochs
    );
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", series_path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    prepare_out_dir(cfg)?;
    let manifest = read_manifest(cfg)?;
    let model = match checkpoint {
        None => {
            // No checkpoint: score the backbone exactly as pre-trained.
            let pristine = InjectionConfig {
                mode: InjectMode::None,
                ..cfg.injection.clone()
            };
            build_model(cfg, pristine, placeholder_gate(cfg))?
        }
        Some(path) => {
            if !path.is_file() {
                return Err(PetalError::Input(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
            let ckpt = AdapterCheckpoint::read_file(path)?;
            let injection = injection_from_manifest(&ckpt.manifest)?;
            let gate = ckpt
                .manifest
                .calibration
                .clone()
                .unwrap_or_else(|| placeholder_gate(cfg));
            let mut model = build_model(cfg, injection, gate)?;
            model.apply_checkpoint(&ckpt)?;
            apply_base_tensors(&mut model.backbone_mut()?.store, &ckpt)?;
            println!("loaded checkpoint {}", path.display());
            model
        }
    };
    let report = evaluate_model(&model, &manifest, cfg.eval.batch_size)?;
    let json_path = cfg.out.join(EVAL_REPORT_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.to_text_table();
    let text_path = cfg.out.join(EVAL_REPORT_TEXT);
    fs::write(&text_path, &table)?;
    print!("{table}");
    println!("wrote {}", json_path.display());
    println!("wrote {}", text_path.display());
    Ok(())
}

fn cmd_grad_probe(cfg: &RunConfig, mode_args: &[String]) -> Result<()> {
    prepare_out_dir(cfg)?;
    let manifest = read_manifest(cfg)?;
    let gate = resolve_calibration(cfg)?;
    let model = build_model(cfg, cfg.injection.clone(), gate)?;
    let head = fresh_head(cfg, &manifest)?;
    let modes: Vec<TrainMode> = if mode_args.is_empty() {
        TrainMode::ALL.to_vec()
    } else {
        mode_args
            .iter()
            .map(|name| TrainMode::parse(name))
            .collect::<Result<_>>()?
    };
    let report = grad_probe(
        &model,
        &head,
        &manifest,
        cfg.train.batch_size,
        &modes,
        cfg.train.seed,
    )?;
    println!("loss={} batch_size={}", report.loss, report.batch_size);
    for mode in &report.modes {
        print_grad_line("grad:", mode);
    }
    let path = cfg.out.join(GRAD_PROBE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_param_count(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    println!(
        "{:<20} {:>6} {:>5} {:>12} {:>12} {:>8}",
        "preset", "layers", "rank", "base_params", "trainable", "pct"
    );
    for name in InjectionConfig::PRESET_NAMES {
        let mut injection = InjectionConfig::preset(name)?;
        injection.rank = cfg.injection.rank;
        injection.scale = cfg.injection.scale;
        injection.dropout_rate = cfg.injection.dropout_rate;
        injection.mode = cfg.injection.mode;
        let model = build_model(cfg, injection, placeholder_gate(cfg))?;
        let trainable = model.count_trainable()?;
        if trainable != model.closed_form_trainable() {
            return Err(PetalError::Numeric(format!(
                "store walk found {trainable} trainable parameters but the closed \
                 form gives {}; the store is inconsistent",
                model.closed_form_trainable()
            )));
        }
        let total: usize = model
            .store()?
            .iter()
            .map(|(_, entry)| entry.value.len())
            .sum();
        let base = total - trainable;
        println!(
            "{:<20} {:>6} {:>5} {:>12} {:>12} {:>7.3}%",
            name,
            model.injected.len(),
            cfg.injection.rank,
            base,
            trainable,
            100.0 * trainable as f64 / total as f64
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.out.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(PetalError::Manifest(format!(
            "no manifest at {} (run gen-data first)",
            path.display()
        )));
    }
    DatasetManifest::read_file(&path)
}

fn load_split_images(manifest: &DatasetManifest, split: Split) -> Result<Vec<ImageBuf>> {
    manifest
        .split_records(split)
        .map(|record| manifest.load_image(record))
        .collect()
}

/// Scores a seeded sample of the train split, mirroring the trainer's lazy
/// pass: the same seed derivation picks the same images.
fn calibrate_from_manifest(cfg: &RunConfig) -> Result<GateCalibration> {
    let manifest = read_manifest(cfg)?;
    let estimator = estimator_by_name(&cfg.gate.estimator)?;
    let images = load_split_images(&manifest, Split::Train)?;
    calibrate(
        &images,
        estimator.as_ref(),
        cfg.gate.samples,
        derive_seed(cfg.seed, &["calibration"]),
    )
}

/// Loads `calibration.txt` when present; otherwise runs a calibration pass
/// and materializes the file so later commands agree with this run.
fn resolve_calibration(cfg: &RunConfig) -> Result<GateCalibration> {
    let path = cfg.out.join(CALIBRATION_FILE);
    if path.is_file() {
        return GateCalibration::read_text_file(&path);
    }
    let calibration = calibrate_from_manifest(cfg)?;
    calibration.write_text_file(&path)?;
    Ok(calibration)
}

/// Stand-in gate for runs that never consult it (pristine evaluation,
/// parameter counting).
fn placeholder_gate(cfg: &RunConfig) -> GateCalibration {
    GateCalibration {
        mu: 0.5,
        sigma: 0.0,
        threshold: 0.5,
        sample_count: 0,
        estimator: cfg.gate.estimator.clone(),
        seed: cfg.seed,
    }
}

fn build_model(
    cfg: &RunConfig,
    injection: InjectionConfig,
    gate: GateCalibration,
) -> Result<AdaptedModel<f64>> {
    let backbone = ToyBackbone::new(cfg.backbone.clone())?;
    let estimator = estimator_by_name(&cfg.gate.estimator)?;
    inject(backbone, injection, gate, estimator, cfg.seed)
}

/// Fresh classifier head over the manifest's train identities. Seeded on
/// its own derived stream so it never replays backbone or adapter draws.
fn fresh_head(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<MarginHead<f64>> {
    let classes = manifest.split_identities(Split::Train).len();
    if classes == 0 {
        return Err(PetalError::Manifest(
            "manifest has no train identities to fit a head on".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["head"]));
    MarginHead::fresh(
        classes,
        cfg.backbone.embed_dim,
        cfg.loss.variant,
        cfg.loss.margin,
        cfg.loss.scale,
        &mut rng,
    )
}

fn print_grad_line(prefix: &str, mode: &GradProbeMode) {
    println!(
        "{prefix} mode={} params={} max_grad={:.6e} without_head={:.6e} head={:.6e}",
        mode.mode.name(),
        mode.all_trainable.elements,
        mode.all_trainable.max_abs,
        mode.without_head.max_abs,
        mode.head.max_abs
    );
}

/// Rebuilds the injection settings a checkpoint was produced under, so the
/// receiving model matches the recorded digest.
fn injection_from_manifest(manifest: &CheckpointManifest) -> Result<InjectionConfig> {
    let mut sites = BTreeSet::new();
    for name in &manifest.sites {
        sites.insert(Site::parse(name)?);
    }
    Ok(InjectionConfig {
        sites,
        rank: manifest.rank,
        scale: manifest.scale,
        dropout_rate: manifest.dropout_rate,
        mode: InjectMode::parse(&manifest.mode)?,
    })
}
