//! `amg`: train, calibrate, prune, fine-tune and report on toy vision
//! transformers.
//!
//! Every command writes into `<out-dir>/run-s<seed>-<hash8>` and prints that
//! directory as the last line of stdout.

mod config;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use amg_core::cost::{analytical_cost, instrumented_cost, CostReport};
use amg_core::prune::{self, PruneReport, ScoreProvider};
use amg_core::{checkpoint, criteria, export, train, Dataset, Error, Tensor, VitModel};

use config::{Config, ConfigError, Criterion};
use run::Run;

pub const SCORES_FORMAT: &str = "amg-scores-1";
pub const PRUNE_RUN_FORMAT: &str = "amg-prune-run-1";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Core(Error),
    Io(std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(Error::Config(_) | Error::Checkpoint(_)) => 2,
            CliError::Core(Error::InfeasiblePlan { .. }) => 3,
            CliError::Core(Error::Divergence { .. }) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

#[derive(Parser)]
#[command(name = "amg", version, about = "Attention-map guided ViT pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct PruneFlags {
    #[arg(long)]
    head_rate: Option<f64>,
    #[arg(long)]
    token_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Head pruning iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Token criterion; heads are always scored by entropy.
    #[arg(long)]
    criterion: Option<Criterion>,
    /// Distillation epochs between head pruning iterations.
    #[arg(long)]
    interleave_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline from scratch on the synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Write head and token importance scores.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prune heads and/or tokens.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: PruneFlags,
    },
    /// Fine-tune a pruned model against its teacher.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print and save the cost report of a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write averaged attention maps as CSV.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common, flags: &PruneFlags) -> Result<Config, CliError> {
    let mut c = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(v) = common.seed {
        c.seed = v;
    }
    if let Some(v) = flags.head_rate {
        c.head_rate = v;
    }
    if let Some(v) = flags.token_rate {
        c.token_rate = v;
    }
    if let Some(v) = flags.lambda {
        c.lambda = v;
    }
    if let Some(v) = flags.iterations {
        c.iterations = v;
    }
    if let Some(v) = flags.criterion {
        c.criterion = v;
    }
    if let Some(v) = flags.interleave_epochs {
        c.interleave_epochs = v;
    }
    Ok(c)
}

fn load_model(path: &Path) -> Result<VitModel, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn checkpoint_bytes(model: &VitModel) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    checkpoint::write_checkpoint(model, &mut out)?;
    Ok(out)
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn data_for(c: &Config, model: &VitModel) -> Result<(Dataset, Dataset), CliError> {
    Ok(c.data_spec(&model.spec).generate()?)
}

/// The first `count` images of `data`.
fn calibration_set(data: &Dataset, count: usize) -> Result<Dataset, CliError> {
    let n = count.min(data.len());
    if n == 0 {
        return Err(CliError::Usage("calibration set is empty (train_size or calibration_size is 0)".into()));
    }
    Ok(data.subset(&(0..n).collect::<Vec<_>>())?)
}

fn log_epochs(log: &train::TrainLog) {
    for r in &log.records {
        let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} loss {:.5} train_acc {:.4}{val}", r.epoch, r.loss, r.train_acc);
    }
}

fn cmd_train(common: &Common) -> Result<PathBuf, CliError> {
    let Some(path) = &common.config else {
        return Err(CliError::Usage("train needs --config".into()));
    };
    if !path.exists() {
        return Err(CliError::Usage(format!("config file not found: {}", path.display())));
    }
    let c = load_config(common, &PruneFlags::default())?;
    let mut model = VitModel::init(c.model_spec(), c.seed)?;
    let (tr, va) = data_for(&c, &model)?;
    let mut run = Run::start(&common.out_dir, "train", &c, &[])?;
    let val = (!va.is_empty()).then_some(&va);
    let log = train::train(&mut model, &tr, val, &c.train_config(c.epochs))?;
    log_epochs(&log);
    run.write("model.ckpt", &checkpoint_bytes(&model)?)?;
    run.write("train_log.jsonl", log.to_jsonl().as_bytes())?;
    run.finish()
}

#[derive(Serialize)]
struct ScoresFile {
    format: String,
    samples: usize,
    mean_entropy_per_layer: Vec<f64>,
    heads: Vec<criteria::ImportanceScore>,
    tokens: Vec<criteria::ImportanceScore>,
}

fn cmd_calibrate(common: &Common, ckpt: &Path) -> Result<PathBuf, CliError> {
    let c = load_config(common, &PruneFlags::default())?;
    let model = load_model(ckpt)?;
    let (tr, _) = data_for(&c, &model)?;
    let calib = calibration_set(&tr, c.calibration_size)?;
    let pc = c.prune_config();
    let mut run = Run::start(&common.out_dir, "calibrate", &c, &[ckpt])?;
    let capture = criteria::calibrate(&model, &calib, pc.calibration_batch)?;
    let heads = prune::weight_scores(&criteria::head_scores(&capture, pc.entropy_mode)?, pc.lambda)?;
    let tokens = prune::weight_scores(&prune::score_tokens(&model, &calib, &pc)?, pc.lambda)?;
    let file = ScoresFile {
        format: SCORES_FORMAT.into(),
        samples: calib.len(),
        mean_entropy_per_layer: criteria::mean_entropy_per_layer(&capture)?,
        heads,
        tokens,
    };
    let all: Vec<_> = file.heads.iter().chain(&file.tokens).cloned().collect();
    run.write("scores.json", &json(&file))?;
    run.write("scores.csv", export::scores_csv(&all).as_bytes())?;
    run.finish()
}

/// Entropy head scores, with optional distillation from the unpruned model
/// between iterations.
struct InterleavedScorer<'a> {
    calib: &'a Dataset,
    train: &'a Dataset,
    teacher: &'a VitModel,
    config: &'a Config,
}

impl ScoreProvider for InterleavedScorer<'_> {
    fn scores(&mut self, model: &VitModel) -> amg_core::Result<Vec<criteria::ImportanceScore>> {
        let capture = criteria::calibrate(model, self.calib, self.config.calibration_batch)?;
        criteria::head_scores(&capture, self.config.entropy_mode.0)
    }

    fn after_step(&mut self, model: &mut VitModel, step: usize) -> amg_core::Result<()> {
        if self.config.interleave_epochs == 0 {
            return Ok(());
        }
        let cfg = train::TrainConfig {
            seed: self.config.seed.wrapping_add(step as u64 + 1),
            ..self.config.train_config(self.config.interleave_epochs)
        };
        let log = train::finetune(model, self.teacher, self.train, None, &cfg)?;
        log_epochs(&log);
        Ok(())
    }
}

#[derive(Serialize)]
struct PruneRunReport {
    format: String,
    criterion: String,
    calibration_samples: usize,
    heads: Option<PruneReport>,
    tokens: Option<PruneReport>,
}

fn cmd_prune(common: &Common, ckpt: &Path, flags: &PruneFlags) -> Result<PathBuf, CliError> {
    let c = load_config(common, flags)?;
    let mut model = load_model(ckpt)?;
    let pc = c.prune_config();
    pc.validate(model.spec.layers())?;
    let (tr, _) = data_for(&c, &model)?;
    let calib = calibration_set(&tr, c.calibration_size)?;
    let mut run = Run::start(&common.out_dir, "prune", &c, &[ckpt])?;
    let original = model.clone();
    let cost_before = analytical_cost(&model.spec)?;

    let heads = if c.head_rate > 0.0 {
        let mut scorer = InterleavedScorer { calib: &calib, train: &tr, teacher: &original, config: &c };
        Some(prune::execute_head_plan(&mut model, &mut scorer, &pc)?)
    } else {
        None
    };
    let tokens = if c.token_rate > 0.0 {
        let scores = prune::score_tokens(&model, &calib, &pc)?;
        Some(prune::execute_token_plan(&mut model, &scores, &pc)?)
    } else {
        None
    };
    let cost_after = analytical_cost(&model.spec)?;
    eprintln!(
        "heads {} -> {}, MSA params {} -> {}",
        cost_before.totals.heads, cost_after.totals.heads, cost_before.totals.msa_params, cost_after.totals.msa_params
    );

    let report = PruneRunReport {
        format: PRUNE_RUN_FORMAT.into(),
        criterion: c.criterion.to_string(),
        calibration_samples: calib.len(),
        heads,
        tokens,
    };
    run.write("pruned.ckpt", &checkpoint_bytes(&model)?)?;
    run.write("prune_report.json", &json(&report))?;
    run.write("cost_before.json", cost_before.to_json().as_bytes())?;
    run.write("cost_after.json", cost_after.to_json().as_bytes())?;
    run.finish()
}

fn cmd_finetune(common: &Common, ckpt: &Path, teacher: &Path, epochs: Option<usize>) -> Result<PathBuf, CliError> {
    let c = load_config(common, &PruneFlags::default())?;
    let mut student = load_model(ckpt)?;
    let teacher_model = load_model(teacher)?;
    let (tr, va) = data_for(&c, &student)?;
    let mut run = Run::start(&common.out_dir, "finetune", &c, &[ckpt, teacher])?;
    let val = (!va.is_empty()).then_some(&va);
    let cfg = c.train_config(epochs.unwrap_or(c.finetune_epochs));
    let log = train::finetune(&mut student, &teacher_model, &tr, val, &cfg)?;
    log_epochs(&log);
    if let Some(va) = val {
        let t = train::evaluate(&teacher_model, va, c.batch_size)?;
        let s = train::evaluate(&student, va, c.batch_size)?;
        eprintln!("val_acc teacher {t:.4} student {s:.4}");
    }
    run.write("finetuned.ckpt", &checkpoint_bytes(&student)?)?;
    run.write("finetune_log.jsonl", log.to_jsonl().as_bytes())?;
    run.finish()
}

fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("layer,heads,tokens,kv_tokens,msa_params,msa_flops_analytical,msa_flops_instrumented\n");
    for l in &report.layers {
        let inst = l.msa_flops_instrumented.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{inst}\n",
            l.layer, l.heads, l.tokens, l.kv_tokens, l.msa_params, l.msa_flops_analytical
        ));
    }
    out
}

fn cmd_report(common: &Common, ckpt: &Path) -> Result<PathBuf, CliError> {
    let c = load_config(common, &PruneFlags::default())?;
    let model = load_model(ckpt)?;
    let s = &model.spec;
    let probe = Tensor::zeros(vec![1, s.channels, s.image_size, s.image_size]);
    let report = instrumented_cost(&model, &probe)?;
    let mut run = Run::start(&common.out_dir, "report", &c, &[ckpt])?;
    println!("{}", report.render_table());
    run.write("cost.json", report.to_json().as_bytes())?;
    run.write("cost.csv", cost_csv(&report).as_bytes())?;
    run.finish()
}

fn cmd_export_attn(common: &Common, ckpt: &Path) -> Result<PathBuf, CliError> {
    let c = load_config(common, &PruneFlags::default())?;
    let model = load_model(ckpt)?;
    let (tr, _) = data_for(&c, &model)?;
    let samples = calibration_set(&tr, c.export_samples)?;
    let mut run = Run::start(&common.out_dir, "export-attn", &c, &[ckpt])?;
    let capture = criteria::calibrate(&model, &samples, c.calibration_batch)?;
    run.write("attention.csv", export::attention_csv(&capture)?.as_bytes())?;
    run.finish()
}

fn dispatch(cli: Cli) -> Result<PathBuf, CliError> {
    match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Calibrate { common, checkpoint } => cmd_calibrate(common, checkpoint),
        Command::Prune { common, checkpoint, flags } => cmd_prune(common, checkpoint, flags),
        Command::Finetune { common, checkpoint, teacher, epochs } => {
            cmd_finetune(common, checkpoint, teacher, *epochs)
        }
        Command::Report { common, checkpoint } => cmd_report(common, checkpoint),
        Command::ExportAttn { common, checkpoint } => cmd_export_attn(common, checkpoint),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("amg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
