//! Command-line front end: dataset generation, heatmap previews, training,
//! evaluation and the modality ablation.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, config or paths),
//! 2 numerical failure during training or evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use trimodal_core::dataset::{generate_dataset, Dataset, GeneratorSpec, Split};
use trimodal_core::fusion::ModalityMask;
use trimodal_core::heatmap::{load_keypoints, reduce_heatmap, render_heatmap, write_pgm};
use trimodal_core::numerics::save_tensor;
use trimodal_core::trainer::{ablate, evaluate, train, RunConfig};
use trimodal_core::Error;

#[derive(Debug, Parser)]
#[command(name = "trimodal", version, about = "Pose-gated video/text action recognition on synthetic clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic motion dataset.
    Gen(GenArgs),
    /// Render reduced pose heatmaps for a keypoint file.
    Heatmap(HeatmapArgs),
    /// Train a model and write report.json plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Retrain under each modality mask and tabulate test accuracy.
    Ablate(TrainArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator JSON (schema_version, classes, clips_per_class, test_per_class, frames, height, width, seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for manifest.json and clips/.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub schema_version: u32,
    pub keypoints: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            keypoints: None,
            height: 32,
            width: 32,
            sigma: 2.0,
        }
    }
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Heatmap JSON (schema_version, keypoints, height, width, sigma).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keypoint JSON: a list of frames, each a list of 18 [x, y, confidence] triples.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Output directory for frame_NNN.{bin,json,pgm}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run JSON; every field is optional and defaults apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root (overrides the config's `dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated subset of video,pose,text.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// Weight-initialization seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Shuffling, sampling and augmentation seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub tau_saliency: Option<f64>,
    #[arg(long)]
    pub tau_loss: Option<f64>,
    /// Pool and score with the ungated frame embeddings.
    #[arg(long)]
    pub ungated_pooling: bool,
    /// Encode pose images with the frame encoder's weights.
    #[arg(long)]
    pub share_vision_weights: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub schema_version: u32,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: Split,
    pub modalities: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            checkpoint: None,
            dataset: None,
            split: Split::Test,
            modalities: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Eval JSON (schema_version, checkpoint, dataset, split, modalities).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    pub split: Option<Split>,
    /// Comma-separated subset of video,pose,text; defaults to the trained modalities.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// Output directory for eval.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::User(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", p.display())))
        }
    }
}

fn check_schema(version: u32, what: &str) -> CliResult<()> {
    if version != 1 {
        return Err(CliError::User(format!("{what} schema_version {version} unsupported (expected 1)")));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let mut spec: GeneratorSpec = read_config(args.config.as_deref())?;
    if let Some(v) = args.classes {
        spec.classes = v.into_iter().map(|c| c.trim().to_string()).collect();
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { spec.$field = v; })*};
    }
    set!(clips_per_class, test_per_class, frames, height, width, seed);
    let manifest = generate_dataset(&spec, &args.out)?;
    println!(
        "wrote {} train + {} test clips ({} classes) to {}",
        manifest.train.len(),
        manifest.test.len(),
        manifest.classes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> CliResult<()> {
    let mut cfg: HeatmapConfig = read_config(args.config.as_deref())?;
    check_schema(cfg.schema_version, "heatmap config")?;
    if args.keypoints.is_some() {
        cfg.keypoints = args.keypoints;
    }
    cfg.height = args.height.unwrap_or(cfg.height);
    cfg.width = args.width.unwrap_or(cfg.width);
    cfg.sigma = args.sigma.unwrap_or(cfg.sigma);
    let path = cfg
        .keypoints
        .ok_or_else(|| CliError::User("no keypoint file given (--keypoints)".into()))?;
    let frames = load_keypoints(&path)?;
    create_dir(&args.out)?;
    for (i, kf) in frames.iter().enumerate() {
        let reduced = reduce_heatmap(&render_heatmap(kf, cfg.height, cfg.width, cfg.sigma)?)?;
        save_tensor(args.out.join(format!("frame_{i:03}")), &reduced)?;
        write_pgm(&args.out.join(format!("frame_{i:03}.pgm")), &reduced)?;
    }
    println!("wrote {} heatmaps to {}", frames.len(), args.out.display());
    Ok(())
}

fn run_config(args: &TrainArgs) -> CliResult<(RunConfig, Dataset)> {
    let mut cfg: RunConfig = read_config(args.config.as_deref())?;
    if args.dataset.is_some() {
        cfg.dataset = args.dataset.clone();
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field.clone() { cfg.$field = v; })*};
    }
    set!(epochs, batch_size, learning_rate, weight_decay, modalities, tau_saliency, tau_loss);
    if let Some(s) = args.init_seed {
        cfg.seeds.init = s;
    }
    if let Some(s) = args.data_seed {
        cfg.seeds.data = s;
    }
    cfg.ungated_pooling |= args.ungated_pooling;
    cfg.share_vision_weights |= args.share_vision_weights;
    cfg.validate()?;
    let root = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::User("no dataset given (--dataset or config `dataset`)".into()))?;
    let data = Dataset::load(&root)?;
    Ok((cfg, data))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let (cfg, data) = run_config(&args)?;
    let (report, _) = train(&cfg, &data, Some(&args.out))?;
    print!("{}", report.to_table());
    println!("wall time {:.1}s; report in {}", report.wall_time_secs, args.out.display());
    if let Some(reason) = report.early_stop {
        return Err(CliError::Numerical(format!("training stopped early: {reason}")));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let mut cfg: EvalConfig = read_config(args.config.as_deref())?;
    check_schema(cfg.schema_version, "eval config")?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    if args.dataset.is_some() {
        cfg.dataset = args.dataset;
    }
    if let Some(s) = args.split {
        cfg.split = s;
    }
    if args.modalities.is_some() {
        cfg.modalities = args.modalities;
    }
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::User("no checkpoint given (--checkpoint)".into()))?;
    let root = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::User("no dataset given (--dataset)".into()))?;
    let mask = cfg.modalities.as_deref().map(ModalityMask::from_names).transpose()?;
    let data = Dataset::load(&root)?;
    let acc = evaluate(&checkpoint, &data, cfg.split, mask)?;
    create_dir(&args.out)?;
    let body = serde_json::json!({
        "checkpoint": checkpoint,
        "dataset": root,
        "split": cfg.split,
        "modalities": mask.map(|m| m.label()),
        "top1": acc,
    });
    write_text(&args.out.join("eval.json"), &serde_json::to_string_pretty(&body).expect("json value"))?;
    println!("top-1 accuracy {acc:.4}");
    Ok(())
}

fn cmd_ablate(args: TrainArgs) -> CliResult<()> {
    let (cfg, data) = run_config(&args)?;
    let table = ablate(&cfg, &data, Some(&args.out))?;
    print!("{}", table.to_text());
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let (CliError::User(msg) | CliError::Numerical(msg)) = &e;
            eprintln!("error: {msg}");
            e.exit_code()
        }
    }
}
