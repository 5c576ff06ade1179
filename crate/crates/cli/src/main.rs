//! `thtd`: synthesise data, train, infer, evaluate, run ablations, check
//! gradients and print model shapes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use thtd_core::config::{FlatConfig, Profile, RunConfig};
use thtd_core::dataset::Dataset;
use thtd_core::decoder::{Activation, DecoderLayerSpec, Variant};
use thtd_core::gradcheck::run_all;
use thtd_core::io::{
    checkpoint_dtype, export_pgm, read_json, write_ablation_csv, write_json, write_metrics_csv, write_metrics_json, write_training_log,
    Checkpoint, DynTensor, TensorBundle,
};
use thtd_core::metrics::{MetricsReport, SaliencyMap};
use thtd_core::model::{Model, ModelConfig};
use thtd_core::pipeline::{evaluate_predictions, infer_video, parse_variants, resume, run_ablation, TrainState};
use thtd_core::synth::{generate_to, SyntheticSpec};
use thtd_core::{DType, Element};

#[derive(Parser)]
#[command(name = "thtd", version, about = "Video saliency prediction with a high-temporal-dimension decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat JSON configuration; its keys override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper or toy; overrides the `profile` key of --config.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Decoder variant tag.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-blob dataset sized for the configured model.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Predict a saliency map for every frame of every video.
    Infer(InferArgs),
    /// Score predictions or a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Train and score several decoder variants under one budget.
    Ablate(AblateArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the encoder pyramid and decoder trace without allocating weights.
    Shapes(ShapesArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    /// Frames per video; defaults to twice the clip length, at least 16.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 2)]
    blobs: usize,
    #[arg(long, default_value_t = 3.0)]
    blob_sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    step_sigma: f64,
    #[arg(long, default_value_t = 8)]
    fixations: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory; without it the last training video is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Continue from this checkpoint manifest.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write an 8-bit PGM per frame.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Run this checkpoint with sliding windows.
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory written by `infer`.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Comma-separated variant tags; all variants when absent.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ShapesArgs {
    #[command(flatten)]
    common: Common,
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut flat: FlatConfig = match &c.config {
        Some(path) => read_json(path)?,
        None => FlatConfig::default(),
    };
    if c.variant.is_some() {
        flat.variant = c.variant;
    }
    if c.seed.is_some() {
        flat.seed = c.seed;
    }
    if c.dtype.is_some() {
        flat.dtype = c.dtype;
    }
    Ok(RunConfig::from_flat(&flat, c.profile)?)
}

/// Configuration for a command that reads a checkpoint: without --dtype the
/// checkpoint's own element type is used.
fn resolve_for(c: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = resolve(c)?;
    if let (None, Some(path)) = (c.dtype, checkpoint) {
        cfg.train.dtype = checkpoint_dtype(path)?;
    }
    Ok(cfg)
}

/// The model configuration a checkpoint must match, if the user chose one.
fn expected_model<'a>(c: &Common, cfg: &'a RunConfig) -> Option<&'a ModelConfig> {
    (c.config.is_some() || c.profile.is_some() || c.variant.is_some()).then_some(&cfg.model)
}

fn out_dir(c: &Common, default: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn dims(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("×")
}

fn describe(layer: &DecoderLayerSpec) -> String {
    let f = layer.temporal_factor;
    let mut s = String::new();
    if layer.upsample_before > 1 {
        let _ = write!(s, "up×{} ", layer.upsample_before);
    }
    if layer.separable {
        let _ = write!(s, "depthwise {f}×3×3 + pointwise");
    } else {
        let _ = write!(s, "conv {f}×3×3");
    }
    if f > 1 {
        let _ = write!(s, " stride {f}×1×1");
    }
    s.push_str(match layer.activation {
        Activation::Relu => ", relu",
        Activation::Sigmoid => ", sigmoid",
    });
    s
}

/// Text printed by `shapes`.
fn render_shapes(cfg: &RunConfig) -> Result<String> {
    let e = &cfg.model.encoder;
    let sched = cfg.model.schedule()?;
    let trace = sched.trace()?;
    let mut s = String::new();
    writeln!(s, "clip T×H×W×3: {}", dims(&[e.frames, e.height, e.width, 3]))?;
    writeln!(s, "encoder pyramid C×T×H×W:")?;
    for (i, shape) in e.stage_shapes().iter().enumerate() {
        writeln!(s, "  F{} {}", i + 1, dims(shape))?;
    }
    writeln!(s, "fused: {}", dims(&cfg.model.fused_shape()))?;
    writeln!(
        s,
        "decoder {}: {} layers, {} parameters",
        sched.variant,
        sched.layers.len(),
        sched.parameter_count()
    )?;
    writeln!(s, "  input     {}", dims(&trace[0]))?;
    let mut rest = trace[1..].iter();
    if sched.temporal_pool > 1 {
        let pooled = rest.next().expect("pooled entry");
        writeln!(s, "  pool      {}  avg {}×1×1", dims(pooled), sched.temporal_pool)?;
    }
    for (i, (shape, layer)) in rest.zip(&sched.layers).enumerate() {
        writeln!(s, "  layer {:<3} {}  {}", i + 1, dims(shape), describe(layer))?;
    }
    writeln!(s, "output: {}", dims(&sched.output_shape()?))?;
    Ok(s)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let e = &cfg.model.encoder;
    let spec = SyntheticSpec {
        videos: a.videos,
        frames: a.frames.unwrap_or((2 * e.frames).max(16)),
        height: e.height,
        width: e.width,
        blobs: a.blobs,
        blob_sigma: a.blob_sigma,
        step_sigma: a.step_sigma,
        fixations_per_frame: a.fixations,
        seed: cfg.train.seed,
    };
    if spec.frames < e.frames {
        bail!("{} frames per video is fewer than the clip length {}", spec.frames, e.frames);
    }
    let dir = out_dir(&a.common, "data")?;
    let data = generate_to(&spec, &dir)?;
    println!("wrote {} videos of {}×{}×{} to {}", data.len(), spec.frames, spec.height, spec.width, dir.display());
    Ok(())
}

fn split_validation(data: Dataset, val: Option<&Path>) -> Result<(Dataset, Dataset)> {
    if let Some(path) = val {
        return Ok((data, Dataset::load(path)?));
    }
    if data.len() < 2 {
        log::warn!("single training video; validating on the training set");
        let v = data.clone();
        return Ok((data, v));
    }
    let (train, val) = data.split_at(data.len() - 1);
    Ok((train, val))
}

fn train_typed<F: Element>(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (train_set, val_set) = split_validation(data, a.val.as_deref())?;
    let (model, state) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<F>::load(path)?;
            let model = ckpt.current_model(expected_model(&a.common, cfg))?;
            log::info!("resuming from iteration {}", ckpt.state.iteration);
            (model, ckpt.state)
        }
        None => {
            let model = Model::<F>::new(cfg.model.clone(), cfg.train.seed)?;
            let state = TrainState::fresh(&model, &cfg.train);
            (model, state)
        }
    };
    let outcome = resume(model, state, &train_set, &val_set, &cfg.train)?;
    let dir = out_dir(&a.common, "run")?;
    Checkpoint::new(&outcome.model, &cfg.train, outcome.state.clone()).save(&dir.join("checkpoint.json"))?;
    write_training_log(&dir.join("log.csv"), &outcome.log)?;
    write_json(&dir.join("config.json"), &cfg.to_flat())?;
    let s = &outcome.state;
    println!(
        "trained to iteration {}; best validation loss {} at iteration {}; wrote {}",
        s.iteration,
        s.best_val.map_or("n/a".into(), |v| format!("{v:.6}")),
        s.best_iteration.map_or("n/a".into(), |v| v.to_string()),
        dir.display()
    );
    Ok(())
}

fn frame_path(dir: &Path, video: &str, frame: usize) -> PathBuf {
    dir.join(video).join(format!("frame{frame:05}.json"))
}

fn infer_typed<F: Element>(a: &InferArgs, cfg: &RunConfig) -> Result<()> {
    let model = Checkpoint::<F>::load(&a.checkpoint)?.best_model(expected_model(&a.common, cfg))?;
    let data = Dataset::load(&a.data)?;
    let dir = out_dir(&a.common, "predictions")?;
    for v in &data.videos {
        let maps = infer_video(&model, &v.frames, |_| {})?;
        for (t, m) in maps.iter().enumerate() {
            let path = frame_path(&dir, &v.name, t);
            TensorBundle::new()
                .with("saliency", DynTensor::F64(m.to_tensor()))
                .save(&path)?;
            if a.pgm {
                export_pgm(&path.with_extension("pgm"), m)?;
            }
        }
        println!("{}: {} maps", v.name, maps.len());
    }
    Ok(())
}

fn load_predictions(dir: &Path, data: &Dataset, index: usize) -> Result<Vec<SaliencyMap>> {
    let v = &data.videos[index];
    (0..v.len())
        .map(|t| {
            let path = frame_path(dir, &v.name, t);
            let bundle = TensorBundle::load(&path)?;
            let map: thtd_core::Tensor<f64> = bundle.get_as(&path, "saliency")?;
            Ok(SaliencyMap::from_tensor(&map)?)
        })
        .collect()
}

fn eval_typed<F: Element>(a: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let model = match &a.checkpoint {
        Some(p) => Some(Checkpoint::<F>::load(p)?.best_model(expected_model(&a.common, cfg))?),
        None => None,
    };
    let mut reports = Vec::with_capacity(data.len());
    for (i, v) in data.videos.iter().enumerate() {
        let preds = match (&model, &a.predictions) {
            (Some(m), _) => infer_video(m, &v.frames, |_| {})?,
            (None, Some(dir)) => load_predictions(dir, &data, i)?,
            (None, None) => bail!("eval needs --checkpoint or --predictions"),
        };
        reports.push(evaluate_predictions(&data, i, &preds, cfg.train.seed)?);
    }
    let report = MetricsReport::merge(reports);
    let dir = out_dir(&a.common, "eval")?;
    write_metrics_csv(&dir.join("metrics.csv"), &report)?;
    write_metrics_json(&dir.join("metrics.json"), &report)?;
    let m = &report.aggregate;
    let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
    println!(
        "AUC-J {}  SIM {}  S-AUC {}  CC {}  NSS {}  ({} frames, {} without fixations)",
        f(m.auc_j),
        f(m.sim),
        f(m.s_auc),
        f(m.cc),
        f(m.nss),
        report.frames.len(),
        report.skipped_location
    );
    Ok(())
}

fn ablate_typed<F: Element>(a: &AblateArgs, cfg: &RunConfig) -> Result<()> {
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        parse_variants(&a.variants)?
    };
    let data = Dataset::load(&a.data)?;
    let (train_set, val_set) = split_validation(data, a.val.as_deref())?;
    let table = run_ablation::<F>(&cfg.model, &variants, &train_set, &val_set, &train_set, &cfg.train)?;
    let dir = out_dir(&a.common, "ablation")?;
    write_ablation_csv(&dir.join("ablation.csv"), &table)?;
    let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
    println!("{:<14} {:>9} {:>8} {:>8} {:>8} {:>8}", "variant", "params", "cc", "nss", "sim", "auc_j");
    for r in &table.rows {
        println!(
            "{:<14} {:>9} {:>8} {:>8} {:>8} {:>8}",
            r.variant.to_string(),
            r.params,
            f(r.cc),
            f(r.nss),
            f(r.sim),
            f(r.auc_j)
        );
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    if a.common.dtype == Some(DType::F32) {
        bail!("finite-difference checks run in f64; pass --dtype f64 or omit it");
    }
    let outcomes = run_all(a.seeds)?;
    let mut ok = true;
    for o in &outcomes {
        ok &= o.passed();
        println!(
            "{} {:<24} seeds {:>2}  probes {:>5}  max rel error {:.3e}  (tolerance {:.0e})",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.seeds,
            o.checked,
            o.max_rel_error,
            o.tolerance
        );
    }
    Ok(ok)
}

macro_rules! by_dtype {
    ($cfg:expr, $f:ident, $args:expr) => {
        match $cfg.train.dtype {
            DType::F32 => $f::<f32>($args, &$cfg),
            DType::F64 => $f::<f64>($args, &$cfg),
        }
    };
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => {
            let cfg = resolve_for(&a.common, a.resume.as_deref())?;
            by_dtype!(cfg, train_typed, a)?
        }
        Command::Infer(a) => {
            let cfg = resolve_for(&a.common, Some(&a.checkpoint))?;
            by_dtype!(cfg, infer_typed, a)?
        }
        Command::Eval(a) => {
            let cfg = resolve_for(&a.common, a.checkpoint.as_deref())?;
            by_dtype!(cfg, eval_typed, a)?
        }
        Command::Ablate(a) => {
            let cfg = resolve(&a.common)?;
            by_dtype!(cfg, ablate_typed, a)?
        }
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Shapes(a) => print!("{}", render_shapes(&resolve(&a.common)?)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
