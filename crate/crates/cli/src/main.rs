//! `platesr`: dataset preparation, training, super-resolution, evaluation
//! and the forced-choice study service.

mod config;
mod manifest;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use platesr::data::{self, LoadOptions, Origin, PairedDataset, PlateSpec, SplitRule};
use platesr::denoiser::read_checkpoint;
use platesr::diffusion::super_resolve_batch;
use platesr::metrics::{evaluate_directories, SsimParams};
use platesr::trainer::{self, checkpoint_schedule, sampling_denoiser, Trainer};
use platesr::ImageTensor;
use platesr_study::{build_bundle, StudyBundle, StudyStore};

use config::{DenoiserSection, FileConfig, ScheduleSection};
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] platesr::Error),
    #[error(transparent)]
    Study(#[from] platesr_study::StudyError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "pipeline",
            Self::Study(e) => e.code(),
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }
}

#[derive(Parser)]
#[command(name = "platesr", version, about = "Diffusion x4 super-resolution for license-plate images")]
struct Cli {
    /// TOML file with [train], [denoiser] and [schedule] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair HR images with bicubic LR copies and split them.
    Prepare(PrepareArgs),
    /// Render a synthetic plate corpus.
    Synth(SynthArgs),
    /// Train the denoiser on a prepared dataset.
    Train(TrainArgs),
    /// Super-resolve LR images with a checkpoint.
    Sr(SrArgs),
    /// Score method outputs against ground truth.
    Eval(EvalArgs),
    /// Export a forced-choice study bundle.
    BundleStudy(BundleArgs),
    /// Run the study HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Serialize)]
struct PrepareArgs {
    hr_dir: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, conflicts_with = "train_count")]
    split_ratio: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = data::HR_SIDE)]
    side: usize,
    /// Mark the images as synthetic in the manifest.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Default)]
struct TrainArgs {
    dataset_dir: PathBuf,
    out_dir: PathBuf,
    /// Continue from a state checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    /// Disable rotation augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Args, Serialize)]
struct SrArgs {
    checkpoint: PathBuf,
    /// An LR PNG or a directory of them.
    input: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save every n-th intermediate state under `trace/<id>/`.
    #[arg(long)]
    trace_stride: Option<usize>,
    /// Images sampled together.
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    gt_dir: PathBuf,
    /// `name=dir`, repeatable.
    #[arg(long = "method", value_parser = parse_method, required = true)]
    methods: Vec<(String, PathBuf)>,
    /// Method the improvements are computed for; defaults to the first.
    #[arg(long)]
    ours: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct BundleArgs {
    gt_dir: PathBuf,
    /// `name=dir`, exactly three.
    #[arg(long = "method", value_parser = parse_method, required = true)]
    methods: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 11)]
    questions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    out_dir: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PLATESR_BUNDLE")]
    bundle: PathBuf,
    /// Where sessions.jsonl and choices.jsonl live.
    #[arg(long, env = "PLATESR_STUDY_DATA")]
    data_dir: PathBuf,
    #[arg(long, env = "PLATESR_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Deterministic session ids and orders, for testing.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_method(raw: &str) -> Result<(String, PathBuf), String> {
    match raw.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected name=dir, got {raw:?}")),
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn prepare(args: PrepareArgs) -> Result<(), CliError> {
    let opts = LoadOptions {
        split: match (args.split_ratio, args.train_count) {
            (_, Some(n)) => SplitRule::TrainCount(n),
            (Some(r), None) => SplitRule::Ratio(r),
            (None, None) => LoadOptions::default().split,
        },
        split_seed: args.seed,
        factor: args.factor,
        origin: if args.synthetic { Origin::Synthetic } else { Origin::Real },
        side: args.side,
    };
    let run = RunManifest::start("prepare", &args)?.seed("split", args.seed).input(&args.hr_dir);
    let (dataset, report) = data::load_dataset(&args.hr_dir, &opts)?;
    let manifest = dataset.write(&args.out_dir)?;
    let train = manifest.samples.iter().filter(|e| e.split == data::Split::Train).count();
    log::info!(
        "{train} train / {} test, {} skipped, {} resized",
        manifest.samples.len() - train,
        report.skipped.len(),
        report.resized.len()
    );
    let out = &args.out_dir;
    run.finish(out, vec![out.join("hr"), out.join("lr"), out.join(data::MANIFEST_FILE)])?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let run = RunManifest::start("synth", &args)?.seed("corpus", args.seed);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let mut outputs = Vec::with_capacity(args.count);
    for (id, img) in data::synth_corpus(args.count, args.seed, &PlateSpec::default()) {
        let path = args.out_dir.join(format!("{id}.png"));
        img.save_png(&path)?;
        outputs.push(path);
    }
    run.finish(&args.out_dir, outputs)?;
    Ok(())
}

fn train(args: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut cfg = file.train_config()?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(epochs => epochs, batch_size => batch_size, lr => base_lr, warmup_steps => warmup_steps,
         ema_decay => ema_decay, seed => seed, checkpoint_every => checkpoint_every);
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if args.crop_size.is_some() {
        cfg.crop_size = args.crop_size;
    }
    if args.no_augment {
        cfg.augment_angles.clear();
    }
    let dataset = PairedDataset::read(&args.dataset_dir)?;
    let samples: Vec<_> = dataset.train().into_iter().cloned().collect();
    let (mut trainer, denoiser, schedule) = match &args.resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            let schedule = checkpoint_schedule(&ck)?;
            let denoiser = ck.config.clone();
            (Trainer::resume(cfg.clone(), &ck, schedule.clone(), samples)?, denoiser, schedule)
        }
        None => {
            let flags = DenoiserSection {
                preset: args.preset.clone(),
                ..Default::default()
            };
            let section = file.denoiser.overlay(&flags);
            let sched_section = file.schedule.overlay(&ScheduleSection {
                timesteps: args.timesteps,
                ..Default::default()
            });
            let preset_steps = section.resolve(None)?.num_timesteps;
            let t = sched_section.timesteps.unwrap_or(preset_steps);
            let denoiser = section.resolve(Some(t))?;
            let schedule = sched_section.build(t)?;
            (Trainer::new(cfg.clone(), denoiser.clone(), schedule.clone(), samples)?, denoiser, schedule)
        }
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        train: &'a trainer::TrainConfig,
        denoiser: &'a platesr::DenoiserConfig,
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
        resume: &'a Option<PathBuf>,
    }
    let betas = schedule.betas();
    let resolved = Resolved {
        train: &cfg,
        denoiser: &denoiser,
        timesteps: schedule.timesteps(),
        beta_start: betas[0],
        beta_end: betas[betas.len() - 1],
        resume: &args.resume,
    };
    let run = RunManifest::start("train", &resolved)?
        .seed("train", cfg.seed)
        .seed("denoiser_init", denoiser.seed)
        .seed("split", dataset.split_seed)
        .input(&args.dataset_dir);
    let outcome = trainer::run_training(&mut trainer, Some(&args.out_dir))?;
    if let Some(last) = outcome.log.steps.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.loss);
    }
    let mut outputs = outcome.checkpoints;
    outputs.push(args.out_dir.join(trainer::TRAIN_LOG_FILE));
    run.finish(&args.out_dir, outputs)?;
    Ok(())
}

fn sr(args: SrArgs) -> Result<(), CliError> {
    if args.batch == 0 {
        return Err(CliError::Config("--batch must be at least 1".into()));
    }
    let ck = read_checkpoint(&args.checkpoint)?;
    let model = sampling_denoiser(&ck)?;
    let schedule = checkpoint_schedule(&ck)?;
    let inputs = if args.input.is_dir() {
        png_files(&args.input)?
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(CliError::Config(format!("no PNG images in {}", args.input.display())));
    }
    let run = RunManifest::start("sr", &args)?
        .seed("sampling", args.seed)
        .input(&args.checkpoint)
        .input(&args.input);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let mut outputs = Vec::new();
    for (chunk_index, chunk) in inputs.chunks(args.batch).enumerate() {
        let lr = chunk.iter().map(ImageTensor::load_png).collect::<platesr::Result<Vec<_>>>()?;
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(args.seed);
                r.set_stream((chunk_index * args.batch + i) as u64);
                r
            })
            .collect();
        let (images, traces) = super_resolve_batch(&model, &lr, &schedule, &mut rngs, args.trace_stride)?;
        for (k, (path, img)) in chunk.iter().zip(&images).enumerate() {
            let id = stem(path);
            let out = args.out_dir.join(format!("{id}.png"));
            img.save_png(&out)?;
            outputs.push(out);
            if let Some(trace) = traces.get(k) {
                let dir = args.out_dir.join("trace").join(&id);
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                for (t, frame) in &trace.steps {
                    let p = dir.join(format!("t{t:04}.png"));
                    frame.save_png(&p)?;
                    outputs.push(p);
                }
            }
        }
        log::info!("{} / {} images done", outputs.len().min(inputs.len()), inputs.len());
    }
    run.finish(&args.out_dir, outputs)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let run = RunManifest::start("eval", &args)?.input(&args.gt_dir);
    let report = evaluate_directories(&args.gt_dir, &args.methods, args.ours.as_deref(), &SsimParams::default())?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let (csv, json) = (args.out_dir.join("report.csv"), args.out_dir.join("report.json"));
    report.write(&csv, &json)?;
    print!("{}", report.render());
    run.finish(&args.out_dir, vec![csv, json])?;
    Ok(())
}

fn bundle_study(args: BundleArgs) -> Result<(), CliError> {
    let methods: [(String, PathBuf); 3] = args
        .methods
        .clone()
        .try_into()
        .map_err(|m: Vec<_>| CliError::Config(format!("a 3-AFC bundle needs exactly 3 methods, got {}", m.len())))?;
    let run = RunManifest::start("bundle-study", &args)?.seed("selection", args.seed).input(&args.gt_dir);
    let bundle = build_bundle(&args.gt_dir, &methods, args.questions, args.seed, &args.out_dir)?;
    let out = &args.out_dir;
    run.finish(
        out,
        vec![out.join(platesr_study::bundle::QUESTIONS_FILE), bundle.images_dir()],
    )?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let bundle = StudyBundle::load(&args.bundle)?;
    let store = Arc::new(StudyStore::open(bundle, &args.data_dir, args.seed)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(platesr_study::server::serve(store, args.addr))
        .map_err(|e| CliError::io(args.addr.to_string(), e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, &file),
        Command::Sr(a) => sr(a),
        Command::Eval(a) => eval(a),
        Command::BundleStudy(a) => bundle_study(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
