use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crwn::datasets::{verify_files, FileStatus, CIFAR100_FILES, MNIST_FILES};
use crwn::harness::{
    ablate_modulation, evaluate, load_source, run_continual, write_artifacts, ExperimentConfig,
    Seeds, TaskSource,
};
use crwn::nets::{Model, TrainMode};
use crwn::neuromod::{read_checkpoint, write_atomic};
use crwn::{CrwnError, Precision, Scalar};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

/// Configurable random weight networks: continual-learning experiments.
#[derive(Parser)]
#[command(name = "crwn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all tasks in sequence and write run artifacts.
    Train(RunArgs),
    /// Evaluate stored task contexts from a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate only this task id.
        #[arg(long)]
        task: Option<u32>,
    },
    /// Run the same experiment with and without the shared gain.
    Ablate(RunArgs),
    /// Print per-task parameter counts for the configured model.
    Paramcount(RunArgs),
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Check presence, size and checksums of dataset files.
    Verify {
        #[arg(long, env = "CRWN_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = VerifySet::All)]
        source: VerifySet,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifySet {
    Mnist,
    Cifar100,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Both,
    Local,
    Pretrained,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(short = 'c', long = "config")]
    config: PathBuf,
    /// Sets the model, data and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long, env = "CRWN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Config file layout: the experiment plus where to read and write.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    experiment: ExperimentConfig,
    #[serde(default)]
    precision: Precision,
    #[serde(default = "default_data_dir")]
    data_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

/// Exit code for a library error raised while doing `stage` work.
fn classify(stage: u8) -> impl Fn(CrwnError) -> Failure {
    move |e| {
        let code = match &e {
            CrwnError::Config(_) => EXIT_CONFIG,
            CrwnError::Incompatible { .. } => EXIT_CHECKPOINT,
            _ => stage,
        };
        Failure::new(code, e)
    }
}

fn load_config(args: &RunArgs) -> Result<CliConfig, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", args.config.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: CliConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Failure::new(
            EXIT_CONFIG,
            format!("{}: at `{path}`: {}", args.config.display(), e.inner()),
        )
    })?;
    if let Some(seed) = args.seed {
        cfg.experiment.seeds = Seeds::all(seed);
    }
    if let Some(n) = args.tasks {
        cfg.experiment.tasks.set_len(n);
    }
    if let Some(dir) = &args.data_dir {
        cfg.data_dir = dir.clone();
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = args.mode {
        cfg.experiment.mode = match mode {
            ModeArg::Both => TrainMode::LocalGlobal,
            ModeArg::Local => TrainMode::LocalOnly,
            ModeArg::Pretrained => TrainMode::Pretrained,
        };
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.experiment
        .validate()
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    cfg.experiment
        .tasks
        .task_specs(cfg.experiment.seeds.data)
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    Ok(cfg)
}

/// Prints a line to stdout; a closed pipe ends the process quietly.
macro_rules! out {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))?
    };
}

fn emit(line: std::fmt::Arguments<'_>) -> Result<(), Failure> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{line}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(Failure::new(1, e)),
    }
}

fn source(cfg: &CliConfig) -> Result<impl TaskSource, Failure> {
    load_source(&cfg.experiment, &cfg.data_dir).map_err(|e| {
        Failure::new(
            EXIT_DATA,
            format!("cannot load data from {}: {e}", cfg.data_dir.display()),
        )
    })
}

fn train<T: Scalar>(cfg: &CliConfig) -> Result<(), Failure> {
    let src = source(cfg)?;
    let run = run_continual::<T>(&cfg.experiment, &src, None).map_err(classify(1))?;
    write_artifacts(&cfg.out_dir, cfg, &run).map_err(classify(1))?;
    let m = &run.metrics;
    out!(
        "acc {:.4}  forgetting {}  params/task {}  tasks {}",
        m.acc,
        m.forgetting,
        m.params_per_task,
        m.task_ids.len()
    );
    out!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn eval<T: Scalar>(cfg: &CliConfig, checkpoint: &Path, only: Option<u32>) -> Result<(), Failure> {
    let store = read_checkpoint::<T>(checkpoint).map_err(|e| {
        Failure::new(EXIT_CHECKPOINT, format!("{}: {e}", checkpoint.display()))
    })?;
    let mut experiment = cfg.experiment.clone();
    let highest = store.task_ids().max().unwrap_or(0) as usize + 1;
    if highest > experiment.tasks.len() {
        experiment.tasks.set_len(highest);
    }
    let mut model = Model::<T>::build(experiment.model_spec()).map_err(classify(EXIT_CONFIG))?;
    store
        .ensure_compatible(model.fingerprint())
        .map_err(|e| Failure::new(EXIT_CHECKPOINT, e))?;
    if let Some(bases) = store.trained_bases() {
        model
            .load_bases(bases)
            .map_err(|e| Failure::new(EXIT_CHECKPOINT, e))?;
    }
    let ids: Vec<u32> = match only {
        Some(t) if !store.contains(t) => {
            return Err(Failure::new(
                EXIT_CHECKPOINT,
                format!("checkpoint has no context for task {t}"),
            ))
        }
        Some(t) => vec![t],
        None => store.task_ids().collect(),
    };
    let adjusted = CliConfig {
        experiment,
        ..cfg.clone()
    };
    let src = source(&adjusted)?;
    out!("task,accuracy");
    for id in ids {
        let index = src
            .tasks()
            .iter()
            .position(|s| s.task_id == id)
            .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("config defines no task {id}")))?;
        let test = src.test(index).map_err(classify(EXIT_DATA))?;
        let acc = evaluate(&model, &store, id, &test, adjusted.experiment.eval_batch)
            .map_err(classify(1))?;
        out!("{id},{acc}");
    }
    Ok(())
}

fn ablate<T: Scalar>(cfg: &CliConfig) -> Result<(), Failure> {
    let src = source(cfg)?;
    let report = ablate_modulation::<T>(&cfg.experiment, &src).map_err(classify(1))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::new(1, e))?;
    write_atomic(&cfg.out_dir.join("ablation.csv"), report.to_csv().as_bytes())
        .map_err(classify(1))?;
    let summary = serde_json::json!({
        "acc_local_global": report.local_global.acc,
        "acc_local_only": report.local_only.acc,
        "delta_pp": report.delta_pp(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("json");
    write_atomic(&cfg.out_dir.join("ablation.json"), text.as_bytes()).map_err(classify(1))?;
    out!("{text}");
    Ok(())
}

fn paramcount(cfg: &CliConfig) -> Result<(), Failure> {
    let model = Model::<f32>::build(cfg.experiment.model_spec()).map_err(classify(EXIT_CONFIG))?;
    let per_task = model.params_per_task();
    let basis = model.basis_params();
    let tasks = cfg.experiment.tasks.len();
    let summary = serde_json::json!({
        "params_per_task": per_task,
        "layer_dims": model.layer_dims(),
        "basis_params": basis,
        "pretrained_params_per_task": per_task as f64 + basis as f64 / tasks as f64,
    });
    out!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn verify(data_dir: &Path, set: VerifySet) -> Result<(), Failure> {
    let mut files = Vec::new();
    if matches!(set, VerifySet::Mnist | VerifySet::All) {
        files.extend(MNIST_FILES);
    }
    if matches!(set, VerifySet::Cifar100 | VerifySet::All) {
        files.extend(CIFAR100_FILES);
    }
    let reports = verify_files(data_dir, &files).map_err(classify(EXIT_DATA))?;
    let mut bad = 0;
    for r in &reports {
        let line = match &r.status {
            FileStatus::Ok => "ok".to_string(),
            FileStatus::Missing => "missing".to_string(),
            FileStatus::WrongSize { found } => format!("wrong size ({found} bytes)"),
            FileStatus::WrongChecksum { found } => format!("checksum mismatch ({found})"),
        };
        if r.status != FileStatus::Ok {
            bad += 1;
        }
        out!("{}: {line}", r.path.display());
    }
    if bad > 0 {
        return Err(Failure::new(
            EXIT_DATA,
            format!("{bad} of {} dataset files failed verification", reports.len()),
        ));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg),
                Precision::F64 => train::<f64>(&cfg),
            }
        }
        Command::Eval {
            run,
            checkpoint,
            task,
        } => {
            let cfg = load_config(&run)?;
            match cfg.precision {
                Precision::F32 => eval::<f32>(&cfg, &checkpoint, task),
                Precision::F64 => eval::<f64>(&cfg, &checkpoint, task),
            }
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            match cfg.precision {
                Precision::F32 => ablate::<f32>(&cfg),
                Precision::F64 => ablate::<f64>(&cfg),
            }
        }
        Command::Paramcount(args) => paramcount(&load_config(&args)?),
        Command::Dataset {
            command: DatasetCommand::Verify { data_dir, source },
        } => verify(&data_dir, source),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
