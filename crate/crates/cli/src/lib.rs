//! Command-line front end: protocols, datasets, training, evaluation and the
//! comparison benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
//! (including divergence), 4 I/O failure.

pub mod config;
pub mod store;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qsamp_core::checkpoint::{load_checkpoint, save_checkpoint};
use qsamp_core::experiment::{bench_csv, cell_means, run_matrix};
use qsamp_core::metrics::{render_table, summarize, summary_csv_row, MetricsSummary, SUMMARY_CSV_HEADER};
use qsamp_core::phantom::{make_dataset, DatasetSpec, PhantomConfig, Split};
use qsamp_core::sphere::{
    electrostatic_protocol, random_protocol, read_protocol, write_protocol,
    DEFAULT_ELECTROSTATIC_ITERATIONS,
};
use qsamp_core::train::{curve_csv, evaluate, train_joint_with, EvalOptions};
use qsamp_core::{atomic_write, BasisSpec, Error};

use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Version stamp written into benchmark rows and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A failed command: message plus process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::Diverged(_)
            | Error::Singular(_)
            | Error::ShapeMismatch(_)
            | Error::ProtocolMismatch(_) => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "qsamp", version, about = "Joint q-space sampling and reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or inspect direction protocols.
    Protocol {
        #[command(subcommand)]
        action: ProtocolCommand,
    },
    /// Generate a synthetic phantom dataset.
    Dataset(DatasetArgs),
    /// Train a sampling protocol and reconstructor.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the method × n × seed comparison.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum ProtocolCommand {
    /// Directions drawn uniformly on the hemisphere.
    MakeRandom {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Near-uniform directions from electrostatic repulsion.
    MakeUniform {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ELECTROSTATIC_ITERATIONS)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the angles and the minimum pairwise angular distance.
    Show { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, default_value_t = 255)]
    pub count: usize,
    /// Phantom width and height in voxels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long = "b", value_delimiter = ',', default_values_t = [1000.0, 2000.0, 3000.0])]
    pub bvalues: Vec<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Full protocol file; generated by electrostatic repulsion if omitted.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Size of the generated full protocol.
    #[arg(long, default_value_t = 90)]
    pub directions: usize,
    /// Project noiseless signals onto SH of this order.
    #[arg(long)]
    pub band_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// b-values to score; every b in the dataset if omitted.
    #[arg(long = "b", value_delimiter = ',')]
    pub bvalues: Option<Vec<f64>>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score the targets against themselves (sanity check).
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match run(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Protocol { action } => cmd_protocol(action, out),
        Command::Dataset(args) => cmd_dataset(&args, out),
        Command::Train(args) => cmd_train(&args, out, err),
        Command::Evaluate(args) => cmd_evaluate(&args, out),
        Command::Bench(args) => cmd_bench(&args, out, err),
    }
}

fn say(out: &mut dyn Write, text: impl fmt::Display) -> Result<(), Failure> {
    writeln!(out, "{text}").map_err(|e| Failure::io(format!("stdout: {e}")))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn cmd_protocol(action: ProtocolCommand, out: &mut dyn Write) -> Result<(), Failure> {
    match action {
        ProtocolCommand::MakeRandom { n, seed, out: path } => {
            let p = random_protocol(n, seed)?;
            ensure_parent(&path)?;
            write_protocol(&p, &path)?;
            say(out, format!("wrote {n} random directions to {}", path.display()))
        }
        ProtocolCommand::MakeUniform { n, seed, iterations, out: path } => {
            let p = electrostatic_protocol(n, iterations, seed)?;
            ensure_parent(&path)?;
            write_protocol(&p, &path)?;
            say(out, format!("wrote {n} uniform directions to {}", path.display()))
        }
        ProtocolCommand::Show { path } => {
            let p = read_protocol(&path)?;
            say(out, format!("protocol {} ({} directions)", p.label(), p.len()))?;
            say(out, format!("{:>4} {:>12} {:>12}", "i", "theta", "phi"))?;
            for (i, d) in p.directions().iter().enumerate() {
                say(out, format!("{i:>4} {:>12.8} {:>12.8}", d.theta, d.phi))?;
            }
            let sep = if p.len() > 1 { p.min_separation().to_degrees() } else { f64::NAN };
            say(out, format!("min angular separation: {sep:.6} deg"))
        }
    }
}

pub fn cmd_dataset(args: &DatasetArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let protocol = match &args.protocol {
        Some(path) => read_protocol(path)?,
        None => electrostatic_protocol(
            args.directions,
            DEFAULT_ELECTROSTATIC_ITERATIONS,
            qsamp_core::seed::derive(args.seed, "full-protocol"),
        )?
        .with_label(format!("uniform-{}", args.directions)),
    };
    let spec = DatasetSpec {
        count: args.count,
        width: args.size,
        height: args.size,
        bvalues: args.bvalues.clone(),
        sigma: args.sigma,
        seed: args.seed,
        phantom: PhantomConfig {
            band_limit: args.band_limit.map(BasisSpec::new).transpose()?,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = make_dataset(&spec, &std::sync::Arc::new(protocol))?;
    let manifest = store::write_dataset(&data, &args.out)?;
    say(
        out,
        format!(
            "wrote {} train / {} val / {} test phantoms at b = {:?} to {}",
            manifest.splits.train,
            manifest.splits.val,
            manifest.splits.test,
            args.bvalues,
            args.out.display()
        ),
    )
}

/// `run.toml` written next to every trained model.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    mode: String,
    n: usize,
    full_directions: usize,
    /// Acceleration factor N / n.
    af: f64,
    seed: u64,
    epochs: usize,
    train_b: f64,
    train_phantoms: usize,
    val_phantoms: usize,
    final_train_loss: f64,
    final_val_loss: f64,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const PROTOCOL_FILE: &str = "protocol.bvec";
pub const CURVE_FILE: &str = "curve.csv";
pub const RUN_FILE: &str = "run.toml";

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let mut exp = ExperimentConfig::load(&args.config)?;
    if let Some(n) = args.n {
        exp.train.n = Some(n);
    }
    if let Some(seed) = args.seed {
        exp.train.seed = Some(seed);
    }
    if let Some(dir) = &args.out {
        exp.output.dir = dir.clone();
    }
    let cfg = exp.train_config()?;
    let train_b = exp.dataset.train_b;
    let data = store::load_dataset(&exp.dataset.path, Some(&[train_b]))?;
    let train = data.images_at(Split::Train, train_b);
    let val = data.images_at(Split::Val, train_b);
    if train.is_empty() {
        return Err(Failure::usage(format!("dataset has no training phantoms at b = {train_b}")));
    }
    let init = exp.train.init_protocol.as_ref().map(read_protocol).transpose()?;
    let dir = exp.output.dir.clone();
    ensure_dir(&dir)?;

    let model_path = dir.join(MODEL_FILE);
    let result = train_joint_with(&cfg, &train, &val, &data.protocol, init, |ev| {
        save_checkpoint(ev.model, &model_path)?;
        if ev.is_best {
            save_checkpoint(ev.model, dir.join(BEST_FILE))?;
        }
        atomic_write(&dir.join(CURVE_FILE), curve_csv(&ev.model.curve).as_bytes())?;
        let _ = writeln!(
            err,
            "epoch {:>4}  train {:.6e}  val {:.6e}",
            ev.record.epoch, ev.record.train_loss, ev.record.val_loss
        );
        Ok(())
    });
    let model = match result {
        Ok(m) => m,
        Err(e @ Error::Diverged(_)) => {
            return Err(Failure::runtime(format!(
                "{e}; last good checkpoint (if any) is {}",
                model_path.display()
            )))
        }
        Err(e) => return Err(e.into()),
    };
    write_protocol(&model.protocol, dir.join(PROTOCOL_FILE))?;
    let last = model.curve.last().expect("at least one epoch");
    let manifest = RunManifest {
        version: VERSION,
        mode: cfg.mode.to_string(),
        n: model.n(),
        full_directions: model.full_protocol.len(),
        af: model.acceleration(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        train_b,
        train_phantoms: train.len(),
        val_phantoms: val.len(),
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
    };
    let text = toml::to_string(&manifest).map_err(|e| Failure::runtime(format!("run manifest: {e}")))?;
    atomic_write(&dir.join(RUN_FILE), text.as_bytes())?;
    say(
        out,
        format!(
            "trained {} n={} (AF {}) for {} epochs; final val loss {:.6e}; outputs in {}",
            cfg.mode,
            model.n(),
            model.acceleration(),
            cfg.epochs,
            last.val_loss,
            dir.display()
        ),
    )
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.txt";

fn summaries_csv(summaries: &[MetricsSummary]) -> String {
    let mut csv = format!("{SUMMARY_CSV_HEADER}\n");
    for s in summaries {
        csv.push_str(&summary_csv_row(s));
        csv.push('\n');
    }
    csv
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let split = Split::ALL
        .into_iter()
        .find(|s| s.name() == args.split)
        .ok_or_else(|| Failure::usage(format!("unknown split {:?}", args.split)))?;
    let manifest = store::read_manifest(&args.dataset)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let bvalues = args.bvalues.clone().unwrap_or(manifest.bvalues.clone());
    let data = store::load_dataset(&args.dataset, Some(&bvalues))?;
    let opts = EvalOptions {
        method: args.method.clone(),
        identity: args.identity,
        ..Default::default()
    };
    let mut records = Vec::new();
    for &b in &bvalues {
        let images = data.images_at(split, b);
        if images.is_empty() {
            return Err(Failure::usage(format!("no {} phantoms at b = {b}", split.name())));
        }
        records.extend(evaluate(&model, &images, &opts)?);
    }
    let summaries = summarize(&records);
    ensure_dir(&args.out)?;
    atomic_write(&args.out.join(METRICS_FILE), summaries_csv(&summaries).as_bytes())?;
    let table = render_table(&summaries);
    atomic_write(&args.out.join(TABLE_FILE), table.as_bytes())?;
    say(out, table.trim_end())
}

pub const BENCH_FILE: &str = "bench.csv";

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let exp = ExperimentConfig::load(&args.config)?;
    let matrix = exp.bench_matrix()?;
    let mut bs = matrix.eval_bs.clone();
    bs.push(matrix.train_b);
    let data = store::load_dataset(&exp.dataset.path, Some(&bs))?;
    let rows = run_matrix(&matrix, &data, |c| {
        let _ = writeln!(err, "cell {} n={} seed={}", c.method, c.n, c.seed);
    })?;
    let dir = args.out.clone().unwrap_or(exp.output.dir);
    ensure_dir(&dir)?;
    atomic_write(&dir.join(BENCH_FILE), bench_csv(&rows, VERSION).as_bytes())?;

    let mut summaries = Vec::new();
    for &b in &matrix.eval_bs {
        for ((method, n), (psnr, ssim)) in cell_means(&rows, b) {
            summaries.push(MetricsSummary {
                method: method.to_string(),
                n,
                bvalue: b,
                count: matrix.seeds.len(),
                psnr_mean: psnr,
                psnr_std: f64::NAN,
                ssim_mean: ssim,
                ssim_std: f64::NAN,
            });
        }
    }
    let table = render_table(&summaries);
    atomic_write(&dir.join(TABLE_FILE), table.as_bytes())?;
    say(out, format!("{} rows written to {}", rows.len(), dir.join(BENCH_FILE).display()))?;
    say(out, table.trim_end())
}
