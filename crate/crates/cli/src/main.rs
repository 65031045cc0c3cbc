//! `instdisc`: pretrain, probe, gradcheck and ablate from the command line.
//!
//! Exit codes: 0 success, 1 check failure or runtime failure, 2 usage or
//! configuration error.

mod config;

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use instdisc::ablation::{run_ablation, AblationPlan};
use instdisc::checkpoint::load_checkpoint;
use instdisc::data::Dataset;
use instdisc::eval::{extract_features, holdout_split, knn_eval, linear_probe};
use instdisc::gradcheck::{self, GradcheckConfig};
use instdisc::trainer::{run_pretrain, RunOutput};
use instdisc::{Error, Result};

use config::{parse_overrides, CliConfig};

/// Environment variable naming the root directory for run outputs.
const OUT_ENV: &str = "INSTDISC_OUT";

#[derive(Parser)]
#[command(name = "instdisc", version, about = "Instance discrimination with a gradient-corrected memory bank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder. Writes metrics.log, checkpoint.ckpt and resolved.cfg.
    Pretrain(RunArgs),
    /// Linear probe (and optional kNN) on frozen features from `--checkpoint`.
    Probe(RunArgs),
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per loss family.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Perturb the SqrtKL derivative on purpose; the check must then fail.
        #[arg(long)]
        break_sqrtkl: bool,
    },
    /// Ablation grid plus momentum and lambda sweeps, three seeds per cell.
    Ablate(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// `--config FILE` and `--key value` overrides (keys as in resolved.cfg).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Usage(_)
        | Error::Format(_)
        | Error::IncompatibleVersion { .. }
        | Error::Io { .. }
        | Error::DegenerateInput(_) => 2,
        Error::NumericInput(_) | Error::Diverged(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Pretrain(a) => resolve(&a).and_then(|c| pretrain(&c)).map_err(Failure::from),
        Command::Probe(a) => resolve(&a).and_then(|c| probe(&c)).map_err(Failure::from),
        Command::Ablate(a) => resolve(&a).and_then(|c| ablate(&c)).map_err(Failure::from),
        Command::Gradcheck { seed, instances, break_sqrtkl } => run_gradcheck(seed, instances, break_sqrtkl),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("instdisc: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("instdisc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(args: &RunArgs) -> Result<CliConfig> {
    let (file, pairs) = parse_overrides(&args.args)?;
    CliConfig::resolve(file.as_deref(), &pairs)
}

/// `<root>/<command>-<timestamp>`, with a numeric suffix if that exists.
fn make_run_dir(config: &CliConfig, command: &str) -> Result<PathBuf> {
    let root = config
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 { format!("{command}-{stamp}") } else { format!("{command}-{stamp}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn start_run(config: &CliConfig, command: &str) -> Result<PathBuf> {
    let dir = make_run_dir(config, command)?;
    write_file(&dir.join("resolved.cfg"), &config.to_file_string())?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn check_dim(config: &CliConfig, data: &Dataset, input_dim: usize, source: &str) -> Result<()> {
    if data.dim() != input_dim {
        return Err(Error::Config(format!(
            "{source} has input width {input_dim} but dataset `{}` has dim {}",
            config.dataset_name(),
            data.dim()
        )));
    }
    Ok(())
}

fn pretrain(config: &CliConfig) -> Result<()> {
    let data = config.load_dataset()?;
    let encoder = config.encoder_config();
    encoder.validate()?;
    check_dim(config, &data, encoder.input_dim(), "encoder (--layer_widths)")?;
    config.train.validate(data.len())?;
    let dir = start_run(config, "pretrain")?;
    let (_, log) = run_pretrain(&config.train, encoder, data.instances(), Some(RunOutput { dir: &dir }))?;
    match log.last() {
        Some(r) => println!(
            "epoch {}: ce {:.6} sqrtkl {:.6} total {:.6} inst_acc {:.4}",
            r.epoch, r.ce, r.sqrtkl, r.total, r.inst_acc
        ),
        None => println!("no epochs run; checkpoint holds the initial state"),
    }
    println!("checkpoint: {}", dir.join("checkpoint.ckpt").display());
    Ok(())
}

fn probe(config: &CliConfig) -> Result<()> {
    let path = config
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Usage("probe needs --checkpoint".into()))?;
    let ckpt = load_checkpoint(&path)?;
    let encoder = ckpt.state.encoder;
    let data = config.load_dataset()?;
    check_dim(config, &data, encoder.input_dim(), "checkpoint encoder")?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("probe needs labels (set --labels_path for idx data)".into()))?;
    let features = extract_features(&encoder, data.features())?;
    let mut report = linear_probe(&features, labels, &config.probe)?.to_table();
    if config.knn > 0 {
        let (test, train) = holdout_split(features.rows(), &config.probe);
        let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let knn = knn_eval(
            &features.select_rows(&train),
            &pick(&train),
            &features.select_rows(&test),
            &pick(&test),
            config.knn,
        )?;
        let _ = write!(report, "\n{}", knn.to_table());
    }
    print!("{report}");
    let dir = start_run(config, "probe")?;
    write_file(&dir.join("report.txt"), &report)?;
    let log = path.with_file_name("metrics.log");
    if log.exists() {
        let mut f = OpenOptions::new().append(true).open(&log).map_err(|e| io_err(&log, e))?;
        let commented: String = report.lines().map(|l| format!("# {l}\n")).collect();
        f.write_all(commented.as_bytes()).map_err(|e| io_err(&log, e))?;
    }
    Ok(())
}

fn ablate(config: &CliConfig) -> Result<()> {
    let data = config.load_dataset()?;
    let encoder = config.encoder_config();
    encoder.validate()?;
    check_dim(config, &data, encoder.input_dim(), "encoder (--layer_widths)")?;
    let dir = start_run(config, "ablate")?;
    let plan = AblationPlan::new(config.train.clone(), encoder, config.probe.clone());
    let report = run_ablation(&plan, &data)?;
    let mut text = report.to_table();
    let (full, no_kl, off) = (
        report.full_method().median_probe(),
        report.no_sqrtkl().median_probe(),
        report.all_off().median_probe(),
    );
    let (wins, pairs) = report.calibrate_early_wins();
    let _ = writeln!(text, "# full {full:.4} >= no-sqrtkl {no_kl:.4}: {}", full >= no_kl);
    let _ = writeln!(text, "# no-sqrtkl {no_kl:.4} >= all-off {off:.4}: {}", no_kl >= off);
    let _ = writeln!(text, "# calibrate early probe >= random init: {wins} of {pairs} seeds");
    print!("{text}");
    write_file(&dir.join("ablation.txt"), &text)
}

fn run_gradcheck(seed: u64, instances: usize, break_sqrtkl: bool) -> std::result::Result<(), Failure> {
    let cfg = GradcheckConfig { seed, instances, break_sqrtkl, ..GradcheckConfig::default() };
    let report = gradcheck::run(&cfg)?;
    println!("{report}");
    let failures = report.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name).collect();
        Err(Failure::Check(format!("gradient check failed: {}", names.join(", "))))
    }
}
