//! Command-line driver: dataset synthesis, the two pretraining arms, the
//! head-to-head classification comparison, and epoch-log analysis with
//! report and plot emission.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lesionlab::data::{synth_dataset, write_manifest, Priority};
use lesionlab::dynamics::{render_csv, render_table, table_report_with, ReportWindows};
use lesionlab::pipeline::{
    compare, load_split, pretrain, pretrain_external, train_classifier, EpochLog, ExperimentConfig,
};
use lesionlab::Error;

/// Environment variable naming the artifact root used when `--out` is
/// not given; the final fallback is `./artifacts`.
const ARTIFACT_ENV: &str = "LESIONLAB_ARTIFACTS";

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_TRAINING: u8 = 5;
const EXIT_PARITY: u8 = 6;

#[derive(Parser)]
#[command(
    name = "lesionlab",
    version,
    about = "Two-stage lesion-classification experiments: reconstruction \
             pretraining vs. external features, compared under identical \
             classification settings",
    after_help = "Exit codes: 0 success, 2 usage, 3 config, 4 data/artifact, \
                  5 training abort, 6 parity violation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion-style dataset manifest plus images
    SynthData(SynthArgs),
    /// Stage 1: train the reconstruction model from random weights
    Pretrain(RunArgs),
    /// Stage 1, external arm: produce an externally-pretrained encoder
    PretrainExternal(RunArgs),
    /// Stage 2, arm A only: train a classifier from one config
    TrainClassifier(RunArgs),
    /// Run both classification arms, then report and plot the comparison
    Compare(CompareArgs),
    /// Summarize existing epoch logs into the two-arm report
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of records to generate
    #[arg(long)]
    n: usize,
    /// Square image resolution in pixels
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Number of synthetic classes
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory (defaults to <artifact root>/synth)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to <artifact root>/<run_id>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config for arm A (sourced from a reconstruction checkpoint)
    #[arg(long)]
    config_a: PathBuf,
    /// Config for arm B (sourced from an external checkpoint)
    #[arg(long)]
    config_b: PathBuf,
    /// Output directory (defaults to <artifact root>/<runA>_vs_<runB>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Epoch log for arm A (JSONL)
    #[arg(long)]
    log_a: PathBuf,
    /// Epoch log for arm B (JSONL)
    #[arg(long)]
    log_b: PathBuf,
    /// Early slope window, inclusive, as start:end
    #[arg(long, default_value = "0:29")]
    early: String,
    /// Late slope window, inclusive, as start:end
    #[arg(long, default_value = "30:70")]
    late: String,
    /// Epoch at which the overfitting gap is read
    #[arg(long, default_value_t = 70)]
    gap_epoch: usize,
    /// Output directory (defaults to <artifact root>/analysis)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Command failures split into the flag-level kind, which clap cannot
/// check for us, and everything the library reports.
enum AppError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Lib(e)
    }
}

fn exit_code_for(err: &AppError) -> u8 {
    match err {
        AppError::Usage(_) => EXIT_USAGE,
        AppError::Lib(e) => match e {
            Error::InvalidConfig(_) => EXIT_CONFIG,
            Error::TrainingAbort { .. } | Error::NonFinite(_) => EXIT_TRAINING,
            Error::Parity(_) => EXIT_PARITY,
            _ => EXIT_DATA,
        },
    }
}

/// Restores the default SIGPIPE disposition so piping stdout into a
/// pager or `head` terminates the process quietly, as Unix tools do,
/// instead of panicking on the broken pipe.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::PretrainExternal(args) => cmd_pretrain_external(args),
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match &err {
                AppError::Usage(msg) => eprintln!("usage error: {msg}"),
                AppError::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn run_dir(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| artifact_root().join(name))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Record of one successful invocation: what ran, when, and where every
/// produced artifact lives. All listed paths exist when this is written.
#[derive(Serialize)]
struct RunManifest {
    run_id: String,
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    started_at_unix: u64,
    finished_at_unix: u64,
    artifacts: Vec<PathBuf>,
}

fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, AppError> {
    for artifact in &manifest.artifacts {
        if !artifact.exists() {
            return Err(AppError::Lib(Error::Manifest {
                path: artifact.clone(),
                reason: "recorded artifact does not exist".into(),
            }));
        }
    }
    let path = dir.join("run.json");
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn cmd_synth(args: SynthArgs) -> Result<(), AppError> {
    if args.n == 0 {
        return Err(AppError::Usage("--n must be at least 1".into()));
    }
    if args.classes == 0 || args.n < args.classes {
        return Err(AppError::Usage("--classes must be in 1..=--n".into()));
    }
    if args.resolution < 8 {
        return Err(AppError::Usage("--resolution must be at least 8".into()));
    }
    let started = unix_now();
    let dir = run_dir(args.out, "synth");
    let records = synth_dataset(args.n, args.resolution, args.classes, args.seed)?;
    let manifest_path = write_manifest(&records, &dir)?;

    let mut counts = [0usize; 3];
    for r in &records {
        counts[r.priority.index()] += 1;
    }
    println!(
        "synthesized {} records at {}x{} ({} classes, seed {})",
        records.len(),
        args.resolution,
        args.resolution,
        args.classes,
        args.seed
    );
    for p in Priority::ALL {
        println!("  {p}: {}", counts[p.index()]);
    }
    println!("manifest: {}", manifest_path.display());

    let run = RunManifest {
        run_id: "synth".into(),
        command: "synth-data".into(),
        config_hash: None,
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![manifest_path, dir.join("images")],
    };
    write_run_manifest(&dir, &run)?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, AppError> {
    if !path.exists() {
        return Err(AppError::Usage(format!(
            "config file {} not found",
            path.display()
        )));
    }
    let cfg = ExperimentConfig::from_path(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pretrain(args: RunArgs) -> Result<(), AppError> {
    let started = unix_now();
    let cfg = load_config(&args.config)?;
    let data = load_split(&cfg)?;
    let dir = run_dir(args.out, &cfg.run_id);
    let out = pretrain(&cfg, &data, &dir)?;
    println!(
        "pretrain {} finished: recon {:.6} kl {:.6} total {:.6}",
        cfg.run_id, out.final_recon, out.final_kl, out.final_total
    );
    let run = RunManifest {
        run_id: cfg.run_id.clone(),
        command: "pretrain".into(),
        config_hash: Some(cfg.config_hash()),
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![
            out.log_path.clone(),
            dir.join("pretrain.csv"),
            out.checkpoint_dir.clone(),
        ],
    };
    let run_path = write_run_manifest(&dir, &run)?;
    println!("artifacts: {}", run_path.display());
    Ok(())
}

fn cmd_pretrain_external(args: RunArgs) -> Result<(), AppError> {
    let started = unix_now();
    let cfg = load_config(&args.config)?;
    let data = load_split(&cfg)?;
    let dir = run_dir(args.out, &cfg.run_id);
    let out = pretrain_external(&cfg, &data, &dir)?;
    println!(
        "external pretraining {} finished: final val acc {:.4}",
        cfg.run_id, out.final_val_acc
    );
    let run = RunManifest {
        run_id: cfg.run_id.clone(),
        command: "pretrain-external".into(),
        config_hash: Some(cfg.config_hash()),
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![
            out.log_path.clone(),
            dir.join("external.csv"),
            out.checkpoint_dir.clone(),
        ],
    };
    let run_path = write_run_manifest(&dir, &run)?;
    println!("artifacts: {}", run_path.display());
    Ok(())
}

fn cmd_train_classifier(args: RunArgs) -> Result<(), AppError> {
    let started = unix_now();
    let cfg = load_config(&args.config)?;
    let data = load_split(&cfg)?;
    let dir = run_dir(args.out, &cfg.run_id);
    let out = train_classifier(&cfg, &data, &dir)?;
    println!(
        "classifier {} finished: final val acc {:.4} ({} head params)",
        cfg.run_id, out.final_val_acc, out.head_param_count
    );
    let run = RunManifest {
        run_id: cfg.run_id.clone(),
        command: "train-classifier".into(),
        config_hash: Some(cfg.config_hash()),
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![
            out.log_path.clone(),
            dir.join("classifier.csv"),
            dir.join("freeze_audit.json"),
            out.checkpoint_dir.clone(),
        ],
    };
    let run_path = write_run_manifest(&dir, &run)?;
    println!("artifacts: {}", run_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), AppError> {
    let started = unix_now();
    let cfg_a = load_config(&args.config_a)?;
    let cfg_b = load_config(&args.config_b)?;
    let dir = run_dir(args.out, &format!("{}_vs_{}", cfg_a.run_id, cfg_b.run_id));
    let outcome = compare(&cfg_a, &cfg_b, &dir)?;

    let windows = ReportWindows::for_stage2(cfg_a.stage2.epochs_frozen, cfg_a.stage2.epochs_total);
    let rows = table_report_with(&outcome.arm_a.log, &outcome.arm_b.log, &windows)?;
    let report_csv = dir.join("report.csv");
    let report_txt = dir.join("report.txt");
    std::fs::write(&report_csv, render_csv(&rows, &windows))
        .map_err(|e| Error::io(&report_csv, e))?;
    let table = render_table(&rows, &windows);
    std::fs::write(&report_txt, &table).map_err(|e| Error::io(&report_txt, e))?;

    let svg_path = dir.join("curves.svg");
    let svg = plot::compare_panels_svg(&outcome.arm_a.log, &outcome.arm_b.log);
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;

    print!("{table}");
    println!(
        "parity: head params {} vs {}, stage-2 hashes match",
        outcome.parity.head_params_a, outcome.parity.head_params_b
    );

    let run = RunManifest {
        run_id: format!("{}_vs_{}", cfg_a.run_id, cfg_b.run_id),
        command: "compare".into(),
        config_hash: Some(cfg_a.stage2_parity_hash()?),
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![
            outcome.arm_a.log_path.clone(),
            outcome.arm_b.log_path.clone(),
            outcome.arm_a.checkpoint_dir.clone(),
            outcome.arm_b.checkpoint_dir.clone(),
            dir.join("parity.json"),
            report_csv,
            report_txt,
            svg_path,
        ],
    };
    let run_path = write_run_manifest(&dir, &run)?;
    println!("artifacts: {}", run_path.display());
    Ok(())
}

fn parse_window(s: &str, flag: &str) -> Result<(usize, usize), AppError> {
    let err = || AppError::Usage(format!("--{flag} expects start:end, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(err)?;
    let lo: usize = lo.trim().parse().map_err(|_| err())?;
    let hi: usize = hi.trim().parse().map_err(|_| err())?;
    if lo > hi {
        return Err(AppError::Usage(format!(
            "--{flag} window start {lo} exceeds end {hi}"
        )));
    }
    Ok((lo, hi))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), AppError> {
    let started = unix_now();
    let windows = ReportWindows {
        early: parse_window(&args.early, "early")?,
        late: parse_window(&args.late, "late")?,
        gap_epoch: args.gap_epoch,
    };
    let log_a = EpochLog::read_jsonl(&args.log_a)?;
    let log_b = EpochLog::read_jsonl(&args.log_b)?;
    let rows = table_report_with(&log_a, &log_b, &windows)?;

    let dir = run_dir(args.out, "analysis");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let report_csv = dir.join("report.csv");
    let report_txt = dir.join("report.txt");
    std::fs::write(&report_csv, render_csv(&rows, &windows))
        .map_err(|e| Error::io(&report_csv, e))?;
    let table = render_table(&rows, &windows);
    std::fs::write(&report_txt, &table).map_err(|e| Error::io(&report_txt, e))?;
    print!("{table}");

    let run = RunManifest {
        run_id: format!(
            "{}+{}",
            log_a.run_id().unwrap_or("a"),
            log_b.run_id().unwrap_or("b")
        ),
        command: "analyze".into(),
        config_hash: None,
        started_at_unix: started,
        finished_at_unix: unix_now(),
        artifacts: vec![report_csv, report_txt],
    };
    let run_path = write_run_manifest(&dir, &run)?;
    println!("artifacts: {}", run_path.display());
    Ok(())
}
