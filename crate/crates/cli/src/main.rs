use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vfl_core::data::write_json;
use vfl_core::experiment::{run_experiment, ExperimentConfig};
use vfl_core::report::{compare_runs, format_table, write_compare_csv, RunReport};
use vfl_core::synthetic::{
    gen_credit_like, gen_synthetic, separability_check, DataManifest, SyntheticSpec, SyntheticTask,
};
use vfl_core::Error;

/// Directory for run reports when `--out-dir` is not given.
const REPORT_DIR_VAR: &str = "VFL_REPORT_DIR";

#[derive(Parser)]
#[command(
    name = "vfl",
    version,
    about = "Vertical federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as CSV plus a JSON manifest.
    GenData(GenArgs),
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Tabulate two or more run reports.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Synthetic,
    Credit,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    kind: Generator,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d_per_client: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// `linear` or `xor_cross`.
    #[arg(long, default_value = "xor_cross")]
    task: String,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the manifest goes next to it as `<stem>.manifest.json`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    config: PathBuf,
    /// Override a config key, e.g. `--set rounds=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report directory. Falls back to $VFL_REPORT_DIR, then `reports`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    /// Comparison CSV path.
    #[arg(long, short, default_value = "compare.csv")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }

    /// Config problems discovered while running still count as config errors.
    fn classify(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("vfl: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("vfl: {msg}");
            ExitCode::from(2)
        }
    }
}

fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}.manifest.json"))
}

fn gen_data(args: GenArgs) -> Result<(), Failure> {
    let (generator, data, spec, check) = match args.kind {
        Generator::Synthetic => {
            let task: SyntheticTask = args
                .task
                .parse()
                .map_err(|e: Error| Failure::Config(e.to_string()))?;
            let spec = SyntheticSpec {
                n: args.n,
                d_per_client: args.d_per_client,
                classes: args.classes,
                task,
                noise: args.noise,
                seed: args.seed,
            };
            let data = gen_synthetic(&spec).map_err(|e| Failure::Config(e.to_string()))?;
            let check = separability_check(&data, spec.d_per_client, spec.seed)
                .map_err(Failure::runtime)?;
            ("synthetic", data, Some(spec), Some(check))
        }
        Generator::Credit => {
            let data =
                gen_credit_like(args.n, args.seed).map_err(|e| Failure::Config(e.to_string()))?;
            ("credit_like", data, None, None)
        }
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    data.write_csv(&args.out).map_err(Failure::runtime)?;
    let manifest = DataManifest {
        generator: generator.to_owned(),
        file: args
            .out
            .file_name()
            .map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
        rows: data.len(),
        features: data.num_features(),
        seed: args.seed,
        spec,
        separability: check,
    };
    let mpath = manifest_path(&args.out);
    write_json(&manifest, &mpath).map_err(Failure::runtime)?;
    if let Some(c) = &manifest.separability {
        let singles: Vec<String> = c
            .single_client_accuracy
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect();
        println!(
            "separability: single [{}] joint {:.3} -> {}",
            singles.join(", "),
            c.joint_accuracy,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    println!("{}", args.out.display());
    println!("{}", mpath.display());
    Ok(())
}

/// Overrides are appended to the file body, so later keys win and a `seed`
/// override still carries the data seed along.
fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.config.display())))?;
    text.push('\n');
    for item in &args.overrides {
        if !item.contains('=') {
            return Err(Failure::Config(format!(
                "override `{item}` is not KEY=VALUE"
            )));
        }
        text.push_str(item);
        text.push('\n');
    }
    let cfg = ExperimentConfig::parse_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn report_dir(args: &RunArgs) -> PathBuf {
    args.out_dir
        .clone()
        .or_else(|| std::env::var_os(REPORT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args)?;
    let (report, ledger) = run_experiment(&cfg).map_err(Failure::classify)?;
    let dir = report_dir(&args);
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{}.json", report.run_id));
    ledger
        .write_csv(&dir.join(format!("{}.ledger.csv", report.run_id)))
        .map_err(Failure::runtime)?;
    report.write(&path).map_err(Failure::runtime)?;
    let m = &report.metrics;
    eprintln!(
        "{} accuracy {:.4}{} comm_times {} comm {:.4} MB",
        report.method,
        m.accuracy,
        m.auc.map_or_else(String::new, |a| format!(" auc {a:.4}")),
        report.comm.times(),
        report.comm.total_mb
    );
    println!("{}", path.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    let reports = args
        .reports
        .iter()
        .map(|p| RunReport::read(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::runtime)?;
    let rows = compare_runs(&reports);
    write_compare_csv(&rows, &args.out).map_err(Failure::runtime)?;
    print!("{}", format_table(&rows));
    Ok(())
}
