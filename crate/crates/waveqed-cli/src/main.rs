//! Command-line entry: `run`, `scan-epsilon`, and `compare`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use waveqed_cli::config::{self, Overrides, DEFAULT_EPSILON_GRID};
use waveqed_cli::record::write_json_atomic;
use waveqed_cli::{compare, run, scan, CliError};

#[derive(Parser)]
#[command(
    name = "waveqed",
    version,
    about = "Waveguide-coupled emitter dynamics: exact, collective, tensor-network, \
             outcome-distribution, and neural-network engines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its CSV and JSON artifacts.
    Run(RunArgs),
    /// Run the scenario once per spacing epsilon and fit the peak trend.
    ScanEpsilon(ScanArgs),
    /// Compare two recorded runs observable by observable.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file, layered over the preset key by key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in parameter set to start from.
    #[arg(long)]
    preset: Option<String>,
    /// Engine override: ed, dicke, tn, povm-exact, or tnqs.
    #[arg(long)]
    engine: Option<String>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $WAVEQED_OUT, then the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            preset: self.preset.clone(),
            engine: self.engine.clone(),
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Summary JSON of a reference run; adds convergence rows to the output.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated spacing epsilons (default 0,0.0025,0.005,0.0075,0.01).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    epsilons: Option<Vec<f64>>,
}

#[derive(Args)]
struct CompareArgs {
    /// Summary JSON of the run under test.
    a: PathBuf,
    /// Summary JSON of the reference run.
    b: PathBuf,
    /// Comparison horizon (default: the overlap of the two runs).
    #[arg(long)]
    t_final: Option<f64>,
    /// Directory for the comparison report (default: $WAVEQED_OUT, then
    /// the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_command(args),
        Command::ScanEpsilon(args) => scan_command(args),
        Command::Compare(args) => compare_command(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run_command(args: RunArgs) -> Result<(), CliError> {
    let cfg = config::resolve(&args.common.overrides())?;
    let summary = run::run_scenario(&cfg, args.reference.as_deref())?;
    let out_dir = cfg.out_dir();

    println!("run {}", summary.run_id);
    println!("  peak IR {} at t = {}", summary.peak_ir.value, summary.peak_ir.time);
    if let Some(e_max) = summary.e_max {
        println!("  peak operator entanglement {e_max}");
    }
    if let Some(loss) = summary.final_loss {
        println!("  final training loss {loss}");
    }
    if let Some(rows) = &summary.convergence {
        for row in rows {
            println!("  deviation[{}] = {:e}", row.observable, row.metric);
        }
    }
    if let Some(csv) = &summary.csv {
        println!("  csv: {}", out_dir.join(csv).display());
    }
    if let Some(csv) = &summary.smoothed_csv {
        println!("  smoothed csv: {}", out_dir.join(csv).display());
    }
    if let Some(path) = run::summary_path(&cfg, &summary) {
        println!("  summary: {}", path.display());
    }
    for warning in &summary.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn scan_command(args: ScanArgs) -> Result<(), CliError> {
    let base = config::resolve(&args.common.overrides())?;
    let epsilons = args.epsilons.unwrap_or_else(|| DEFAULT_EPSILON_GRID.to_vec());
    let index = scan::scan_epsilon(&base, &epsilons)?;

    println!("scan {} ({} over {} spacings)", index.scan_id, index.engine, epsilons.len());
    for point in &index.points {
        let predicted = index
            .prediction
            .iter()
            .find(|p| p.epsilon == point.epsilon)
            .map(|p| format!(" (predicted {})", p.predicted))
            .unwrap_or_default();
        println!(
            "  epsilon {}: peak {} at t = {}{}",
            point.epsilon, point.peak, point.peak_time, predicted
        );
    }
    if let Some(fit) = index.fit {
        println!("  fit: peak = {} + {} x^2 with x = 100 epsilon", fit.c0, fit.c2);
    }
    if let Some(csv) = &index.csv {
        println!("  table: {}", base.out_dir().join(csv).display());
    }

    if !index.failures.is_empty() {
        return Err(CliError::Partial(format!(
            "{} of {} scan entries failed; see {}.json",
            index.failures.len(),
            epsilons.len(),
            index.scan_id
        )));
    }
    Ok(())
}

fn compare_command(args: CompareArgs) -> Result<(), CliError> {
    let report = compare::compare_runs(&args.a, &args.b, args.t_final)?;

    let describe = |side: &compare::RunRef| match side.cost {
        Some(cost) => format!("{} ({}, cost {cost})", side.run_id, side.engine),
        None => format!("{} ({})", side.run_id, side.engine),
    };
    println!("A: {}", describe(&report.a));
    println!("B: {}", describe(&report.b));
    println!("deviation of A from B over [0, {}]:", report.t_final);
    for row in &report.rows {
        println!("  {:4} {:e}", row.observable, row.metric);
    }

    let out_dir = config::fallback_out_dir(args.out.as_deref());
    std::fs::create_dir_all(&out_dir).map_err(|err| {
        CliError::Config(format!("cannot create output dir {}: {}", out_dir.display(), err))
    })?;
    let name = format!("compare-{}-vs-{}.json", report.a.run_id, report.b.run_id);
    let path = out_dir.join(name);
    write_json_atomic(&path, &report)?;
    println!("report: {}", path.display());
    Ok(())
}
