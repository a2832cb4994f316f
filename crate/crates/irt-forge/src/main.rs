//! Command-line front end: train, simulate, bench, plot-icc.
//!
//! Exit codes: 0 success, 2 unknown model or invalid arguments, 3 input
//! parse/format errors, 4 training divergence, 1 anything else.

use clap::{Args, Parser, Subcommand, ValueEnum};
use irt_forge::dataset::{simulate, SimulationSpec};
use irt_forge::io::{
    read_jsonlines, read_parameters, write_jsonlines, write_parameters, write_training_log,
    ParametersDocument,
};
use irt_forge::plot::{render_csv, render_svg, DEFAULT_GRID_POINTS};
use irt_forge::registry::{ModelRegistration, Registry};
use irt_forge::{
    fit_mml, fit_svi, Error, FitReport, MmlConfig, ModelKind, TrainConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "irt-forge", version, about = "Item response theory fitting engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a jsonlines response file.
    Train(TrainArgs),
    /// Generate a synthetic response file plus its ground-truth parameters.
    Simulate(SimulateArgs),
    /// Time fits over a grid of dataset sizes; emits CSV.
    Bench(BenchArgs),
    /// Render item characteristic curves from a parameters file.
    PlotIcc(PlotIccArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Estimator {
    Svi,
    Mml,
}

#[derive(Args)]
struct TrainArgs {
    /// Registered model name (1pl, 2pl, 3pl, 4pl, ...).
    model: String,
    /// Input jsonlines response file.
    data: PathBuf,
    /// Output directory for best_parameters.json and training_log.csv.
    outdir: PathBuf,
    #[arg(long, value_enum, default_value = "svi")]
    estimator: Estimator,
    /// Epoch budget (SVI) or EM iteration budget (MML). Defaults: 1000 / 200.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Observations per SVI mini-batch; omit for full-batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gauss-Hermite node count for the MML estimator.
    #[arg(long, default_value_t = 41)]
    quad_points: usize,
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    /// Fix the ability prior at Normal(0,1) instead of the hierarchical prior.
    #[arg(long)]
    no_hier: bool,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model kind to draw from (1pl, 2pl, 3pl, 4pl).
    model: String,
    /// Output jsonlines path; truth goes to <output>.truth.json.
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    #[arg(long, default_value_t = 20)]
    items: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that a cell is left unobserved.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    /// Hold the 3PL guessing parameter at one value instead of drawing it.
    #[arg(long)]
    fixed_guess: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated item counts, e.g. 100,1000.
    #[arg(long, value_delimiter = ',', required = true)]
    items: Vec<usize>,
    /// Comma-separated subject counts.
    #[arg(long, value_delimiter = ',', required = true)]
    subjects: Vec<usize>,
    #[arg(long, default_value = "1pl")]
    model: String,
    #[arg(long, value_enum, default_value = "svi")]
    estimator: Estimator,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotIccArgs {
    /// best_parameters.json (or a truth file with the same schema).
    params: PathBuf,
    /// Comma-separated item ids; omit for every item.
    #[arg(long, value_delimiter = ',')]
    items: Option<Vec<String>>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit a theta/probability table instead of SVG.
    #[arg(long)]
    csv: bool,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    points: usize,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("IRT_FORGE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: IRT_FORGE_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::PlotIcc(args) => cmd_plot_icc(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::UnknownModel { .. } | Error::Contract(_) => 2,
        Error::Parse { .. } | Error::Format(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

/// Compile-time extension point: every name registered here is accepted by
/// `train` and friends. "new1pl" demonstrates a registered alias.
fn build_registry() -> Registry {
    let mut registry = Registry::with_builtins();
    registry
        .register(ModelRegistration::new("new1pl", ModelKind::OneParam))
        .expect("alias name is free");
    registry
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let derived = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        println!("seed = {derived} (time-derived; pass --seed to reproduce)");
        derived
    })
}

fn fit_with(
    estimator: Estimator,
    dataset: &irt_forge::ResponsePatternDataset,
    kind: ModelKind,
    args: &TrainArgs,
    seed: u64,
) -> Result<FitReport, Error> {
    match estimator {
        Estimator::Svi => {
            let mut config = TrainConfig::new(kind, seed);
            if let Some(epochs) = args.epochs {
                config.epochs = epochs;
            }
            config.learning_rate = args.lr;
            config.batch_size = args.batch_size;
            config.mc_samples = args.mc_samples;
            config.priors.hierarchical = !args.no_hier;
            let (_, report) = fit_svi(dataset, &config)?;
            Ok(report)
        }
        Estimator::Mml => {
            let config = MmlConfig {
                n_quad: args.quad_points,
                max_iters: args.epochs.unwrap_or(200),
                ..MmlConfig::default()
            };
            let (_, report) = fit_mml(dataset, kind, &config)?;
            Ok(report)
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let registry = build_registry();
    let registration = registry.lookup(&args.model)?.clone();
    let dataset = read_jsonlines(&args.data)?;
    let seed = resolve_seed(args.seed);
    if args.verbose {
        println!(
            "dataset: {} subjects x {} items, {} observations",
            dataset.n_subjects(),
            dataset.n_items(),
            dataset.n_observations()
        );
    }
    let report = fit_with(args.estimator, &dataset, registration.kind, args, seed)?;
    let doc = ParametersDocument::from_fit(&registration.name, &report, &dataset)?;
    write_parameters(&doc, &args.outdir)?;
    write_training_log(&report, &args.outdir)?;
    println!(
        "final loss {:.6} after {} epochs in {:.2}s (converged: {})",
        report.trace.last().copied().unwrap_or(f64::NAN),
        report.trace.len(),
        report.seconds,
        report.converged
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let registry = build_registry();
    let kind = registry.lookup(&args.model)?.kind;
    let seed = resolve_seed(args.seed);
    let mut spec = SimulationSpec::new(kind, args.subjects, args.items, seed);
    spec.missing_rate = args.missing;
    spec.fixed_guessing = args.fixed_guess;
    let (dataset, items, abilities) = simulate(&spec)?;
    write_jsonlines(&dataset, &args.output)?;
    let truth = ParametersDocument::from_truth(&args.model, &items, &abilities, &dataset)?;
    let truth_path = truth_path_for(&args.output);
    let text = serde_json::to_string_pretty(&truth).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&truth_path, text + "\n")?;
    println!(
        "wrote {} observations to {} (truth: {})",
        dataset.n_observations(),
        args.output.display(),
        truth_path.display()
    );
    Ok(())
}

fn truth_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".truth.json");
    output.with_file_name(name)
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Error> {
    if args.items.is_empty() || args.subjects.is_empty() {
        return Err(Error::Contract("bench grid must be non-empty".into()));
    }
    let registry = build_registry();
    let kind = registry.lookup(&args.model)?.kind;
    let seed = resolve_seed(args.seed);
    let mut csv = String::from("items,subjects,seconds,final_loss,status\n");
    for &n_items in &args.items {
        for &n_subjects in &args.subjects {
            let spec = SimulationSpec::new(kind, n_subjects, n_items, seed);
            let row = match bench_cell(&spec, kind, args) {
                Ok((seconds, loss)) => {
                    format!("{n_items},{n_subjects},{seconds:.3},{loss},ok\n")
                }
                Err(err) => format!("{n_items},{n_subjects},,,error: {err}\n"),
            };
            print!("{row}");
            csv.push_str(&row);
        }
    }
    if let Some(path) = &args.out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn bench_cell(
    spec: &SimulationSpec,
    kind: ModelKind,
    args: &BenchArgs,
) -> Result<(f64, f64), Error> {
    let (dataset, _, _) = simulate(spec)?;
    let report = match args.estimator {
        Estimator::Svi => {
            let mut config = TrainConfig::new(kind, spec.seed);
            config.epochs = args.epochs;
            fit_svi(&dataset, &config)?.1
        }
        Estimator::Mml => {
            let config = MmlConfig { max_iters: args.epochs, ..MmlConfig::default() };
            fit_mml(&dataset, kind, &config)?.1
        }
    };
    Ok((report.seconds, report.trace.last().copied().unwrap_or(f64::NAN)))
}

fn cmd_plot_icc(args: &PlotIccArgs) -> Result<(), Error> {
    let doc = read_parameters(&args.params)?;
    let items = doc.item_params()?;
    let all_ids: Vec<String> = doc.item_ids.values().cloned().collect();
    let indices: Vec<usize> = match &args.items {
        Some(wanted) => wanted
            .iter()
            .map(|id| {
                doc.item_index(id).ok_or_else(|| {
                    Error::Contract(format!("unknown item id '{id}' in parameters file"))
                })
            })
            .collect::<Result<_, _>>()?,
        None => (0..items.len()).collect(),
    };
    let rendered = if args.csv {
        render_csv(&items, &indices, &all_ids, args.points)?
    } else {
        render_svg(&items, &indices, &all_ids, args.points)?
    };
    match &args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
