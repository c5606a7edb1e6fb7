//! `cpr`: extract comparisons, train CPR factors, run baselines and rank sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;

use cpr::baselines::{knn_complete, svd_complete};
use cpr::error::{Error, Result};
use cpr::evaluation::{count_mismatches, detect_knee, singular_diagnostics};
use cpr::experiment::{load_dataset, run_experiment, DataSource, ExperimentConfig, SubsetSpec};
use cpr::ingest::{synthesize, write_movielens, IdMap, SubsetRule, SynthConfig};
use cpr::model::{load_params, recover_matrix, save_params, ParamsFormat};
use cpr::{extract_comparisons, load_comparisons, store_comparisons, train};

#[derive(Parser, Debug)]
#[command(name = "cpr", version, about = "Comprehensive personalized ranking experiments")]
struct Cli {
    /// Flat `key=value` config file applied before any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic low-rank rating file in MovieLens layout.
    Synth(SynthArgs),
    /// Extract one-bit comparisons from a rating file.
    Extract(ExtractArgs),
    /// Train CPR factors on a comparison file.
    Train(TrainArgs),
    /// Complete a rating file with kNN or truncated SVD.
    Baseline(BaselineArgs),
    /// Rank diagnostics and mismatch count of a recovered matrix.
    Eval(EvalArgs),
    /// Run a full rank sweep and write all artifacts.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    users: usize,
    #[arg(long, default_value_t = 60)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fraction of observed entries.
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Rating file in MovieLens `u.data` layout.
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(long)]
    subset_users: Option<usize>,
    #[arg(long)]
    subset_items: Option<usize>,
    #[arg(long, value_name = "RULE")]
    subset_rule: Option<SubsetRule>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Add every comparison implied by transitivity.
    #[arg(long)]
    expand: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    c_m: Option<f64>,
    #[arg(long)]
    c_u: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    comparisons: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Output parameter file.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Write the objective trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineMethod {
    Knn,
    Svd,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: BaselineMethod,
    /// Truncation rank for SVD completion.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    /// Dense completed matrix, tab separated.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained parameter file.
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    params: Option<PathBuf>,
    /// Dense tab-separated matrix, as written by `baseline`.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(short, long)]
    comparisons: PathBuf,
    /// Rank for the singular-value diagnostics; defaults to the model rank.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated methods out of cpr, knn, svd.
    #[arg(long)]
    methods: Option<String>,
    /// `2..26` or a comma-separated list.
    #[arg(long)]
    ranks: Option<String>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    runs: Option<usize>,
    /// Evaluate sweep cells in parallel.
    #[arg(long)]
    parallel: bool,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}`: expected KEY=VALUE")))?;
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, args: &DataArgs) {
    if let Some(path) = &args.input {
        cfg.data = DataSource::MovieLens(path.clone());
    }
    if args.subset_users.is_some() || args.subset_items.is_some() || args.subset_rule.is_some() {
        let sub = cfg.subset.get_or_insert(SubsetSpec {
            num_users: 40,
            num_items: 60,
            rule: SubsetRule::MostActive,
        });
        if let Some(n) = args.subset_users {
            sub.num_users = n;
        }
        if let Some(n) = args.subset_items {
            sub.num_items = n;
        }
        if let Some(rule) = args.subset_rule {
            sub.rule = rule;
        }
    }
}

fn apply_hyper(cfg: &mut ExperimentConfig, args: &HyperArgs) {
    let h = &mut cfg.hyper;
    h.rank = args.rank.unwrap_or(h.rank);
    h.c_m = args.c_m.unwrap_or(h.c_m);
    h.c_u = args.c_u.unwrap_or(h.c_u);
    h.lambda = args.lambda.unwrap_or(h.lambda);
    h.mu = args.mu.unwrap_or(h.mu);
    h.batch_size = args.batch_size.unwrap_or(h.batch_size);
    h.seed = args.seed.unwrap_or(h.seed);
    if let Some(n) = args.max_epochs {
        cfg.train.stopping.max_epochs = n;
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_matrix(matrix: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    (|| -> std::io::Result<()> {
        for row in matrix.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", cells.join("\t"))?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split('\t')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(path, idx + 1, "ragged row"));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "empty matrix"));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Synth(args) => {
            let data = synthesize(&SynthConfig {
                num_users: args.users,
                num_items: args.items,
                rank: args.rank,
                noise: args.noise,
                density: args.density,
                seed: args.seed,
            })?;
            let ids = IdMap::sequential(data.ratings.num_users(), data.ratings.num_items());
            let mut out = create(&args.out)?;
            write_movielens(&data.ratings, &ids, &mut out)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(&args.out, e))?;
            info!("wrote {} ratings to {}", data.ratings.len(), args.out.display());
        }
        Command::Extract(args) => {
            apply_data(&mut cfg, &args.data);
            cfg.expand |= args.expand;
            cfg.validate()?;
            let data = load_dataset(&cfg)?;
            let set = extract_comparisons(&data.ratings, cfg.expand)?;
            store_comparisons(&set, &args.out)?;
            println!(
                "{} item comparisons, {} user comparisons",
                set.item_comparisons().len(),
                set.user_comparisons().len()
            );
        }
        Command::Train(args) => {
            apply_hyper(&mut cfg, &args.hyper);
            cfg.validate()?;
            let set = load_comparisons(&args.comparisons)?;
            let report = train(&set, &cfg.hyper, &cfg.train)?;
            let format = match args.format {
                FormatArg::Text => ParamsFormat::Text,
                FormatArg::Binary => ParamsFormat::Binary,
            };
            save_params(&report.final_params, format, &args.out)?;
            if let Some(path) = &args.trace {
                fs::write(path, report.trace_json()).map_err(|e| Error::io(path, e))?;
            }
            println!(
                "{} epochs, objective {:.6}",
                report.epochs_run,
                report.objective_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Baseline(args) => {
            apply_data(&mut cfg, &args.data);
            if let Some(k) = args.knn_k {
                cfg.knn.k = k;
            }
            cfg.validate()?;
            let data = load_dataset(&cfg)?;
            let completed = match args.method {
                BaselineMethod::Knn => knn_complete(&data.ratings, &cfg.knn)?,
                BaselineMethod::Svd => svd_complete(&data.ratings, args.rank.unwrap_or(cfg.hyper.rank))?,
            };
            write_matrix(&completed, &args.out)?;
        }
        Command::Eval(args) => {
            let (matrix, model_rank) = match (&args.params, &args.matrix) {
                (Some(path), _) => {
                    let params = load_params(path)?;
                    (recover_matrix(&params), Some(params.rank()))
                }
                (None, Some(path)) => (read_matrix(path)?, None),
                (None, None) => return Err(Error::Config("need --params or --matrix".into())),
            };
            let set = load_comparisons(&args.comparisons)?;
            let rank = args.rank.or(model_rank).unwrap_or(cfg.hyper.rank);
            let diag = singular_diagnostics(&matrix, rank)?;
            let mismatches = count_mismatches(&matrix, &set)?;
            println!("rank\t{rank}");
            println!("sigma_r_max\t{:?}", diag.sigma_r_max);
            println!("sigma_ratio\t{:?}", diag.sigma_ratio);
            println!("mismatches\t{mismatches}");
            println!("comparisons\t{}", set.len());
        }
        Command::Sweep(args) => {
            apply_data(&mut cfg, &args.data);
            apply_hyper(&mut cfg, &args.hyper);
            if let Some(methods) = &args.methods {
                cfg.set("methods", methods)?;
            }
            if let Some(ranks) = &args.ranks {
                cfg.set("ranks", ranks)?;
            }
            if let Some(runs) = args.runs {
                cfg.runs = runs;
            }
            if args.parallel {
                cfg.deterministic = false;
            }
            if let Some(dir) = args.output_dir {
                cfg.output_dir = dir;
            }
            let summary = run_experiment(&cfg)?;
            for series in &summary.report.raw {
                let trace: Vec<f64> = series.sigma_ratio.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
                match detect_knee(&trace) {
                    Ok(i) if trace.iter().all(|v| v.is_finite()) => {
                        println!("{}: knee at rank {}", series.method, series.ranks[i])
                    }
                    _ => println!("{}: no knee (incomplete trace)", series.method),
                }
            }
            for failed in &summary.failed_cells {
                eprintln!("warning: {failed}");
            }
            println!("artifacts in {}", summary.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
