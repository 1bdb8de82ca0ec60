//! Command-line interface of the `classsr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{self, BenchConfig, BenchSettings};
use crate::controller::ControllerConfig;
use crate::error::Error;
use crate::expr::MultiDataset;
use crate::optimizer::FitConfig;
use crate::search::{run_search_with, RunConfig, SearchConfig};
use crate::streams::{self, HaloParams, StreamsConfig};

/// Exit status for invalid input: bad flags, configs, manifests or empty analyses.
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "classsr", version, about = "Class symbolic regression: one analytic form fitted across many datasets")]
pub struct Cli {
    /// Worker threads for constant fitting and run matrices (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Log verbosity: repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search a dataset manifest with a run config.
    Fit(FitArgs),
    /// Write benchmark data for one challenge as a manifest and CSVs.
    Datagen(DatagenArgs),
    /// Run one benchmark challenge, or a whole matrix with --matrix.
    Classbench(ClassbenchArgs),
    /// Aggregate benchmark run directories into aggregate.csv and plot_data.json.
    Analyze(AnalyzeArgs),
    /// Stellar-stream experiment.
    Streams {
        #[command(subcommand)]
        command: StreamsCommand,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset manifest (JSON listing realization CSVs and units).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run config JSON; see the key listing below.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Challenge id, 1 to 8.
    #[arg(long)]
    pub equation: usize,
    #[arg(long, default_value_t = 10)]
    pub n_reals: usize,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    /// Relative noise level gamma.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassbenchArgs {
    /// Challenge id, 1 to 8.
    #[arg(long, required_unless_present = "matrix")]
    pub equation: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 10)]
    pub n_reals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Benchmark matrix JSON (challenges, noises, seeds, n_reals, settings).
    #[arg(long, conflicts_with = "equation")]
    pub matrix: Option<PathBuf>,
    /// Settings JSON (n_samples, max_expressions, batch_size, controller, fit).
    #[arg(long, conflicts_with = "matrix")]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub max_expressions: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Parent directory; each run gets its own subdirectory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum StreamsCommand {
    /// Search the synthetic streams of one seed.
    Run(StreamsRunArgs),
    /// Aggregate stream run directories.
    Analyze(AnalyzeArgs),
    /// Write the stream data as a manifest, CSVs and plot data.
    Export(StreamsExportArgs),
}

#[derive(Debug, Args)]
pub struct StreamsRunArgs {
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of the streams used, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub frac_real: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Streams config JSON; flags given explicitly override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_expressions: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_streams: Option<usize>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StreamsExportArgs {
    #[arg(long, default_value_t = streams::DEFAULT_STREAMS)]
    pub n_streams: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure carrying the exit code the process should report.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INVALID, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Dataset(_) | Error::Json { .. } | Error::Csv { .. } | Error::Io { .. } => EXIT_INVALID,
            Error::Parse { .. } | Error::InvalidToken(_) | Error::DegenerateTarget => EXIT_INVALID,
            _ => EXIT_FAILURE,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

/// Key listing with defaults, generated from the config types.
pub fn config_help() -> String {
    let section = |name: &str, value: serde_json::Value| {
        let mut s = format!("  {name}:\n");
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                s.push_str(&format!("    {k} = {v}\n"));
            }
        }
        s
    };
    let mut out = String::from(
        "Run config keys (JSON object; unknown keys are rejected):\n  \
         library (required):\n    \
         operators = list of symbols from + - * / inv sqrt sq neg exp log cos sin\n    \
         variables = [{name, units}]  units: 7 exponents over (L, M, T, I, Θ, N, J), default dimensionless\n    \
         fixed_constants = [{name, value, units}]  default []\n    \
         class_constants = [{name, units}]  units: {\"exact\": [...]} or \"free\" (default)\n    \
         spe_constants = [{name, units}]  same form as class_constants\n    \
         dimensional_analysis = false\n    \
         target_units = null\n",
    );
    out.push_str(&section("search", serde_json::to_value(SearchConfig::default()).expect("serializable")));
    out.push_str(&section("controller", serde_json::to_value(ControllerConfig::default()).expect("serializable")));
    out.push_str(&section("fit", serde_json::to_value(FitConfig::default()).expect("serializable")));
    out
}

fn settings_help() -> String {
    let s = serde_json::to_value(BenchSettings::default()).expect("serializable");
    let mut out = String::from("Benchmark settings keys with defaults (controller and fit take run config sections):\n");
    if let serde_json::Value::Object(map) = s {
        for (k, v) in map {
            out.push_str(&format!("  {k} = {v}\n"));
        }
    }
    out.push_str("Matrix file keys: challenges, noises, seeds, n_reals (lists), settings (object above).\n");
    out
}

fn streams_help() -> String {
    let s = serde_json::to_value(StreamsConfig::default()).expect("serializable");
    let mut out = String::from("Streams config keys with defaults:\n");
    if let serde_json::Value::Object(map) = s {
        for (k, v) in map {
            out.push_str(&format!("  {k} = {v}\n"));
        }
    }
    out
}

pub fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("fit", |c| c.after_long_help(config_help()))
        .mut_subcommand("classbench", |c| c.after_long_help(settings_help()))
        .mut_subcommand("streams", |c| c.mut_subcommand("run", |r| r.after_long_help(streams_help())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// SHA-256 over every value of the dataset, in realization order.
pub fn data_hash(data: &MultiDataset) -> String {
    let mut h = Sha256::new();
    for r in data.realizations() {
        h.update(r.name.as_bytes());
        for col in r.columns() {
            col.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        r.y().iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct FitRunInfo<'a> {
    seed: u64,
    config_hash: String,
    data_hash: String,
    version: &'static str,
    record: &'a crate::search::RunRecord,
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let data = MultiDataset::load_manifest(&args.manifest)?;
    let cfg: RunConfig = read_json(&args.config)?;
    let library = cfg.validate()?;
    create_dir(&args.out)?;
    let mut lines = String::new();
    let outcome = run_search_with(&data, &cfg, |rec| {
        lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        lines.push('\n');
        log::info!(
            "iteration {}: best reward {:.6}, {} expressions",
            rec.iteration,
            rec.best_reward,
            rec.expressions_evaluated
        );
    })?;
    let records = outcome.front.to_records(&library);
    write_file(&args.out.join("config.json"), pretty(&cfg))?;
    write_file(&args.out.join("iterations.jsonl"), lines)?;
    write_file(&args.out.join("pareto.json"), pretty(&records))?;
    write_file(&args.out.join("controller.json"), pretty(&outcome.params.to_checkpoint()))?;
    let info = FitRunInfo {
        seed: cfg.search.seed,
        config_hash: cfg.hash(),
        data_hash: data_hash(&data),
        version: env!("CARGO_PKG_VERSION"),
        record: &outcome.record,
    };
    write_file(&args.out.join("run.json"), pretty(&info))?;

    let mut report = format!(
        "classsr {}\nseed {}  config {}\n{} realizations, {} expressions evaluated ({} fitted), {:.1} s\n\n",
        info.version,
        info.seed,
        info.config_hash,
        data.n_realizations(),
        outcome.record.expressions_evaluated,
        outcome.record.unique_fitted,
        outcome.record.wall_time_s
    );
    report.push_str("complexity  reward      R2           expression\n");
    for r in &records {
        report.push_str(&format!("{:>10}  {:.8}  {:.9}  {}\n", r.complexity, r.reward, r.r2, r.infix));
        for (name, v) in &r.class_constants {
            report.push_str(&format!("{:>24} = {v:.9e}\n", name));
        }
        for (name, vs) in &r.spe_constants {
            let joined: Vec<String> = vs.iter().map(|v| format!("{v:.6e}")).collect();
            report.push_str(&format!("{:>24} = [{}]\n", name, joined.join(", ")));
        }
    }
    write_file(&args.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_datagen(args: &DatagenArgs) -> CliResult<()> {
    let clean = bench::generate_challenge_data(args.equation, args.n_reals, args.n_samples, args.seed)?;
    let data = bench::noisy_dataset(&clean.data, args.noise, &mut crate::rng::substream(args.seed, "noise"))?;
    let manifest = data.write_manifest(&args.out)?;
    let spec = bench::challenge(args.equation)?;
    let truth = serde_json::json!({
        "challenge": spec,
        "seed": args.seed,
        "noise": args.noise,
        "params": clean.params,
    });
    write_file(&args.out.join("truth.json"), pretty(&truth))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_classbench(args: &ClassbenchArgs) -> CliResult<()> {
    if let Some(path) = &args.matrix {
        let mut cfg: BenchConfig = read_json(path)?;
        if let Some(m) = args.max_expressions {
            cfg.settings.max_expressions = m;
        }
        if let Some(b) = args.batch_size {
            cfg.settings.batch_size = b;
        }
        create_dir(&args.out)?;
        let entries = bench::run_benchmark(&cfg, &args.out)?;
        let failed: Vec<_> = entries.iter().filter(|e| e.error.is_some()).collect();
        for e in &failed {
            eprintln!("failed: {}: {}", e.dir.display(), e.error.as_deref().unwrap_or(""));
        }
        println!("{} runs, {} failed; aggregate written to {}", entries.len(), failed.len(), args.out.display());
        if !entries.is_empty() && failed.len() == entries.len() {
            return Err(CliError { code: EXIT_FAILURE, message: "every run failed".into() });
        }
        return Ok(());
    }
    let id = args.equation.expect("clap enforces --equation without --matrix");
    let mut settings: BenchSettings = match &args.settings {
        Some(p) => read_json(p)?,
        None => BenchSettings::default(),
    };
    if let Some(m) = args.max_expressions {
        settings.max_expressions = m;
    }
    if let Some(b) = args.batch_size {
        settings.batch_size = b;
    }
    let dir = args.out.join(bench::run_dir_name(id, args.noise, args.n_reals, args.seed));
    let run = bench::run_challenge_to_dir(&dir, id, args.noise, args.n_reals, args.seed, &settings)?;
    println!(
        "{}: recovered {}, accurate {}, best R2 {:.9}, {} expressions",
        dir.display(),
        run.score.recovered,
        run.score.accurate,
        run.score.best_r2,
        run.record.expressions_evaluated
    );
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    if !args.dir.is_dir() {
        return Err(CliError::invalid(format!("{} is not a directory", args.dir.display())));
    }
    let runs = bench::load_runs(&args.dir)?;
    if runs.is_empty() {
        return Err(CliError::invalid(format!("no run.json found under {}", args.dir.display())));
    }
    let rows = bench::aggregate(&runs);
    bench::write_aggregate(&args.dir, &rows)?;
    println!("challenge  noise     mode      runs  recovery  accuracy  median_R2");
    for r in &rows {
        println!(
            "{:>9}  {:<8}  {:<8}  {:>4}  {:>8.3}  {:>8.3}  {:.6}",
            r.challenge,
            r.noise,
            format!("{:?}", r.mode),
            r.n_runs,
            r.recovery_rate,
            r.accuracy_rate,
            r.median_r2
        );
    }
    Ok(())
}

fn cmd_streams_run(args: &StreamsRunArgs) -> CliResult<()> {
    let mut cfg: StreamsConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => StreamsConfig::default(),
    };
    cfg.noise = args.noise;
    cfg.frac_real = args.frac_real;
    cfg.seed = args.seed;
    if let Some(m) = args.max_expressions {
        cfg.max_expressions = m;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(n) = args.n_streams {
        cfg.n_streams = n;
    }
    cfg.validate()?;
    let dir = args.out.join(streams::run_dir_name(&cfg));
    let run = streams::run_streams_to_dir(&dir, &cfg)?;
    println!(
        "{}: recovered {}, best R2 {:.9}, {} expressions",
        dir.display(),
        run.score.recovered,
        run.score.best_r2,
        run.record.expressions_evaluated
    );
    Ok(())
}

fn cmd_streams_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    if !args.dir.is_dir() {
        return Err(CliError::invalid(format!("{} is not a directory", args.dir.display())));
    }
    let rows = streams::analyze(&args.dir)?;
    if rows.is_empty() {
        return Err(CliError::invalid(format!("no run.json found under {}", args.dir.display())));
    }
    println!("noise     frac_real  runs  recovery  accuracy  median_R2");
    for r in &rows {
        println!(
            "{:<8}  {:<9}  {:>4}  {:>8.3}  {:>8.3}  {:.6}",
            r.noise, r.frac_real, r.n_runs, r.recovery_rate, r.accuracy_rate, r.median_r2
        );
    }
    Ok(())
}

fn cmd_streams_export(args: &StreamsExportArgs) -> CliResult<()> {
    let set = streams::export(&args.out, args.n_streams, &HaloParams::default(), args.noise, args.seed)?;
    println!("{} streams written to {}", set.len(), args.out.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Datagen(a) => cmd_datagen(a),
        Command::Classbench(a) => cmd_classbench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Streams { command } => match command {
            StreamsCommand::Run(a) => cmd_streams_run(a),
            StreamsCommand::Analyze(a) => cmd_streams_analyze(a),
            StreamsCommand::Export(a) => cmd_streams_export(a),
        },
    }
}

/// Parse the process arguments, run, and map failures to exit codes.
pub fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_INVALID);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
