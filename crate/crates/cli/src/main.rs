use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgat_core::agnn::checkpoint;
use pgat_core::inference::{self, GroundTruth, DEFAULT_RADIUS_M};
use pgat_core::io;
use pgat_core::synthdata::{self, SynthConfig};
use pgat_core::trainer::{TrainConfig, Trainer, TrainingSet};
use pgat_core::{PgatError, Result};

#[derive(Parser)]
#[command(name = "pgat", version, about = "Subgraph attention place recognition")]
struct Cli {
    /// Worker threads for pair scoring and gradient evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Suppress run-dependent output (wall times) so results are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic runs: one keynode CSV per run plus positions.csv.
    GenData(GenDataArgs),
    /// Train a model on keynode CSVs.
    Train(TrainArgs),
    /// Rank database keynodes for every query keynode with a trained model.
    Retrieve(RetrieveArgs),
    /// Compute AR@N from a retrieval report and ground-truth positions.
    Eval(EvalArgs),
    /// Run the gradient, oracle and invariant self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small calibrated preset instead of the defaults.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    loop_length: Option<f64>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    loops: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Keynode CSV files to train on.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Subgraph travel distance in meters.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    d_pos: Option<f64>,
    #[arg(long)]
    d_neg: Option<f64>,
    #[arg(long)]
    positive_rate: Option<f64>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Keynode CSV of the query run(s).
    #[arg(long, required = true, num_args = 1..)]
    query: Vec<PathBuf>,
    /// Keynode CSVs of the database runs.
    #[arg(long, required = true, num_args = 1..)]
    db: Vec<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Subgraph travel distance in meters; use the training value.
    #[arg(long, default_value_t = 200.0)]
    threshold: f64,
    /// Candidates kept per query.
    #[arg(long, default_value_t = 25)]
    top_k: usize,
    /// Radius for the report's hit column, meters.
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    radius: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    report: PathBuf,
    /// Positions CSV; every keynode that is not a query counts as database.
    #[arg(long)]
    positions: PathBuf,
    /// Success radius, meters.
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    radius: f64,
    /// Summary JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// AR@N curve CSV to write.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| PgatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => SynthConfig::load(p)?,
        None if args.toy => SynthConfig::toy(),
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.runs {
        cfg.num_runs = v;
    }
    if let Some(v) = args.descriptor_dim {
        cfg.descriptor_dim = v;
    }
    if let Some(v) = args.noise {
        cfg.descriptor_noise_sigma = v;
    }
    if let Some(v) = args.drift {
        cfg.viewpoint_drift_sigma = v;
    }
    if let Some(v) = args.loop_length {
        cfg.loop_length_m = v;
    }
    if let Some(v) = args.spacing {
        cfg.spacing_m = v;
    }
    if let Some(v) = args.loops {
        cfg.num_loops = v;
    }
    let data = synthdata::generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|source| PgatError::Io {
        path: args.out.clone(),
        source,
    })?;
    for t in &data.trajectories {
        io::write_keynodes(&args.out.join(format!("run_{}.csv", t.run_id)), t)?;
    }
    io::write_positions(&args.out.join("positions.csv"), &data.positions())?;
    println!(
        "wrote {} runs of {} keynodes to {}",
        data.trajectories.len(),
        data.trajectories[0].nodes.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, deterministic: bool) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let runs = io::read_keynode_files(&args.data)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    if let Some(v) = args.threshold {
        cfg.distance_threshold = v;
    }
    if let Some(v) = args.d_pos {
        cfg.d_pos = v;
    }
    if let Some(v) = args.d_neg {
        cfg.d_neg = v;
    }
    if let Some(v) = args.positive_rate {
        cfg.positive_rate = v;
    }
    cfg.deterministic |= deterministic;
    cfg.descriptor_dim = runs[0].nodes[0].descriptor.len();
    cfg.validate()?;
    let data = TrainingSet::from_trajectories(&runs, cfg.distance_threshold)?;
    let mut trainer = Trainer::new(cfg)?;
    let rows = trainer.train(&data, Some(&args.out))?;
    if let Some(last) = rows.last() {
        println!(
            "trained {} steps over {} epochs, final mean loss {:.4}",
            last.step,
            rows.len(),
            last.mean_active_loss
        );
    }
    Ok(())
}

fn retrieve(args: &RetrieveArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let query = io::read_keynode_files(&args.query)?;
    let db = io::read_keynode_files(&args.db)?;
    let (results, keynodes) = inference::retrieve(&query, &db, &model, args.threshold, args.top_k)?;
    write(&args.out, &inference::report_csv(&results, &keynodes, args.radius)?)?;
    println!("ranked {} queries into {}", results.len(), args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let results = inference::read_report(&args.report)?;
    let positions = io::read_positions(&args.positions)?;
    let query_ids: Vec<u64> = results.iter().map(|r| r.query_id).collect();
    let truth = GroundTruth::from_positions(&positions, &query_ids);
    let summary = inference::summarize(&results, &truth, args.radius)?;
    print!("{}", summary.text());
    if let Some(p) = &args.out {
        write(p, &summary.to_json())?;
    }
    if let Some(p) = &args.curve {
        write(p, &summary.curve_csv())?;
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let results = pgat_core::verify::run_all(args.seed);
    for r in &results {
        println!("{r}");
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a, cli.deterministic).map(|_| true),
        Command::Retrieve(a) => retrieve(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Verify(a) => verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error[config]: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error[config]: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[verify]: at least one check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
