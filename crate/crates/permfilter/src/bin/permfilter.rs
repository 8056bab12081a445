//! Experiment CLI: benchmark runner, exactness checks, permutation suites,
//! and results re-aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use permfilter::bench::{self, Method};
use permfilter::filter::EnsembleConfig;
use permfilter::io::{self, Benchmark, ExperimentConfig};
use permfilter::losses::Matrix;
use permfilter::oracles;
use permfilter::{Error, LinearLoss, Result};

#[derive(Parser)]
#[command(name = "permfilter", version, about = "Weighted particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full benchmark from a config file; flags override file values
    Run(RunArgs),
    /// Verify the exact posterior-ratio property on random linear losses
    CheckTheorem3(Theorem3Args),
    /// Linear and logistic permutation-invariance suites
    PermCheck(PermCheckArgs),
    /// Re-aggregate results previously emitted by `run`
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<CliMethod>,
    #[arg(long, value_enum)]
    benchmark: Option<CliBenchmark>,
    #[arg(long)]
    n_particles: Option<usize>,
    #[arg(long)]
    sigma_sq: Option<f64>,
    #[arg(long)]
    init_noise_std: Option<f64>,
    #[arg(long)]
    epochs_per_task: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMethod {
    Wpf,
    Gd,
    Averaging,
    Resampling,
}

impl From<CliMethod> for Method {
    fn from(m: CliMethod) -> Method {
        match m {
            CliMethod::Wpf => Method::Wpf,
            CliMethod::Gd => Method::Gd,
            CliMethod::Averaging => Method::Averaging,
            CliMethod::Resampling => Method::Resampling,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliBenchmark {
    Splitmnist,
    Synthetic,
    LinearOracle,
}

impl From<CliBenchmark> for Benchmark {
    fn from(b: CliBenchmark) -> Benchmark {
        match b {
            CliBenchmark::Splitmnist => Benchmark::Splitmnist,
            CliBenchmark::Synthetic => Benchmark::Synthetic,
            CliBenchmark::LinearOracle => Benchmark::LinearOracle,
        }
    }
}

#[derive(Args)]
struct Theorem3Args {
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of independently seeded instances
    #[arg(long, default_value_t = 1)]
    instances: u64,
}

#[derive(Args)]
struct PermCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permutations for the linear suite
    #[arg(long, default_value_t = 10)]
    n_perms: usize,
    /// Seeds for the logistic suite
    #[arg(long, default_value_t = 10)]
    n_seeds: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::CheckTheorem3(args) => cmd_check_theorem3(args),
        Command::PermCheck(args) => cmd_perm_check(args),
        Command::Report { dir } => cmd_report(&dir),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.method {
        config.method = m.into();
    }
    if let Some(b) = args.benchmark {
        config.benchmark = b.into();
    }
    if let Some(n) = args.n_particles {
        config.n_particles = n;
    }
    if let Some(s) = args.sigma_sq {
        config.sigma_sq = s;
    }
    if let Some(s) = args.init_noise_std {
        config.init_noise_std = s;
    }
    if let Some(e) = args.epochs_per_task {
        config.epochs_per_task = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(n) = args.n_permutations {
        config.n_permutations = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = args.output_dir {
        config.output_dir = d;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = Some(d);
    }
    config.validate()?;

    if config.benchmark == Benchmark::LinearOracle {
        return cmd_linear_oracle(&config);
    }

    let tasks = match config.benchmark {
        Benchmark::Splitmnist => {
            let dir = config.data_dir.clone().unwrap_or_else(io::data_dir);
            if !io::mnist_available(&dir) {
                return Err(Error::InvalidConfig(format!(
                    "MNIST IDX files not found in {}; fetch them with scripts/download_mnist.sh \
                     or point --data-dir / ${} at them",
                    dir.display(),
                    io::DATA_DIR_ENV,
                )));
            }
            let (train, test) = io::load_mnist(&dir)?;
            bench::build_splitmnist(&train, &test, config.head)?
        }
        Benchmark::Synthetic => bench::build_synthetic(
            config.synthetic.k_tasks,
            config.synthetic.dim,
            config.synthetic.separation,
            config.seed,
        )?,
        Benchmark::LinearOracle => unreachable!(),
    };

    let run_cfg = bench::RunConfig {
        n_particles: if config.method == Method::Gd { 1 } else { config.n_particles },
        sigma_sq: config.sigma_sq,
        init_noise_std: config.init_noise_std,
        hidden_units: config.hidden_units,
        resample_perturb_std: config.resample_perturb_std,
        seed: config.seed,
    };
    let outcome = bench::run_permutations(
        config.method,
        &tasks,
        config.epochs_per_task,
        config.batch_size,
        config.n_permutations,
        &run_cfg,
    )?;
    io::emit_results(
        &outcome.metrics,
        &outcome.histories,
        &config,
        &outcome.run_seeds,
        &config.output_dir,
    )?;
    io::write_checkpoint(&outcome.final_ensemble, &config.output_dir.join("ensemble.wpf"))?;

    println!("method            {}", outcome.metrics.method);
    println!("tasks             {}", outcome.metrics.task_names.join(","));
    println!("runs              {}", outcome.metrics.n_runs());
    println!("average_accuracy  {:.6}", outcome.metrics.average_accuracy()?);
    if outcome.metrics.n_runs() >= 2 {
        println!("normalized_var    {:.6}", outcome.metrics.normalized_variance()?);
    }
    println!("mean_forgetting   {:.6}", outcome.mean_forgetting());
    println!("results written to {}", config.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_linear_oracle(config: &ExperimentConfig) -> Result<ExitCode> {
    let mut worst = 0.0_f64;
    for i in 0..config.n_permutations as u64 {
        let err = theorem3_instance(
            config.synthetic.dim,
            config.epochs_per_task.max(1) * 20,
            config.n_particles.max(2),
            config.seed + i,
        )?;
        worst = worst.max(err);
    }
    println!("theorem3 max log-ratio discrepancy over {} instances: {worst:.3e}", config.n_permutations);
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let path = config.output_dir.join("summary.json");
    let body = serde_json::json!({
        "benchmark": "linear-oracle",
        "instances": config.n_permutations,
        "max_discrepancy": worst,
        "config": config,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(ExitCode::SUCCESS)
}

/// One seeded random linear-loss instance of the posterior-ratio check.
fn theorem3_instance(dim: usize, steps: usize, particles: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let losses: Vec<LinearLoss> = (0..steps)
        .map(|_| {
            LinearLoss::new(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let config = EnsembleConfig {
        n_particles: particles,
        sigma_sq: 0.05,
        init_noise_std: 0.5,
        seed,
    };
    oracles::theorem3_check(&config, &losses)
}

fn cmd_check_theorem3(args: Theorem3Args) -> Result<ExitCode> {
    let mut worst = 0.0_f64;
    for i in 0..args.instances {
        let err = theorem3_instance(args.dim, args.steps, args.particles, args.seed + i)?;
        println!(
            "instance seed={} dim={} steps={} particles={}: discrepancy {err:.3e}",
            args.seed + i,
            args.dim,
            args.steps,
            args.particles
        );
        worst = worst.max(err);
    }
    println!("max discrepancy: {worst:.3e}");
    if worst < 1e-8 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("FAIL: discrepancy {worst:.3e} >= 1e-8");
        Ok(ExitCode::from(2))
    }
}

fn cmd_perm_check(args: PermCheckArgs) -> Result<ExitCode> {
    let config = EnsembleConfig {
        n_particles: 8,
        sigma_sq: 0.05,
        init_noise_std: 0.5,
        seed: args.seed,
    };
    let linear =
        oracles::linear_permutation_invariance(10, 20, args.n_perms, &config, args.seed)?;
    let linear_ok = linear.max_position_diff < 1e-9
        && linear.max_log_weight_diff < 1e-8
        && linear.max_mmd < 1e-9;
    println!(
        "linear suite: position diff {:.3e}, log-weight diff {:.3e}, mmd {:.3e} [{}]",
        linear.max_position_diff,
        linear.max_log_weight_diff,
        linear.max_mmd,
        if linear_ok { "pass" } else { "FAIL" }
    );

    let logistic = oracles::logistic_order_robustness(args.n_seeds, args.seed)?;
    let logistic_ok = logistic.mean_swapped < logistic.mean_independent;
    println!(
        "logistic suite: swapped-order mmd {:.3e} vs independent-init mmd {:.3e} [{}]",
        logistic.mean_swapped,
        logistic.mean_independent,
        if logistic_ok { "pass" } else { "FAIL" }
    );

    if linear_ok && logistic_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_report(dir: &PathBuf) -> Result<ExitCode> {
    let (task_names, scores) = io::read_scores_csv(&dir.join("scores.csv"))?;
    let average = scores.data.iter().sum::<f64>() / scores.data.len() as f64;
    println!("tasks: {}", task_names.join(","));
    println!("runs:  {}", scores.cols);
    println!("average_accuracy  {average:.6}");
    if scores.cols >= 2 {
        println!("normalized_var    {:.6}", mean_task_variance(&scores));
    }
    Ok(ExitCode::SUCCESS)
}

fn mean_task_variance(scores: &Matrix) -> f64 {
    let mut total = 0.0;
    for task in 0..scores.rows {
        let row = scores.row(task);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        total += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (row.len() - 1) as f64;
    }
    total / scores.rows as f64
}
