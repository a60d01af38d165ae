use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spurlab::model::Environment;
use spurlab::noise::{drop_to_spurious_target, flip_core_noise, group_statistics, make_dominoes, GroupedDataset};
use spurlab::probe::{empirical_probe, pca_project_probe, EvalSet};
use spurlab::runner::{
    derive_seed, run_certification, run_grid, run_pablation, with_threads, write_grid, write_json, BenchmarkRecipe,
    ExperimentConfig, ProblemSource, RunnerError,
};

#[derive(Parser)]
#[command(name = "spurlab", version, about = "Spurious-correlation gradient-flow laboratory")]
struct Cli {
    /// JSON experiment configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "SPURLAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the configured cases; exit code 1 if any claim fails.
    Certify,
    /// Sweep the noise grid over the configured methods.
    Grid,
    /// Sweep the frozen fraction p over the noise grid.
    Pablate,
    /// Run the balanced-resampling probe on a feature CSV.
    Probe {
        /// Probe-set features (columns f0.., label, spurious, group).
        #[arg(long)]
        features: PathBuf,
        /// Evaluation split; the held-out half of the probe set otherwise.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Project onto this many principal components first.
        #[arg(long)]
        pca_dim: Option<usize>,
    },
    /// Write a Dominoes-style grouped dataset as CSV.
    Gen {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        eta_core: f64,
        #[arg(long, default_value_t = 0.0)]
        eta_spu: f64,
        #[arg(long, value_enum, default_value_t = Env::Train)]
        env: Env,
        /// Raise core noise to this level with label-flow flipping.
        #[arg(long)]
        flip_core: Option<f64>,
        /// Drop rows until the spurious noise reaches this level.
        #[arg(long)]
        drop_spu: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, RunnerError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, RunnerError> {
    if cli.threads == Some(0) {
        return Err(RunnerError::Config("--threads must be positive".into()));
    }
    let cfg = load_config(&cli)?;
    let dir = cfg.output_dir.clone();
    match &cli.command {
        Command::Certify => {
            let suite = with_threads(cli.threads, || run_certification(&cfg))??;
            for r in &suite.reports {
                print!("{r}");
            }
            let path = write_json(&dir, "certification.json", &suite)?;
            println!("overall: {} ({})", if suite.passed { "pass" } else { "FAIL" }, path.display());
            Ok(suite.exit_code() as u8)
        }
        Command::Grid => {
            let res = with_threads(cli.threads, || run_grid(&cfg))??;
            report_sweep(&dir, "grid", &res)
        }
        Command::Pablate => {
            let res = with_threads(cli.threads, || run_pablation(&cfg))??;
            report_sweep(&dir, "pablate", &res)
        }
        Command::Probe { features, eval, pca_dim } => {
            let train = read_dataset(features)?;
            let eval_ds = eval.as_deref().map(read_dataset).transpose()?;
            let eval_set =
                eval_ds.as_ref().map(|e| EvalSet { features: &e.x, labels: &e.y_obs, spurious: &e.spurious_attr });
            let seed = cfg.master_seed;
            let report = match pca_dim {
                Some(dim) => {
                    pca_project_probe(&train.x, &train.y_obs, &train.spurious_attr, *dim, &cfg.probe, seed, eval_set)?
                }
                None => empirical_probe(&train.x, &train.y_obs, &train.spurious_attr, &cfg.probe, seed, eval_set)?,
            };
            let path = write_json(&dir, "probe_report.json", &report)?;
            println!(
                "worst-group {:.4}  average {:.4}  C = {}  ({})",
                report.worst_group_accuracy,
                report.average_accuracy,
                report.chosen_reg,
                path.display()
            );
            Ok(0)
        }
        Command::Gen { n, eta_core, eta_spu, env, flip_core, drop_spu } => {
            let recipe = match &cfg.problem {
                ProblemSource::Benchmark(b) => b.clone(),
                _ => BenchmarkRecipe::default(),
            };
            let env = match env {
                Env::Train => Environment::Train,
                Env::Test => Environment::Test,
            };
            let seed = derive_seed(cfg.master_seed, 0);
            let mut ds = make_dominoes(&recipe.core, &recipe.spurious, *n, *eta_core, *eta_spu, env, seed)?;
            if let Some(t) = drop_spu {
                ds = drop_to_spurious_target(&ds, *t, seed)?;
            }
            if let Some(t) = flip_core {
                ds = flip_core_noise(&ds, *t, seed)?;
            }
            fs::create_dir_all(&dir)?;
            let path = dir.join("dataset.csv");
            ds.write_csv(fs::File::create(&path)?)?;
            let st = group_statistics(&ds, false);
            println!(
                "{} rows  p0 {:.4}  eta_core {:.4}  eta_spu {:.4}  ({})",
                st.n,
                st.p0,
                st.eta_core,
                st.eta_spu,
                path.display()
            );
            Ok(0)
        }
    }
}

fn read_dataset(path: &Path) -> Result<GroupedDataset, RunnerError> {
    Ok(GroupedDataset::read_csv(fs::File::open(path)?)?)
}

fn report_sweep(dir: &Path, stem: &str, res: &spurlab::runner::GridResult) -> Result<u8, RunnerError> {
    let path = write_grid(dir, stem, res)?;
    let failed = res.records.iter().filter(|r| r.error.is_some()).count();
    println!("{} records ({} failed) -> {}", res.records.len(), failed, path.display());
    for r in res.records.iter().filter_map(|r| r.error.as_ref()).take(5) {
        eprintln!("  failed: {r}");
    }
    Ok(0)
}
