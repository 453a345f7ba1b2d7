use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use camoe::datagen::{generate, save_csv};
use camoe::harness::{load_config, pareto_report, read_job_outputs, ExperimentConfig, JobFailure, Runner, Stage};

/// Multi-task CTR experiments: data generation, training, calibration,
/// evaluation, auction simulation and ablation tables.
#[derive(Parser, Debug)]
#[command(name = "camoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run this seed only, replacing the config's seed list.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured impressions to `<out>/data.csv`. `--seed` sets the sampling seed.
    Generate(Common),
    /// Train every (arm, seed) job; writes checkpoints and training logs.
    Train(Common),
    /// Fit per-task temperatures on each job's validation split.
    Calibrate(Common),
    /// Evaluate checkpoints on the shared test split and write the tables.
    Evaluate(Common),
    /// Run the auction simulation for every checkpoint.
    Simulate(Common),
    /// Train, calibrate, evaluate and simulate every job, then write all tables.
    Ablate(Common),
    /// Recompute the Pareto report from an existing output directory.
    Pareto {
        /// Directory written by `ablate` or `evaluate`.
        #[arg(long, value_name = "DIR")]
        reports: PathBuf,
        /// Where to write the report; defaults to `<reports>/pareto.json`.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// Failures of individual jobs; the run itself completed.
#[derive(Debug)]
struct JobsFailed(usize);

impl std::fmt::Display for JobsFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} job(s) failed", self.0)
    }
}

impl std::error::Error for JobsFailed {}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn report_failures(failures: &[JobFailure]) -> Result<()> {
    for f in failures {
        eprintln!("job {}/{} failed at {}: {}", f.arm, f.seed, f.stage.as_str(), f.error);
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(JobsFailed(failures.len()).into())
    }
}

fn run_stages(common: &Common, stages: &[Stage], tables: bool) -> Result<()> {
    let (cfg, out) = load(common)?;
    if stages.contains(&Stage::Simulate) && !stages.contains(&Stage::Train) && cfg.simulation.is_none() {
        return Err(camoe::Error::Config(format!("`{}` has no [simulation] section", common.config.display())).into());
    }
    let jobs = cfg.arms.len() * cfg.seeds.len();
    let runner = Runner::new(cfg, &out)?;
    let failures = runner.run_stages(stages)?;
    if tables {
        runner.write_tables(&failures)?;
    }
    println!("{jobs} job(s), {} failed; outputs in {}", failures.len(), out.display());
    report_failures(&failures)
}

fn pareto(reports: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(&reports.join("experiment.toml"))?;
    let outputs = read_job_outputs(&cfg, reports)?;
    let report = pareto_report(&cfg, &outputs)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let path = out.map_or_else(|| reports.join("pareto.json"), Path::to_path_buf);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (mut cfg, out) = load(&c)?;
            if let Some(seed) = c.seed {
                cfg.data.seed = seed;
            }
            if cfg.data_csv.is_some() {
                bail!(camoe::Error::Config(
                    "generate: the config reads its data from `data_csv`".into()
                ));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let d = generate(&cfg.data)?;
            let path = out.join("data.csv");
            save_csv(&d, &path)?;
            println!("{} impressions written to {}", d.len(), path.display());
            Ok(())
        }
        Command::Train(c) => run_stages(&c, &[Stage::Train], false),
        Command::Calibrate(c) => run_stages(&c, &[Stage::Calibrate], false),
        Command::Evaluate(c) => run_stages(&c, &[Stage::Evaluate], true),
        Command::Simulate(c) => run_stages(&c, &[Stage::Simulate], true),
        Command::Ablate(c) => {
            let (cfg, out) = load(&c)?;
            let jobs = cfg.arms.len() * cfg.seeds.len();
            let (red, failures) = Runner::new(cfg, &out)?.ablate()?;
            let names: Vec<&str> = red.tables.iter().map(|t| t.name.as_str()).collect();
            println!(
                "{jobs} job(s), {} failed; tables [{}] and pareto.json in {}",
                failures.len(),
                names.join(", "),
                out.display()
            );
            report_failures(&failures)
        }
        Command::Pareto { reports, out } => pareto(&reports, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<camoe::Error>(), Some(camoe::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
