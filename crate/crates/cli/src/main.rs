use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bmip_core::aggregation::AggregationStrategy;
use bmip_core::experiment::{
    self, load_run, render_report, summarize, ExperimentConfig, SweepSpec, OUTPUT_ROOT_ENV,
};
use bmip_core::verify::{gradcheck_suite, oracle_suite, ORACLE_TOLERANCE, TOLERANCE};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmip", version, about = "Prompt tuning experiments on a synthetic dual encoder")]
struct Cli {
    /// Root directory for runs, sweeps and cached backbones.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed list: a count N means 1..=N, otherwise comma separated values.
    #[arg(long)]
    seeds: Option<String>,
    /// Concurrent seeds (0 lets the pool decide).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse) the backbone, tune prompts per seed and evaluate.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<AggregationStrategy>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        /// Validate the config and print the plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-render the tables of a finished run directory.
    Report { dir: PathBuf },
    /// Ablation sweep over strategies, depths and lengths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<AggregationStrategy>,
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "3")]
        seeds: String,
    },
    /// Compare the model forward against the naive reference forward.
    Oracle {
        #[arg(long, default_value = "2")]
        seeds: String,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if s.is_empty() {
        bail!("--seeds: empty seed list");
    }
    let seeds: Vec<u64> = if s.contains(',') {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().with_context(|| format!("--seeds: bad seed {p:?}")))
            .collect::<Result<_>>()?
    } else {
        let n: u64 = s.parse().with_context(|| format!("--seeds: bad count {s:?}"))?;
        (1..=n).collect()
    };
    if seeds.is_empty() {
        bail!("--seeds: empty seed list");
    }
    Ok(seeds)
}

fn load_config(common: &Common, out: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &common.seeds {
        cfg.run.seeds = parse_seeds(s)?;
    }
    if let Some(w) = common.workers {
        cfg.run.workers = w;
    }
    if out.is_some() && cfg.run.output_dir.is_none() {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_report_dir(dir: &Path) -> Result<()> {
    let (manifest, records) = load_run(dir)?;
    let report = summarize(&records)?;
    print!("{}", render_report(&report));
    for s in manifest.seeds.iter().filter(|s| !s.ok) {
        println!("seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
    }
    if manifest.status != "complete" {
        println!("run status: {}", manifest.status);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            common,
            strategy,
            depth,
            length,
            dry_run,
        } => {
            let mut cfg = load_config(&common, &cli.out)?;
            if let Some(s) = strategy {
                cfg.prompt.aggregation = s;
            }
            if let Some(d) = depth {
                cfg.prompt.depth = d;
            }
            if let Some(l) = length {
                cfg.prompt.length = l;
            }
            cfg.validate()?;
            if dry_run {
                print!("{}", cfg.plan());
                return Ok(true);
            }
            let outcome = experiment::run(&cfg)?;
            if let Some(r) = &outcome.report {
                print!("{}", render_report(r));
            }
            println!("artifacts in {}", outcome.dir.display());
            for s in outcome.manifest.seeds.iter().filter(|s| !s.ok) {
                eprintln!("seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
            }
            Ok(outcome.manifest.status == "complete")
        }
        Command::Report { dir } => {
            print_report_dir(&dir)?;
            Ok(true)
        }
        Command::Sweep {
            common,
            strategies,
            depths,
            lengths,
        } => {
            let cfg = load_config(&common, &cli.out)?;
            let spec = SweepSpec {
                strategies: if strategies.is_empty() {
                    AggregationStrategy::ALL.to_vec()
                } else {
                    strategies
                },
                depths,
                lengths,
            };
            let (report, outcomes, dir) = experiment::sweep(&cfg, &spec)?;
            print!("{}", experiment::render_sweep(&report));
            println!("sweep written to {}", dir.display());
            Ok(outcomes.iter().all(|o| o.manifest.status == "complete"))
        }
        Command::Gradcheck { seeds } => {
            let checks = gradcheck_suite(&parse_seeds(&seeds)?)?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{:<4} seed {:>2}  {:<44} entries {:>4}  rel err {:.2e}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.seed,
                    c.name,
                    c.entries,
                    c.rel_error
                );
                ok &= c.passed;
            }
            println!("{} checks, tolerance {TOLERANCE:e}: {}", checks.len(), if ok { "pass" } else { "FAIL" });
            Ok(ok)
        }
        Command::Oracle { seeds } => {
            let checks = oracle_suite(&parse_seeds(&seeds)?)?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{:<4} seed {:>2}  {:<16} J={}  max |diff| {:.2e}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.seed,
                    c.strategy.as_str(),
                    c.depth,
                    c.max_abs_diff
                );
                ok &= c.passed;
            }
            println!(
                "{} checks, tolerance {ORACLE_TOLERANCE:e}: {}",
                checks.len(),
                if ok { "pass" } else { "FAIL" }
            );
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
