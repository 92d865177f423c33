use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use reiil_cli::config::{parse_seed_list, ExperimentConfig};
use reiil_cli::{cmd_ei, cmd_gen, cmd_report, cmd_run, selftest};
use reiil_core::envinfer::EiConfig;

#[derive(Parser)]
#[command(name = "reiil", version, about = "Invariant learning with inferred environments")]
struct Cli {
    /// Worker threads for independent jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seeds, e.g. `0,1,2` or `0-4`.
    #[arg(long)]
    seed_list: Option<String>,
    /// Output root; overrides REIL_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets and a manifest.
    Gen(ExperimentArgs),
    /// Run every configured method on every seed.
    Run(ExperimentArgs),
    /// Aggregate finished runs into aggregate, table and figure CSVs.
    Report {
        /// Experiment output roots.
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Environment inference with a saved reference model.
    Ei {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON file with environment-inference settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(args: &ExperimentArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = &args.seed_list {
        cfg.seeds = parse_seed_list(s)?;
    }
    let out = cfg.resolve_out(args.out.as_deref());
    Ok((cfg, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> anyhow::Result<ExitCode> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .context("building worker pool")?;
    match cli.command {
        Command::Gen(args) => {
            let (cfg, out) = load(&args)?;
            let m = cmd_gen(&cfg, &out)?;
            for s in &m.seeds {
                let p = &s.train_pool;
                println!(
                    "seed {}: {} training rows, shuffled fraction {}, MI gap {}",
                    s.seed,
                    p.rows,
                    p.shuffled_fraction.map_or("-".into(), |v| format!("{v:.4}")),
                    p.mi.map_or("-".into(), |m| format!("{:.4}", m.gap)),
                );
            }
            println!("wrote {}", out.join("data").display());
        }
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            let report = cmd_run(&cfg, &out)?;
            for s in &report.summaries {
                let fmt = |k: &str| s.summary.get(k).map_or("-".into(), |v| format!("{:.4} ± {:.4}", v.mean, v.std));
                println!(
                    "{:14} val {:22} test {:22}",
                    s.method.name(),
                    fmt("val_error"),
                    fmt("test_error")
                );
            }
            for r in report.results.iter().filter(|r| r.message.is_some()) {
                eprintln!("{} seed {}: {}", r.method, r.seed, r.message.as_deref().unwrap_or_default());
            }
            if report.failures() > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { roots, out } => {
            let r = cmd_report(&roots, &out)?;
            println!("aggregated {} metric rows into {}", r.aggregate.len(), out.display());
        }
        Command::Ei {
            model,
            data,
            config,
            seed,
            out,
        } => {
            let cfg: EiConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => EiConfig::default(),
            };
            let s = cmd_ei(&model, &data, &cfg, seed, &out)?;
            println!("objective {} sizes {:?}", s.objective, s.env_sizes);
        }
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            for c in &checks {
                println!("{}", c.line());
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
