use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use srd_core::baselines::TrainMode;
use srd_core::config::ExperimentConfig;
use srd_core::data::SelectionPolicy;
use srd_core::harness;
use srd_core::metrics::fmt6;
use srd_core::Error;

#[derive(Parser)]
#[command(name = "srd", about = "Teacher-student distillation experiments on synthetic open-set data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training mode, e.g. srd, kd, srd+kd, kd+ood, pseudo_label.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Share of the unlabeled pool to use, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// How the unlabeled share is chosen: random or teacher_score.
    #[arg(long)]
    policy: Option<SelectionPolicy>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and its CSV export.
    GenerateData(Common),
    /// Pretrain (or load from cache) the teacher for each seed.
    Pretrain(Common),
    /// Full two-stage run for each seed.
    Distill(Common),
    /// One run per unlabeled fraction and selection policy.
    Sweep(Common),
    /// Side-by-side table of finished runs.
    Compare {
        dirs: Vec<PathBuf>,
        /// Print markdown instead of CSV.
        #[arg(long)]
        markdown: bool,
    },
    /// Write test-set features of the teacher (and saved student).
    DumpFeatures(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config {
                line: 0,
                message: format!("{}: {e}", p.display()),
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(m) = c.mode {
        cfg.run.mode = m;
    }
    if let Some(f) = c.fraction {
        cfg.run.fraction = f;
    }
    if let Some(p) = c.policy {
        cfg.run.policy = p;
    }
    cfg.validate().map_err(|message| Error::Config { line: 0, message })?;
    Ok(cfg)
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenerateData(c) => {
            let cfg = load_config(&c)?;
            let data = harness::generate_data(&cfg, &cfg.run.out_dir)?;
            println!(
                "labeled {} unlabeled {} (in-distribution {}) test {} -> {}",
                data.labeled().labels.len(),
                data.unlabeled().len(),
                fmt6(data.ind_fraction()),
                data.test().labels.len(),
                cfg.run.out_dir.display()
            );
        }
        Command::Pretrain(c) => {
            let mut cfg = load_config(&c)?;
            if cfg.run.teacher_cache.as_os_str().is_empty() {
                cfg.run.teacher_cache = cfg.run.out_dir.join("teachers");
            }
            let data = srd_core::data::generate(&cfg.dataset)?;
            for &seed in &cfg.run.seeds {
                let (_, acc) = harness::obtain_teacher(&cfg, &data, seed)?;
                println!(
                    "seed {seed}: teacher {} held-out accuracy {}",
                    harness::teacher_key(&cfg, seed),
                    fmt6(acc)
                );
            }
        }
        Command::Distill(c) => {
            let cfg = load_config(&c)?;
            let out = harness::run(&cfg)?;
            print!("{}", out.summary.csv());
            println!("results in {}", out.dir.display());
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let out = harness::sweep(&cfg)?;
            for (policy, ok) in out.trend {
                println!("{policy}: {}", if ok { "nondecreasing" } else { "NOT nondecreasing" });
            }
            print!(
                "{}",
                fs::read_to_string(cfg.run.out_dir.join("sweep.csv")).context("reading sweep.csv")?
            );
        }
        Command::Compare { dirs, markdown } => {
            let table = harness::compare(&dirs)?;
            print!("{}", if markdown { table.to_markdown() } else { table.to_csv() });
        }
        Command::DumpFeatures(c) => {
            let cfg = load_config(&c)?;
            for &seed in &cfg.run.seeds {
                for path in harness::dump_features(&cfg, seed, &cfg.run.out_dir)? {
                    println!("{}", path.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config { .. }) => ExitCode::from(2),
                Some(Error::AccuracyFloor { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
