use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use clu_core::experiment::{
    aggregate, format_aggregate, report_json, run_experiment, run_seed, seed_dir, sweep_gamma, train_final_oracle,
    write_run, Aggregate, ExperimentConfig, RunOptions, RunReport, RunResult, RunState, RunTiming,
};
use clu_core::verification::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "clu", version, about = "Continual learning-unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sequence for every seed (or one seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint; requires --seed.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many tasks, leaving a checkpoint behind.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Repeat the run for each saliency threshold and tabulate the metrics.
    SweepGamma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        gammas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical checks of the update-direction theory.
    Verify {
        #[arg(value_enum, default_value_t = SuiteArg::Props)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the retrain-from-scratch oracle for the final remaining set.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an output directory written by `run`.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Props,
    All,
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.out_dir.clone())
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: Option<PathBuf>, stop_after: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    let out = out_dir(&cfg, out);
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if resume.is_none() && stop_after.is_none() {
        let result = run_experiment(&cfg, Some(&out))?;
        print!("{}", format_aggregate(&result.aggregate));
        println!("wrote {}", out.display());
        return Ok(());
    }
    let Some(seed) = seed else {
        bail!("--resume and --stop-after need --seed");
    };
    let state = match &resume {
        Some(p) => Some(RunState::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let dir = seed_dir(&out, seed);
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.bin");
    let opts = RunOptions {
        resume: state,
        stop_after,
        checkpoint_path: Some(ckpt.clone()),
    };
    match run_seed(&cfg, seed, opts)? {
        RunResult::Stopped(s) => println!("stopped before task {}; checkpoint at {}", s.next_task, ckpt.display()),
        RunResult::Finished(o) => {
            write_run(&dir, &o)?;
            print!("{}", report_json(&o.report)?);
        }
    }
    Ok(())
}

fn report(out: &Path) -> anyhow::Result<()> {
    let mut runs: Vec<(RunReport, RunTiming)> = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(out)
        .with_context(|| format!("reading {}", out.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    entries.sort();
    for dir in entries {
        let r: RunReport = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?;
        let t: RunTiming = serde_json::from_str(&fs::read_to_string(dir.join("timing.json"))?)?;
        runs.push((r, t));
    }
    let Some(first) = runs.first() else {
        bail!("no seed directories with metrics.json under {}", out.display());
    };
    let method = first.0.method;
    if runs.iter().any(|(r, _)| r.method != method) {
        bail!("{} mixes runs of different methods", out.display());
    }
    let agg: Aggregate = aggregate(method, &runs);
    print!("{}", format_aggregate(&agg));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            resume,
            stop_after,
        } => run(&config, seed, out, resume, stop_after),
        Command::SweepGamma { config, gammas, out } => (|| {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out_dir(&cfg, out);
            let (csv, _) = sweep_gamma(&cfg, &gammas, Some(&out))?;
            print!("{csv}");
            Ok(())
        })(),
        Command::Verify { suite, seed, out } => (|| {
            let suite = match suite {
                SuiteArg::Props => Suite::Props,
                SuiteArg::All => Suite::All,
            };
            let report = run_suite(suite, seed)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => fs::write(&p, &json)?,
                None => print!("{json}"),
            }
            for c in &report.checks {
                eprintln!("{} {} (residual {:.3e}, tolerance {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.residual, c.tolerance);
            }
            if !report.passed {
                bail!("verification failed");
            }
            Ok(())
        })(),
        Command::Oracle { config, seed, out } => (|| {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (spec, params, acc) = train_final_oracle(&cfg, seed)?;
            println!("oracle test accuracy on retained classes: {:.2}%", 100.0 * acc);
            if let Some(p) = out {
                let json = serde_json::json!({ "seed": seed, "spec": spec, "params": params, "test_accuracy": acc });
                fs::write(&p, serde_json::to_string_pretty(&json)? + "\n")?;
                println!("wrote {}", p.display());
            }
            Ok(())
        })(),
        Command::Report { out } => report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
