use std::path::PathBuf;
use std::process::ExitCode;

use bcreid::config::{Mode, RunConfig};
use bcreid::{pipeline, report, Error, Result};
use clap::{Args, Parser, Subcommand};

/// Lifelong backward-compatible re-identification experiments.
#[derive(Parser)]
#[command(name = "bcreid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into the data directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Data-generation seed, overriding `[benchmark] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per seed into `{out}/{mode}/seed_{seed}` and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        /// proposed, finetune, joint, base+cmcl, base+pcl, base+pcl+cac or custom.
        #[arg(long)]
        mode: Option<String>,
        /// Train this seed only, overriding `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate finished runs (a run directory or any directory above runs).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Merge evaluated runs into a markdown report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in paths {
        let found = pipeline::find_runs(p)?;
        if found.is_empty() {
            return Err(Error::Config(format!("no run directories under {}", p.display())));
        }
        runs.extend(found);
    }
    Ok(runs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.benchmark.seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let b = pipeline::gen_data(&cfg, &dir)?;
            for ds in &b.suite {
                println!(
                    "task {}: {} train, {} query, {} gallery images",
                    ds.index(),
                    ds.train.len(),
                    ds.query.len(),
                    ds.gallery.len()
                );
            }
            println!("wrote {} tasks to {}", b.suite.len(), dir.display());
        }
        Command::Train { common, mode, seed, out } => {
            let cfg = load_config(&common)?;
            let mode = match mode {
                Some(m) => Mode::parse(&m).ok_or_else(|| Error::Config(format!("unknown mode {m:?}")))?,
                None => cfg.mode,
            };
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            for s in seeds {
                let dir = pipeline::run_dir(&out, mode, s);
                eprintln!("training {} seed {s} into {}", mode.name(), dir.display());
                let ev = pipeline::train(&cfg, mode, s, &cfg.data_dir, &dir, &mut |m| eprintln!("  {m}"))?;
                println!(
                    "{} seed {s}: average mAP {:.4}, Rank-1 {:.4}; unified mAP {:.4}",
                    mode.name(),
                    ev.average_map,
                    ev.average_rank1,
                    ev.unified.map
                );
            }
        }
        Command::Evaluate { common: _, runs } => {
            for r in expand(&runs)? {
                let ev = pipeline::evaluate(&r)?;
                println!(
                    "{}: average mAP {:.4}, Rank-1 {:.4}; unified mAP {:.4}; backfilled average mAP {:.4}",
                    r.display(),
                    ev.average_map,
                    ev.average_rank1,
                    ev.unified.map,
                    ev.backfilled_average_map
                );
            }
        }
        Command::Report { common: _, runs, out } => {
            let text = report::report(&expand(&runs)?)?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    bcreid::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
