//! Argument parsing and dispatch for the `cbev` binary.

use std::path::PathBuf;

use cbev_core::train::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{self, SelftestPlan, BENCH_HEADER};
use crate::config::{BackendName, RunConfig, SplitName};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cbev", version, about = "Cross-view retrieval with BEV matching and pose estimation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Directory holding one subdirectory per trained stage.
    #[arg(long, global = true)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub results: Option<PathBuf>,
    /// Panorama headings are random; match over all orientations.
    #[arg(long, global = true, conflicts_with = "orientation_known")]
    pub orientation_unknown: bool,
    /// Panoramas share a known heading.
    #[arg(long, global = true)]
    pub orientation_known: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Fft,
    Bruteforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Candidates kept from the first stage.
    #[arg(long)]
    pub k: Option<usize>,
    /// Rank by BEV scores alone.
    #[arg(long)]
    pub no_prior: bool,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed all references with the stage-one model.
    Index,
    /// Run both stages and write per-query results.
    Retrieve(EvalArgs),
    /// Run both stages and write results and metrics.
    Eval(EvalArgs),
    /// Run the numerical self-checks.
    Selftest {
        /// Smaller battery sizes.
        #[arg(long)]
        quick: bool,
    },
    /// Time both matcher backends.
    Bench {
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 8, 32])]
        thetas: Vec<usize>,
    },
}

fn apply_eval(config: &mut RunConfig, a: &EvalArgs) {
    if let Some(k) = a.k {
        config.eval.k = k;
    }
    if a.no_prior {
        config.eval.prior_enabled = false;
    }
    if let Some(b) = a.backend {
        config.eval.backend = match b {
            BackendArg::Fft => BackendName::Fft,
            BackendArg::Bruteforce => BackendName::Bruteforce,
        };
    }
    if let Some(s) = a.split {
        config.eval.split = match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Test => SplitName::Test,
        };
    }
}

/// Loads the configuration file, if any, and applies the flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let f = &cli.common;
    if let Some(s) = f.seed {
        c.seed = s;
    }
    for (flag, slot) in [
        (&f.dataset, &mut c.paths.dataset),
        (&f.checkpoints, &mut c.paths.checkpoints),
        (&f.index, &mut c.paths.index),
        (&f.results, &mut c.paths.results),
    ] {
        if let Some(p) = flag {
            *slot = p.clone();
        }
    }
    if f.orientation_unknown {
        c.orientation_known = false;
    }
    if f.orientation_known {
        c.orientation_known = true;
    }
    match &cli.command {
        Command::Retrieve(a) | Command::Eval(a) => apply_eval(&mut c, a),
        Command::Train {
            stage,
            epochs: Some(e),
        } => match stage {
            StageArg::One => c.stage_one.epochs = *e,
            StageArg::Two => c.stage_two.epochs = *e,
        },
        _ => {}
    }
    Ok(c)
}

/// Runs a parsed command, printing its report to standard output.
pub fn run(cli: &Cli) -> CliResult<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let ds = commands::synth(&config)?;
            println!("{} worlds, {} samples", ds.worlds.len(), ds.samples.len());
        }
        Command::Train { stage, .. } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
            };
            let out = commands::train(&config, stage)?;
            if let Some(last) = out.log.last() {
                println!(
                    "stage {} finished: loss {:.4}, in-batch accuracy {:.3}",
                    stage.as_str(),
                    last.loss,
                    last.accuracy_in_batch
                );
            }
        }
        Command::Index => {
            let m = commands::index(&config)?;
            println!("{} references indexed", m.ids.len());
        }
        Command::Retrieve(_) => {
            let (ev, m) = commands::retrieve_eval(&config)?;
            println!("{} queries, k = {}, R@1 {:.4}", ev.results.len(), ev.k, m.r_at_1);
        }
        Command::Eval(_) => {
            let (_, m) = commands::retrieve_eval(&config)?;
            print!("{}", toml::to_string(&m).expect("metrics serialize"));
        }
        Command::Selftest { quick } => {
            let plan = if *quick {
                SelftestPlan {
                    fft_configurations: 6,
                    planted_trials: 10,
                    identity_trials: 10,
                    ..SelftestPlan::default()
                }
            } else {
                SelftestPlan::default()
            };
            let lines = commands::selftest(&SelftestPlan {
                seed: config.seed,
                ..plan
            })?;
            for l in &lines {
                println!("{}", commands::format_check(l));
            }
            let failed = lines.iter().filter(|l| !l.passed).count();
            println!("{} checks, {} failed", lines.len(), failed);
            if failed > 0 {
                return Err(CliError::SelftestFailed(failed));
            }
        }
        Command::Bench {
            channels,
            repeats,
            thetas,
        } => {
            config.validate()?;
            let rows = commands::bench(config.grid_spec(), thetas, *channels, *repeats, config.seed)?;
            println!("{BENCH_HEADER}");
            for r in &rows {
                println!("{}", r.line());
            }
        }
    }
    Ok(())
}
