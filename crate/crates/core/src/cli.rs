//! Command-line surface: gen-data, score, mask, train, eval, sweep, validate.

use crate::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::pipeline::{self, Overrides};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "cptlab", version, about = "Continual pre-training laboratory: score importance on source data, freeze columns, adapt to a target corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Deterministic worker count for intra-op parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,

    /// Artifact directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Override [training].seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic bilingual corpora and held-out splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Compute importance scores on source calibration data
    /// (pre-trains and caches the base model if absent).
    Score {
        #[command(flatten)]
        common: Common,
        /// Override [scoring].method: wanda|magnitude|random|sparsegpt|fim.
        #[arg(long)]
        method: Option<String>,
        /// Override [scoring].calib_samples.
        #[arg(long = "calib-n")]
        calib_n: Option<usize>,
    },
    /// Build the freeze mask from the score file (or the HFT mask).
    Mask {
        #[command(flatten)]
        common: Common,
        /// Override [masking].ratio.
        #[arg(long)]
        ratio: Option<f64>,
        /// Override [masking].granularity: column|row|element.
        #[arg(long)]
        granularity: Option<String>,
    },
    /// Continually pre-train on the target corpus with masked updates.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override [training].method: fft|ssu|hft|gmt.
        #[arg(long)]
        method: Option<String>,
    },
    /// Report source retention and target acquisition of the adapted model.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run the freezing-ratio sweep over [eval].ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Validate a config file, reporting every violation.
    Validate {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // ignore the error if a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Execute a parsed command; errors are returned for main to report.
pub fn run(cli: Cli) -> Result<()> {
    init_workers(cli.workers);
    match cli.command {
        Command::GenData { common } => {
            let cfg = load(&common, &Overrides::default())?;
            let tv = pipeline::gen_data(&cfg, &common.out)?;
            println!(
                "gen-data: wrote 4 corpora to {} (train {} tokens/language, unigram TV distance {:.3})",
                common.out.display(),
                cfg.data.train_tokens,
                tv
            );
            Ok(())
        }
        Command::Score {
            common,
            method,
            calib_n,
        } => {
            let overrides = Overrides {
                seed: common.seed,
                scoring_method: method,
                calib_samples: calib_n,
                ..Overrides::default()
            };
            let cfg = load(&common, &overrides)?;
            pipeline::run_score(&cfg, &common.out)?;
            println!(
                "score: {} scores for the base model -> {}",
                cfg.scoring.method,
                common.out.join(pipeline::SCORES_FILE).display()
            );
            Ok(())
        }
        Command::Mask {
            common,
            ratio,
            granularity,
        } => {
            let overrides = Overrides {
                seed: common.seed,
                mask_ratio: ratio,
                granularity,
                ..Overrides::default()
            };
            let cfg = load(&common, &overrides)?;
            let stats = pipeline::run_mask(&cfg, &common.out)?;
            println!(
                "mask: {} {} mask at k={} -> {} (global frozen fraction {:.4})",
                stats.method,
                stats.granularity,
                stats.ratio,
                common.out.join(pipeline::MASK_FILE).display(),
                stats.global_frozen_fraction
            );
            Ok(())
        }
        Command::Train { common, method } => {
            let overrides = Overrides {
                seed: common.seed,
                train_method: method,
                ..Overrides::default()
            };
            let cfg = load(&common, &overrides)?;
            pipeline::run_train(&cfg, &common.out)?;
            println!(
                "train: {} for {} steps -> {}",
                cfg.training.method.name(),
                cfg.training.total_steps,
                common.out.join(pipeline::ADAPTED_CKPT).display()
            );
            Ok(())
        }
        Command::Eval { common } => {
            let cfg = load(&common, &Overrides::default())?;
            let r = pipeline::run_eval(&cfg, &common.out)?;
            println!(
                "eval: source ppl {:.3} -> {:.3} ({:+.2}%), target ppl {:.3} -> {:.3} ({:+.2}%)",
                r.source_ppl_before,
                r.source_ppl_after,
                r.source_rel_change_pct,
                r.target_ppl_before,
                r.target_ppl_after,
                r.target_rel_change_pct
            );
            println!(
                "eval: forgetting {:+.2}%, acquisition {:+.2}% -> {}",
                r.forgetting_pct,
                r.acquisition_pct,
                common.out.join(pipeline::REPORT_FILE).display()
            );
            Ok(())
        }
        Command::Sweep { common } => {
            let cfg = load(&common, &Overrides::default())?;
            let rows = pipeline::run_sweep(&cfg, &common.out)?;
            println!("ratio\tforgetting%\tacquisition%");
            for r in &rows {
                println!(
                    "{:.3}\t{:+.2}\t{:+.2}",
                    r.ratio, r.report.forgetting_pct, r.report.acquisition_pct
                );
            }
            println!("sweep: wrote sweep.tsv and sweep.jsonl to {}", common.out.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = RunConfigFile::load(&config)?;
            let (errors, notices) = cfg.validate();
            for n in &notices {
                println!("notice: {n}");
            }
            if errors.is_empty() {
                println!("{}", cfg.to_toml());
                Ok(())
            } else {
                Err(Error::ConfigViolations(errors))
            }
        }
    }
}

fn load(common: &Common, overrides: &Overrides) -> Result<RunConfigFile> {
    let mut o = overrides.clone();
    if o.seed.is_none() {
        o.seed = common.seed;
    }
    pipeline::load_config(&common.config, &o)
}

/// Parse argv and run; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path with status 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
