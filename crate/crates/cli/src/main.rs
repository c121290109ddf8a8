//! `cmc` — train, ablate, sweep and report on three-modality feature
//! archives. Errors exit nonzero with one machine-parseable JSON line on
//! stderr.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cmc_core::data::{load_archive, synth_generate, write_archive, SynthConfig};
use cmc_core::pipeline::{
    evaluate_run, finetune_multimodal, pretrain_unimodal, report, run_two_stage, sweep,
    ReportFormat, RunConfig, SweepParam, VariantTag,
};

#[derive(Parser)]
#[command(name = "cmc", version, about = "Two-stage multimodal consensus trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: unimodal pretraining with pseudo-label refinement.
    Pretrain {
        /// Run-config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature-archive directory.
        #[arg(long)]
        data: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: multimodal finetuning from a stage-1 run.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 run directory.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics for a finished run.
    Eval {
        /// Run directory (pretrain or finetune).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated splits: test, msc, msi.
        #[arg(long, default_value = "test,msc,msi")]
        splits: String,
    },
    /// Run both stages under an ablation/variant tag.
    Ablate {
        /// One of: full, wo_plgm, wo_pfm, wo_mcr, single_task,
        /// single_task_wo_pfm, cmc_variant, gt_labels.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One full run per parameter value; aggregates metrics to sweep.csv.
    Sweep {
        /// tau, tau_c, dropout, learning_rate, shared_dim, layers, heads,
        /// rho, retention_rate.
        #[arg(long)]
        param: String,
        /// Comma-separated numeric values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic archive of class-conditional Gaussian sequences.
    Synth {
        /// Probability that all modalities agree with the multimodal class.
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1111)]
        seed: u64,
        /// Make every disagreeing sample a sign-flipped text conflict.
        #[arg(long)]
        conflict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render metric tables (csv) or line plots (svg) for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// csv or svg.
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> cmc_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> cmc_core::Result<()> {
    match cli.command {
        Command::Pretrain { config, data, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_archive(&data)?;
            let meta = pretrain_unimodal(&cfg, &dataset, &out)?;
            println!("{}", serde_json::to_string(&meta)?);
        }
        Command::Finetune { config, data, init, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_archive(&data)?;
            let meta = finetune_multimodal(&cfg, &dataset, &init, &out)?;
            println!("{}", serde_json::to_string(&meta)?);
        }
        Command::Eval { run, data, splits } => {
            let dataset = load_archive(&data)?;
            let split_names: Vec<String> =
                splits.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let metrics = evaluate_run(&run, &dataset, &split_names)?;
            cmc_core::pipeline::artifact::write_metrics(&run.join("metrics.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate { variant, config, data, out } => {
            let mut cfg = load_config(&config)?;
            cfg.variant = VariantTag::parse(&variant)?;
            let dataset = load_archive(&data)?;
            let meta = run_two_stage(&cfg, &dataset, &out)?;
            println!("{}", serde_json::to_string(&meta)?);
        }
        Command::Sweep { param, values, config, data, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_archive(&data)?;
            let param = SweepParam::parse(&param)?;
            let values: Vec<String> =
                values.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let csv = sweep(&cfg, &dataset, param, &values, &out)?;
            println!("{}", csv.display());
        }
        Command::Synth { rho, n, seed, conflict, out } => {
            let cfg = SynthConfig {
                n,
                rho,
                seed,
                text_dominance_conflict: conflict,
                ..SynthConfig::default()
            };
            let dataset = synth_generate(&cfg)?;
            write_archive(&dataset, &out)?;
            println!("{}", out.display());
        }
        Command::Report { run, format } => {
            let format = ReportFormat::parse(&format)?;
            for file in report(&run, format)? {
                println!("{}", file.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
        std::process::exit(1);
    }
}
