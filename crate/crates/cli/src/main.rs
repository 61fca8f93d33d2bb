//! `tokalign`: run the pipeline end to end or one stage at a time. Every
//! command prints a JSON report on stdout.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tokalign::cf::export_logits;
use tokalign::data::write_jsonl;
use tokalign::loss::grad_check;
use tokalign::pipeline::{alpha_sweep, prepare, sweep_table, train_cf_stage, write_training_log};
use tokalign::{CfBackend, CfModel, DecoderModel, Prepared, Runner};

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "tokalign", version, about = "Token-level collaborative alignment for generative recommendation")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Write synthetic interactions.jsonl and items.jsonl.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, split and tokenize; writes dataset.json and items.jsonl.
    PrepareData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CF model on prepared data.
    TrainCf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write CF logits for one split's cases plus a JSON manifest.
    ExportLogits {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the decoder with the configured objective, alpha and ablation.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Constrained beam search over the test cases.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cf: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Per-case JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finite-difference check of both soft objectives on random instances.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        positions: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Soft-NTP runs over several alphas sharing data and the CF model.
    AlphaSweep {
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        /// Tab-separated table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Every stage in sequence.
    Run,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn runner(cfg: &tokalign::ExperimentConfig, data: &Path, cf: &Path) -> Result<Runner> {
    let prepared = Prepared::load(data).with_context(|| format!("loading prepared data from {}", data.display()))?;
    let cf = CfModel::load(cf).with_context(|| format!("loading CF model {}", cf.display()))?;
    if cf.n_items() != prepared.catalog.len() {
        bail!("CF model has {} items, catalog has {}", cf.n_items(), prepared.catalog.len());
    }
    Ok(Runner::from_parts(cfg, prepared, cf))
}

fn execute(cli: Cli) -> Result<bool> {
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::ShowConfig => write!(std::io::stdout(), "{}", cfg.to_toml()?)?,
        Command::SynthGen { out } => {
            let data = tokalign::synth::generate(&cfg.synth)?;
            std::fs::create_dir_all(&out)?;
            write_jsonl(&out.join("interactions.jsonl"), &data.interactions)?;
            write_jsonl(&out.join("items.jsonl"), &data.items)?;
            print_json(&json!({
                "interactions": data.interactions.len(),
                "items": data.items.len(),
                "out": out,
            }))?;
        }
        Command::PrepareData { out } => {
            cfg.validate()?;
            let prepared = prepare(&cfg)?;
            prepared.save(&out)?;
            print_json(&json!({
                "stats": prepared.dataset.stats,
                "split_policy": prepared.dataset.split_policy,
                "input_hashes": prepared.input_hashes,
                "vocab_size": prepared.catalog.vocab().len(),
                "trie_depth": prepared.catalog.trie().max_depth(),
            }))?;
        }
        Command::TrainCf { data, out } => {
            let prepared = Prepared::load(&data)?;
            let model = train_cf_stage(&cfg, &prepared)?;
            model.save(&out)?;
            print_json(&json!({
                "n_items": model.n_items(),
                "final_loss": model.final_loss(),
                "loss_history": model.loss_history,
            }))?;
        }
        Command::ExportLogits { data, cf, split, out } => {
            let r = runner(&cfg, &data, &cf)?;
            let ds = &r.prepared.dataset;
            let cases = match split {
                Split::Train => &ds.train_examples,
                Split::Validation => &ds.validation_cases,
                Split::Test => &ds.test_cases,
            };
            let manifest = export_logits(&r.cf, cases, &out)?;
            print_json(&json!({ "n_items": manifest.n_items, "count": manifest.count, "out": out }))?;
        }
        Command::TrainLm { data, cf, out, log } => {
            cfg.validate()?;
            let r = runner(&cfg, &data, &cf)?;
            let (model, training) = r.train(&cfg)?;
            model.save(&out)?;
            if let Some(p) = log {
                write_training_log(&p, &training)?;
            }
            print_json(&json!({
                "label": cfg.label(),
                "config_hash": cfg.hash()?,
                "parameters": model.param_count(),
                "training": training,
            }))?;
        }
        Command::Evaluate { data, cf, lm, trace } => {
            cfg.validate()?;
            let r = runner(&cfg, &data, &cf)?;
            let model = DecoderModel::load(&lm)?;
            let eval = r.test(&cfg, &model)?;
            if let Some(p) = trace {
                write_jsonl(&p, &eval.traces)?;
            }
            print_json(&eval.report)?;
        }
        Command::GradCheck {
            instances,
            vocab,
            positions,
            step,
            tolerance,
        } => {
            let report = grad_check(cfg.seed, instances, vocab, positions, step, tolerance)?;
            print_json(&report)?;
            return Ok(report.soft_ntp_pass && report.aux_kl_pass);
        }
        Command::AlphaSweep { alphas, table } => {
            let rows = alpha_sweep(&cfg, &alphas)?;
            if table {
                write!(std::io::stdout(), "{}", sweep_table(&rows))?;
            } else {
                print_json(&rows)?;
            }
        }
        Command::Run => {
            let report = tokalign::run_experiment(&cfg)?;
            print_json(&report)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
