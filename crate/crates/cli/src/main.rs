use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mind_core::commands::{
    cmd_eval, cmd_gradcheck, cmd_isg, cmd_routes, cmd_synth, cmd_train, gradcheck_config, load_data, GradcheckOptions, EVAL_FILE,
    ISG_FILE, ROUTES_FILE,
};
use mind_core::config::RunConfig;
use mind_core::dataset::write_json;
use mind_core::mind::load_checkpoint;
use mind_core::synthgen::Heterogeneity;

/// Subject-aware mixture-of-experts decoder for fMRI responses.
#[derive(Parser)]
#[command(name = "mind", version)]
struct Cli {
    /// TOML run configuration; `MIND_<KEY>` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (the data seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-teacher dataset.
    Synth {
        #[arg(long)]
        mode: Option<Heterogeneity>,
    },
    /// Train a model and write checkpoint, log and validation report.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation windows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Leave-one-subject-out generalization.
    Isg {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump per-TR routing weights as CSV.
    Routes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subject ids; all subjects when omitted.
        #[arg(long, value_delimiter = ',')]
        subjects: Option<Vec<usize>>,
        #[arg(long, default_value_t = 100)]
        first_n_tr: usize,
    },
    /// Finite-difference check of the training objective on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn print_json(value: serde_json::Value) -> Result<()> {
    println!("{value:#}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let base = match cli.command {
        Command::Gradcheck { .. } => gradcheck_config(),
        _ => RunConfig::default(),
    };
    let mut cfg = base
        .layered(cli.config.as_deref(), std::env::vars())
        .context("loading configuration")?;
    let set_data = |cfg: &mut RunConfig, data: Option<PathBuf>| {
        if data.is_some() {
            cfg.data = data;
        }
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Synth { .. } => cfg.synth_seed = seed,
            _ => cfg.seed = seed,
        }
    }
    match cli.command {
        Command::Synth { mode } => {
            if let Some(mode) = mode {
                cfg.synth_mode = mode;
            }
            let summary = cmd_synth(&cfg, &cli.out)?;
            println!(
                "oracle ceiling: mean {:.4} min {:.4} max {:.4} (sigma {:.4})",
                summary.ceiling_mean, summary.ceiling_min, summary.ceiling_max, summary.sigma
            );
            print_json(serde_json::to_value(&summary)?)?;
        }
        Command::Train { data } => {
            set_data(&mut cfg, data);
            print_json(serde_json::to_value(cmd_train(&cfg, &cli.out)?)?)?;
        }
        Command::Eval { checkpoint, data } => {
            set_data(&mut cfg, data);
            let report = cmd_eval(&cfg, &checkpoint)?;
            fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join(EVAL_FILE), &report)?;
            println!("mean r {:.4} -> {}", report.mean_r(), cli.out.join(EVAL_FILE).display());
        }
        Command::Isg { data } => {
            set_data(&mut cfg, data);
            let report = cmd_isg(&cfg)?;
            fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join(ISG_FILE), &report)?;
            print_json(serde_json::to_value(&report)?)?;
        }
        Command::Routes {
            checkpoint,
            data,
            subjects,
            first_n_tr,
        } => {
            set_data(&mut cfg, data);
            let (model, _) = load_checkpoint(&checkpoint)?;
            let csv = cmd_routes(&model, &load_data(&cfg)?, subjects.as_deref(), first_n_tr)?;
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(ROUTES_FILE);
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        Command::Gradcheck { tokens, corrupt } => {
            let opts = GradcheckOptions {
                tokens,
                corrupt,
                ..GradcheckOptions::default()
            };
            let out = cmd_gradcheck(&cfg, &opts)?;
            for g in &out.report.groups {
                println!("{:<20} {:.3e}", g.name, g.max_rel_error);
            }
            let verdict = if out.passed { "PASS" } else { "FAIL" };
            println!("{verdict} max relative error {:.3e} (tol {:.0e})", out.max_rel_error, out.tol);
            return Ok(out.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
