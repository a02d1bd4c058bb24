use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tempattn::cli::{self, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "tempattn",
    version,
    about = "Temporal attention Jacobians, sensitivity bounds and a toy spatio-temporal forecaster"
)]
struct TopLevel {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (key = value lines, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; a resolved-config snapshot and manifest land here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. --set train.epochs=20 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root seed for the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify analytic Jacobians and model gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Tolerance applied to every suite (overrides per-suite defaults).
        #[arg(long)]
        tolerance: Option<f64>,
        /// Number of random attention configurations.
        #[arg(long)]
        configs: Option<usize>,
        /// Pin the sequence length of the drawn configurations.
        #[arg(long, value_name = "T")]
        t: Option<usize>,
    },
    /// Sweep sequence lengths and check the sensitivity bounds.
    BoundsSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths, ascending.
        #[arg(long, value_name = "LIST")]
        t_values: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train forecaster variants and export metrics + attention heatmaps.
    Train {
        #[command(flatten)]
        common: Common,
        /// Variant name (no_residual, no_reg, mask, dropout, penalty) or "all".
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Train from a wide CSV instead of the synthetic generator.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export per-head attention heatmaps from a checkpoint.
    AttnExport {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn collect(common: &Common, extra: Vec<(String, String)>) -> Result<Vec<(String, String)>, tempattn::Error> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for s in &common.sets {
        overrides.push(cli::parse_override(s)?);
    }
    // convenience flags win over --set
    overrides.extend(extra);
    Ok(overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let top = TopLevel::parse();

    let (name, common, extra): (&str, &Common, Vec<(String, String)>) = match &top.command {
        Command::Gradcheck {
            common,
            tolerance,
            configs,
            t,
        } => {
            let mut extra = Vec::new();
            if let Some(tol) = tolerance {
                extra.push(("gradcheck.jacobian_tolerance".into(), tol.to_string()));
                extra.push(("gradcheck.model_tolerance".into(), tol.to_string()));
                extra.push(("gradcheck.softmax_tolerance".into(), tol.to_string()));
            }
            if let Some(c) = configs {
                extra.push(("gradcheck.configs".into(), c.to_string()));
            }
            if let Some(t) = t {
                extra.push(("gradcheck.fixed_t".into(), t.to_string()));
            }
            ("gradcheck", common, extra)
        }
        Command::BoundsSweep {
            common,
            t_values,
            samples,
        } => {
            let mut extra = Vec::new();
            if let Some(tv) = t_values {
                extra.push(("bounds.t_values".into(), tv.clone()));
            }
            if let Some(s) = samples {
                extra.push(("bounds.samples".into(), s.to_string()));
            }
            ("bounds-sweep", common, extra)
        }
        Command::Train {
            common,
            variant,
            epochs,
            seeds,
            csv,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = variant {
                extra.push(("train.variant".into(), v.clone()));
            }
            if let Some(e) = epochs {
                extra.push(("train.epochs".into(), e.to_string()));
            }
            if let Some(s) = seeds {
                extra.push(("train.seeds".into(), s.clone()));
            }
            if let Some(path) = csv {
                extra.push(("data.source".into(), "csv".into()));
                extra.push(("data.csv_path".into(), path.display().to_string()));
            }
            ("train", common, extra)
        }
        Command::AttnExport { common, checkpoint } => {
            let mut extra = Vec::new();
            if let Some(path) = checkpoint {
                extra.push(("export.checkpoint".into(), path.display().to_string()));
            }
            ("attn-export", common, extra)
        }
    };

    let overrides = match collect(common, extra) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let out_dir = common
        .out
        .clone()
        .unwrap_or_else(|| cli::default_out_dir(name));

    match cli::run(name, common.config.as_deref(), &overrides, &out_dir) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code_for(&e) as u8)
        }
    }
}
