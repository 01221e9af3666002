mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "c2p", version, about = "Concept-token segmentation: data, training, consensus inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset folder (images, masks, embeddings, manifest).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Dataset seed; defaults to data.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output folder.
        #[arg(long)]
        force: bool,
    },
    /// Geometry descriptors for a folder of masks, one JSON line each.
    ExtractGeo {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semantic embeddings from report JSON files or from a multimodal model.
    GenEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Folder of report JSON files.
        #[arg(long, conflicts_with = "mllm")]
        reports: Option<PathBuf>,
        /// Query the configured multimodal model instead of reading reports.
        #[arg(long, requires_all = ["images", "masks"])]
        mllm: bool,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Built-in prompt name (ultrasound, dermoscopy, endoscopy, synthetic)
        /// or a prompt JSON file.
        #[arg(long, default_value = "synthetic")]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Replace an existing run in the output folder.
        #[arg(long)]
        force: bool,
    },
    /// Validation metrics for a checkpoint.
    Evaluate {
        #[command(flatten)]
        o: Overrides,
        /// Defaults to <output_dir>/best.c2pc.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Folder dataset; defaults to data.val_dir or the synthetic split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append the report to this metrics log.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Row label stored with the appended report.
        #[arg(long)]
        label: Option<String>,
    },
    /// Predict masks for a folder of images, with consensus diagnostics.
    Infer {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long = "results")]
        results: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render dice and loss curves from a metrics log.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration as TOML.
    ConfigDump {
        #[command(flatten)]
        o: Overrides,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            n,
            seed,
            force,
        } => {
            let cfg = Overrides {
                config,
                ..Default::default()
            }
            .resolve()?;
            let seed = seed.unwrap_or(cfg.data.seed);
            commands::gen_data(&cfg, &out, n, seed, force)
        }
        Command::ExtractGeo { masks, out } => commands::extract_geo(&masks, &out),
        Command::GenEmbeddings {
            config,
            reports,
            mllm,
            images,
            masks,
            prompt,
            out,
        } => {
            let cfg = Overrides {
                config,
                ..Default::default()
            }
            .resolve()?;
            let src = match (mllm, &images, &masks) {
                (true, Some(i), Some(m)) => Some(commands::MllmSource {
                    images: i,
                    masks: m,
                    prompt: &prompt,
                }),
                _ => None,
            };
            commands::gen_embeddings(&cfg, reports.as_deref(), src, &out)
        }
        Command::Train { o, force } => commands::train(&o.resolve()?, force),
        Command::Evaluate {
            o,
            checkpoint,
            data,
            metrics,
            label,
        } => commands::evaluate_cmd(&o.resolve()?, checkpoint.as_deref(), data.as_deref(), metrics.as_deref(), label),
        Command::Infer {
            o,
            checkpoint,
            images,
            results,
            force,
        } => commands::infer(&o.resolve()?, checkpoint.as_deref(), &images, &results, force),
        Command::Plot { metrics, out } => plot::plot(&metrics, &out).map(|_| ()),
        Command::ConfigDump { o } => {
            print!("{}", o.resolve()?.to_toml()?);
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use c2p::Error as E;
    for cause in e.chain() {
        if let Some(ce) = cause.downcast_ref::<E>() {
            return match ce {
                E::DegenerateInput(_) => "degenerate_input",
                E::ShapeMismatch(_) => "shape_mismatch",
                E::SchemaViolation(_) => "schema_violation",
                E::CorruptFile(_) => "corrupt_file",
                E::Encoder { .. } => "encoder",
                E::Transport(_) => "transport",
                E::Config(_) => "config",
                E::MissingPair(_) => "missing_pair",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::EmptyViews => "empty_views",
                E::Image(_) => "image",
                E::Io(_) => "io",
                E::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": error_kind(&e), "message": message }));
            ExitCode::FAILURE
        }
    }
}
