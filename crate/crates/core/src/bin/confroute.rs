use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use confroute::evalkit::{
    compare_methods, emit_ablation, emit_report, render_report, run_ablation, AblationConfig,
    ReportFormat,
};
use confroute::gateway::{serve, GatewayConfig};
use confroute::ingest::{
    load_bundle, load_manifest, read_embedding, read_trace, save_bundle, write_corpus, CorpusSpec,
};
use confroute::router::RoutingDecision;
use confroute::signals::score;
use confroute::training::{
    build_dataset, calibrate_bundle, labeled_examples, train, TierCounts, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "confroute",
    version,
    about = "Confidence-aware routing over hidden-state traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a bundle on a labeled manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use every labeled record instead of the 33/12/27 tier mix.
        #[arg(long)]
        all: bool,
        /// Write the per-epoch loss history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Re-learn fusion weights and thresholds of a bundle on labeled data.
    Calibrate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output path; the input bundle is overwritten when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score one trace and print the breakdown and routing decision as JSON.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Write a synthetic tiered corpus and its manifest.
    Synth {
        /// TOML corpus spec (seed, hidden_dim, num_layers, counts).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison and ablation reports on labeled data.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config } => {
            let mut cfg = GatewayConfig::load(&config)?;
            cfg.apply_env(|k| std::env::var(k).ok());
            tokio::runtime::Runtime::new()?.block_on(serve(cfg))?;
        }
        Command::Train {
            data,
            out,
            config,
            all,
            history,
        } => {
            let cfg: TrainConfig = read_toml(config.as_deref())?;
            let manifest = load_manifest(&data)?;
            let set = if all {
                labeled_examples(&manifest)?
            } else {
                build_dataset(&manifest, TierCounts::STANDARD)?
            };
            tracing::info!(examples = set.len(), epochs = cfg.epochs, "training");
            let (bundle, hist) = train(&set, &cfg)?;
            if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
                tracing::info!(first = first.total, last = last.total, "loss");
            }
            save_bundle(&bundle, &out)?;
            if let Some(h) = history {
                std::fs::write(&h, hist.to_csv())
                    .with_context(|| format!("writing {}", h.display()))?;
            }
            println!("{} {}", bundle.bundle_version, out.display());
        }
        Command::Calibrate {
            bundle,
            data,
            out,
            config,
        } => {
            let cfg: TrainConfig = read_toml(config.as_deref())?;
            let mut b = load_bundle(&bundle)?;
            let set = labeled_examples(&load_manifest(&data)?)?;
            calibrate_bundle(&mut b, &set.examples, &cfg)?;
            let out = out.unwrap_or(bundle);
            save_bundle(&b, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "bundle_version": b.bundle_version,
                    "weights": b.weights,
                    "thresholds": b.thresholds,
                }))?
            );
        }
        Command::Score {
            bundle,
            trace,
            reference,
        } => {
            let b = load_bundle(&bundle)?;
            let t = read_trace(&trace)?;
            let r = read_embedding(&reference)?;
            let breakdown = score(&t, &r, &b)?;
            let decision = RoutingDecision::new(t.query_id(), breakdown, &b.thresholds)?;
            println!("{}", serde_json::to_string_pretty(&decision)?);
        }
        Command::Synth { spec, out } => {
            let spec: CorpusSpec = read_toml(spec.as_deref())?;
            let (path, manifest) = write_corpus(&out, &spec)?;
            println!("{} records -> {}", manifest.len(), path.display());
        }
        Command::Eval {
            bundle,
            data,
            report,
        } => {
            let b = load_bundle(&bundle)?;
            let set = labeled_examples(&load_manifest(&data)?)?;
            if set.is_empty() {
                bail!("{} has no labeled records", data.display());
            }
            let methods = compare_methods(&b, &set.examples)?;
            let ablation = run_ablation(&b, &set.examples, &AblationConfig::standard())?;
            for fmt in [ReportFormat::Markdown, ReportFormat::Csv] {
                let ext = fmt.extension();
                emit_report(&methods, fmt, &report.join(format!("comparison.{ext}")))?;
                emit_ablation(&ablation, fmt, &report.join(format!("ablation.{ext}")))?;
            }
            let details = serde_json::json!({ "bundle_version": b.bundle_version, "methods": methods, "ablation": ablation });
            std::fs::write(
                report.join("metrics.json"),
                serde_json::to_string_pretty(&details)?,
            )?;
            print!("{}", render_report(&methods, ReportFormat::Markdown));
        }
    }
    Ok(())
}
