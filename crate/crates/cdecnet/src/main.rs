use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cdecnet::commands::{cmd_ablate, cmd_eval, cmd_infer, cmd_synth, cmd_train, EvalSource, InferArgs};
use cdecnet::config::{Preset, RunConfig};
use cdecnet::report::{ablation_table, metric_table};
use clap::{Parser, Subcommand};

/// Table detection on synthetic document pages.
#[derive(Parser)]
#[command(name = "cdecnet", version)]
struct Cli {
    /// JSON run configuration; keys absent from it keep the preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset for keys the config file does not set.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (file for `infer`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    Synth {
        /// Exact table count per page.
        #[arg(long)]
        tables: Option<usize>,
    },
    /// Train on the corpus's train split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint (or a prediction file) on one split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report every IoU threshold of the configured sweep.
        #[arg(long)]
        sweep: bool,
    },
    /// Detect tables in one PGM page.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Vote over the configured scale set.
        #[arg(long)]
        multiscale: bool,
        /// Also write the page with boxes drawn on it.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Annotation file whose boxes for this page go on the overlay.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train and score the three-variant ladder.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.cmd {
        Some(Cmd::Synth { tables: Some(n) }) => cfg.corpus.tables = (*n, *n),
        Some(Cmd::Train { epochs: Some(e), .. }) => cfg.train.epochs = *e,
        _ => {}
    }
    cfg.validate().map_err(cdecnet::Error::Config)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        anyhow::bail!("no command given (synth | train | eval | infer | ablate)");
    };
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cmd {
        Cmd::Synth { .. } => {
            let dir = out("corpus");
            let s = cmd_synth(&cfg, &dir)?;
            println!(
                "pages train={} val={} test={} tables train={} val={} test={} dir={}",
                s.pages[0],
                s.pages[1],
                s.pages[2],
                s.tables[0],
                s.tables[1],
                s.tables[2],
                dir.display()
            );
        }
        Cmd::Train { corpus, .. } => {
            let s = cmd_train(&cfg, &corpus, &out("run"))?;
            println!(
                "iterations={} first_loss={} last_loss={} checkpoint={}",
                s.iterations,
                s.first_loss,
                s.last_loss,
                s.checkpoint.display()
            );
        }
        Cmd::Eval {
            corpus,
            checkpoint,
            predictions,
            split,
            sweep,
        } => {
            let source = match (&checkpoint, &predictions) {
                (_, Some(p)) => EvalSource::Predictions(p),
                (Some(c), None) => EvalSource::Checkpoint(c),
                (None, None) => unreachable!("clap requires one of them"),
            };
            let r = cmd_eval(&cfg, source, &corpus, &split, sweep, &out("eval"))?;
            print!("{}", metric_table(&r));
        }
        Cmd::Infer {
            checkpoint,
            image,
            multiscale,
            overlay,
            gt,
        } => {
            let dest = out("predictions.json");
            let recs = cmd_infer(
                &cfg,
                &InferArgs {
                    checkpoint: &checkpoint,
                    image: &image,
                    multiscale,
                    overlay: overlay.as_deref(),
                    gt: gt.as_deref(),
                    out: &dest,
                },
            )
            .with_context(|| format!("inferring {}", image.display()))?;
            println!("detections={} predictions={}", recs.len(), dest.display());
        }
        Cmd::Ablate { corpus, split } => {
            let t = cmd_ablate(&cfg, &corpus, &split, &out("ablation"))?;
            print!("{}", ablation_table(&t));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
