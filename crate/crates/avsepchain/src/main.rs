use avsepchain::ablate::{format_table as ablation_table, run_suite, Suite};
use avsepchain::config::ExperimentConfig;
use avsepchain::data::{build_corpus, CorpusSpec, Manifest, Split};
use avsepchain::error::{Error, Result};
use avsepchain::eval::{evaluate_model, format_table};
use avsepchain::train::{load_for_eval, load_split, train};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "avsepchain", about = "Two-stage audio-visual target speech extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual corpus with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        valid: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        /// Additive white-noise level folded into the interferer track.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train a model; writes metrics.jsonl and best.ckpt into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional JSONL output for per-example records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite: train every variant and compare.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, speakers, train, valid, test, noise } => {
            let spec = CorpusSpec {
                n_speakers: speakers,
                n_train: train,
                n_valid: valid,
                n_test: test,
                seed,
                noise_std: noise,
            };
            let manifest = build_corpus(&spec, &out)?;
            println!(
                "wrote {} examples ({} train / {} valid / {} test) to {}",
                manifest.rows.len(),
                manifest.rows_for(Split::Train).len(),
                manifest.rows_for(Split::Valid).len(),
                manifest.rows_for(Split::Test).len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let manifest = Manifest::load(&data)?;
            let (model, mut store) = cfg.build()?;
            let outcome = train(&cfg, &model, &mut store, &manifest, Some(&out))?;
            println!(
                "trained {} steps over {} epochs; best validation loss {:.4}{}",
                outcome.steps.len(),
                outcome.val_history.len(),
                outcome.state.best_val,
                if outcome.stopped_early { " (early stop)" } else { "" }
            );
            if let Some(path) = outcome.checkpoint_path {
                println!("best checkpoint: {}", path.display());
            }
            Ok(())
        }
        Command::Eval { ckpt, config, data, split, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let manifest = Manifest::load(&data)?;
            let split: Split = split.parse()?;
            let (model, store, state) = load_for_eval(&cfg, &ckpt)?;
            let examples = load_split(&manifest, split)?;
            if examples.is_empty() {
                return Err(Error::InvalidArgument(format!("split {split} is empty")));
            }
            let (records, summary) = evaluate_model(&model, &store, &examples)?;
            print!("{}", format_table(&records, &summary));
            println!(
                "checkpoint epoch {} (best validation loss {:.4})",
                state.epoch, state.best_val
            );
            if let Some(path) = out {
                let mut text = String::new();
                for r in &records {
                    text.push_str(
                        &serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?,
                    );
                    text.push('\n');
                }
                std::fs::write(&path, text)?;
                println!("records written to {}", path.display());
            }
            Ok(())
        }
        Command::Ablate { suite, config, data, out } => {
            let suite: Suite = suite.parse()?;
            let cfg = ExperimentConfig::from_file(&config)?;
            let manifest = Manifest::load(&data)?;
            let rows = run_suite(suite, &cfg, &manifest, out.as_deref())?;
            print!("{}", ablation_table(suite, &rows));
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
