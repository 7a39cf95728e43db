use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use vowelcons_core::nn::StreamMode;
use vowelcons_core::pipeline::{
    cmd_build, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_prepare, cmd_train, PipelineConfig,
    Split,
};
use vowelcons_core::synth::{quick_config_toml, write_corpus, SynthConfig};

#[derive(Parser)]
#[command(
    name = "vowelcons",
    version,
    about = "Vowel/consonant spectrogram CNNs for speech depression assessment"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "vowelcons.toml")]
    config: PathBuf,
    /// Overrides the split, augmentation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract participant speech, voicing tracks and vowel/consonant streams.
    Prepare,
    /// Split recordings, augment the training split and write spectrogram chunks.
    Build,
    /// Train one network on the built chunks.
    Train {
        /// fusion, vowels or consonants.
        #[arg(long, default_value = "fusion", value_parser = parse_mode)]
        mode: StreamMode,
    },
    /// Evaluate a checkpoint on one split and write its report.
    Evaluate {
        /// Defaults to the checkpoint of --mode in the work directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "fusion", value_parser = parse_mode)]
        mode: StreamMode,
        /// train, val or test.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Run the whole pipeline on one recording and print its prediction.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Finite-difference check of every layer and a toy network.
    Gradcheck {
        /// Perturbs one analytic gradient so the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write a synthetic interview corpus and a quick configuration.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        recordings: usize,
    },
}

fn parse_mode(s: &str) -> Result<StreamMode, String> {
    StreamMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (fusion, vowels, consonants)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (train, val, test)"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare => {
            let s = cmd_prepare(&load_config(cli)?)?;
            println!(
                "prepared {} of {} recordings ({} cached, {} failed)",
                s.prepared.len(),
                s.recordings,
                s.cache_hits,
                s.failures.len()
            );
            for f in &s.failures {
                eprintln!("warning: {}: {}", f.id, f.error);
            }
        }
        Command::Build => {
            let s = cmd_build(&load_config(cli)?)?;
            println!(
                "chunk pairs: train {} ({} augmented chunks), val {}, test {}",
                s.train.pairs, s.train.augmented_chunks, s.val.pairs, s.test.pairs
            );
        }
        Command::Train { mode } => {
            let o = cmd_train(&load_config(cli)?, *mode)?;
            let best = o.history.best().context("training recorded no epochs")?;
            println!(
                "{}: best epoch {} of {}, val loss {:.6}, val acc {:.4}; checkpoint {}",
                mode.as_str(),
                o.history.best_epoch,
                o.history.epochs.len(),
                best.val_loss,
                best.val_acc,
                o.checkpoint.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            mode,
            split,
        } => {
            let cfg = load_config(cli)?;
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.checkpoint_path(*mode));
            print!("{}", cmd_evaluate(&cfg, &path, *split)?.to_toml());
        }
        Command::Predict {
            checkpoint,
            audio,
            transcript,
        } => {
            let p = cmd_predict(&load_config(cli)?, checkpoint, audio, transcript)?;
            let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
            println!("class {}", p.class);
            println!("probabilities {}", probs.join(" "));
            println!("chunks {}", p.chunks);
        }
        Command::Gradcheck { corrupt } => {
            let report = cmd_gradcheck(cli.seed.unwrap_or(0), *corrupt)?;
            print!("{}", report.to_text());
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Synth { out, recordings } => {
            let corpus = write_corpus(
                out,
                &SynthConfig {
                    recordings: *recordings,
                    seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                    ..SynthConfig::default()
                },
            )?;
            let config = out.join("vowelcons.toml");
            std::fs::write(&config, quick_config_toml("work"))
                .with_context(|| format!("writing {}", config.display()))?;
            info!("wrote {} recordings", corpus.recordings.len());
            println!("corpus and configuration written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
