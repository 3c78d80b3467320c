use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codetts::Result;
use codetts_cli::commands::{self, Status, TextInput};
use codetts_cli::config::RunConfig;
use codetts_cli::{exit_code, EXIT_TRUNCATED};

#[derive(Parser)]
#[command(name = "codetts", version, about = "Multi-codebook code-based speech synthesis on a toy corpus")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set tts_train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for corpus generation, both training stages and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    quantizer: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (WAV files and manifest).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the waveform quantizer.
    TrainQuantizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the transformer on codes of a fixed quantizer.
    TrainTts {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        quantizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize one utterance, or every utterance of a corpus.
    Synthesize {
        #[command(flatten)]
        models: Models,
        /// Phoneme letters (`a` is phoneme 0).
        #[arg(long, conflicts_with_all = ["text", "corpus"])]
        phonemes: Option<String>,
        /// Plain text, mapped onto phonemes letter by letter.
        #[arg(long, conflicts_with = "corpus")]
        text: Option<String>,
        #[arg(long, requires = "out")]
        speaker_ref: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Synthesize every manifest entry of this corpus into `--out-dir`.
        #[arg(long, requires = "out_dir")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// SNR of syntheses across audio-prompt noise levels.
    SnrSweep {
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1e-6,1e-5,1e-4,1e-3")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare synthesized audio with references: MCD, speaker similarity, SNR, Fréchet.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        synthesized: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a diagnostics file as an SVG attention map with the alignment path.
    PlotAlignment {
        #[arg(long)]
        diagnostics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(Status, String)> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let ok = |m: String| Ok((Status::Ok, m));
    match cli.command {
        Command::GenCorpus { out } => ok(commands::gen_corpus(&cfg, &out)?),
        Command::TrainQuantizer { corpus, out } => ok(commands::train_quantizer_cmd(&cfg, &corpus, &out)?),
        Command::TrainTts { corpus, quantizer, out } => ok(commands::train_tts_cmd(&cfg, &corpus, &quantizer, &out)?),
        Command::Synthesize { models, phonemes, text, speaker_ref, out, corpus, out_dir } => {
            let (q, m) = commands::load_models(&models.quantizer, &models.model)?;
            if let (Some(corpus), Some(out_dir)) = (corpus, out_dir) {
                return commands::synthesize_corpus_cmd(&cfg, (&q, &m), &corpus, &out_dir);
            }
            let input = match (&phonemes, &text) {
                (Some(p), _) => TextInput::Phonemes(p),
                (None, Some(t)) => TextInput::Text(t),
                (None, None) => return Err(codetts::Error::Config("give --phonemes, --text or --corpus".into())),
            };
            let (Some(speaker_ref), Some(out)) = (speaker_ref, out) else {
                return Err(codetts::Error::Config("single synthesis needs --speaker-ref and --out".into()));
            };
            commands::synthesize_cmd(&cfg, (&q, &m), input, &speaker_ref, &out)
        }
        Command::SnrSweep { models, corpus, sigmas, n, out } => {
            let (q, m) = commands::load_models(&models.quantizer, &models.model)?;
            commands::snr_sweep_cmd(&cfg, (&q, &m), &corpus, &sigmas, n, &out)
        }
        Command::Evaluate { reference, synthesized, out } => ok(commands::evaluate_cmd(&reference, &synthesized, &out)?),
        Command::PlotAlignment { diagnostics, out } => ok(commands::plot_alignment_cmd(&diagnostics, &out)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((Status::Ok, msg)) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Ok((Status::Truncated(n), msg)) => {
            println!("{}", msg.trim_end());
            eprintln!("warning: {n} synthesis run(s) hit max_frames and were truncated");
            ExitCode::from(EXIT_TRUNCATED as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
