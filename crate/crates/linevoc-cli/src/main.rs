//! Command-line entry point: reproducible experiments over the vocoder
//! library. Every command prints its fully resolved configuration before
//! acting; all randomness flows from explicit seeds.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "linevoc",
    about = "Straight-path diffusion vocoder: synthesize data, train, sample, evaluate, verify gradients, and measure speed.",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic synthetic dataset (WAV + mel blobs + manifest).
    SynthData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set data.n_clips=8. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the three-stage training loop.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from synth-data (or any 16-bit mono WAVs).
        /// Falls back to the paths.data_dir key, then to in-memory synthesis.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints and the loss log (paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Synthesize a waveform from a mel condition with an N-step reverse pass.
    Sample {
        /// Checkpoint directory (expects config.txt beside or inside it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mel blob (.mel) or a WAV to take the condition from.
        #[arg(long)]
        mel: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare real and generated WAV directories with objective metrics.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Verify every op, block, and composite loss against finite differences.
    Gradcheck {
        /// Hidden width for the model-level checks (clamped to 16).
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        /// Test fixture: adds a deliberately corrupted rule that must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Measure the real-time factor of synthesis.
    BenchRtf {
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// Approximate clip length to synthesize, in seconds.
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        /// Optional checkpoint; otherwise a freshly initialized model is timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::SynthData {
            out,
            config,
            overrides,
        } => commands::synth_data(&out, config.as_deref(), &overrides),
        Cmd::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => commands::train(
            &config,
            data.as_deref(),
            out.as_deref(),
            resume.as_deref(),
            &overrides,
        ),
        Cmd::Sample {
            checkpoint,
            mel,
            steps,
            seed,
            out,
        } => commands::sample(&checkpoint, &mel, steps, seed, &out),
        Cmd::Eval {
            real,
            fake,
            report,
            overrides,
        } => commands::eval(&real, &fake, &report, &overrides),
        Cmd::Gradcheck {
            hidden,
            inject_fault,
        } => commands::gradcheck(hidden, inject_fault),
        Cmd::BenchRtf {
            steps,
            seconds,
            checkpoint,
            seed,
            overrides,
        } => commands::bench_rtf(steps, seconds, checkpoint.as_deref(), seed, &overrides),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
