use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motiongen_cli::commands::{self, EditArgs, EditKind, EvalArgs, GuidanceFlags, SampleArgs};
use motiongen_cli::config::ExperimentConfig;
use motiongen_cli::error::CliError;

/// Text-to-motion diffusion at desk scale.
#[derive(Parser)]
#[command(name = "motiongen", version)]
struct Cli {
    /// Experiment config (TOML); the shipped default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Guidance {
    /// Probability of the fused branch per step.
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance scale s.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reverse steps; fewer than the schedule length respaces it.
    #[arg(long)]
    steps: Option<usize>,
}

impl From<Guidance> for GuidanceFlags {
    fn from(g: Guidance) -> Self {
        Self {
            lambda: g.lambda,
            scale: g.scale,
            seed: g.seed,
            steps: g.steps,
        }
    }
}

#[derive(Clone)]
struct FrameRanges(Vec<(usize, usize)>);

fn parse_frame_ranges(s: &str) -> Result<FrameRanges, String> {
    commands::parse_ranges(s).map(FrameRanges)
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the labelled motion corpus.
    GenData,
    /// Build the retrieval database from the training split.
    BuildDb,
    /// Train the denoiser and write a checkpoint.
    Train,
    /// Generate a motion from a prompt.
    Sample {
        #[arg(long, required_unless_present = "unconditional")]
        prompt: Option<String>,
        /// Sample without any text condition.
        #[arg(long, conflicts_with = "prompt")]
        unconditional: bool,
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        guidance: Guidance,
        #[arg(long)]
        out: PathBuf,
        /// Directory for a stick-figure image sequence and overlay.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Regenerate part of an existing motion.
    Edit {
        #[arg(long)]
        base: PathBuf,
        /// Keep root, hips and knees.
        #[arg(long, group = "region")]
        fix_lower: bool,
        /// Keep frame ranges, e.g. `0..30,90..120`.
        #[arg(long, group = "region", value_parser = parse_frame_ranges)]
        fix_frames: Option<FrameRanges>,
        /// Keep the first and last quarter.
        #[arg(long, group = "region")]
        inbetween: bool,
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        guidance: Guidance,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Score generations against the test split.
    Eval {
        /// Run every λ in `eval.sweep_lambdas` and write sweep.csv/sweep.svg.
        #[arg(long)]
        sweep: bool,
        /// Explicit λ values, comma separated.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Print the scripts for a sentence, one per line.
    Decompose {
        #[arg(long)]
        text: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::BuildDb => commands::build_db(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Sample {
            prompt,
            unconditional: _,
            frames,
            guidance,
            out,
            render,
        } => commands::sample(
            &cfg,
            &SampleArgs {
                prompt,
                frames,
                guidance: guidance.into(),
                out,
                render,
            },
        ),
        Command::Edit {
            base,
            fix_lower,
            fix_frames,
            inbetween,
            prompt,
            guidance,
            out,
            render,
        } => {
            let kind = match (fix_lower, fix_frames, inbetween) {
                (true, None, false) => EditKind::FixLower,
                (false, Some(r), false) => EditKind::FixFrames(r.0),
                (false, None, true) => EditKind::Inbetween,
                _ => {
                    return Err(CliError::Config(
                        "choose one of --fix-lower, --fix-frames, --inbetween".into(),
                    ))
                }
            };
            commands::edit(
                &cfg,
                &EditArgs {
                    base,
                    kind,
                    prompt,
                    guidance: guidance.into(),
                    out,
                    render,
                },
            )
        }
        Command::Eval { sweep, lambdas } => commands::eval(&cfg, &EvalArgs { sweep, lambdas }),
        Command::Decompose { text } => commands::decompose_cmd(&cfg, &text),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("motiongen: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
