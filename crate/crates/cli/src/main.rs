//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 validation/config errors, 3 stage-ordering
//! violations, 4 missing or unwritable artifacts, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use refcycle_cli::{run_ablation, Pipeline};
use refcycle_core::config::RunConfig;
use refcycle_core::dataset::Split;
use refcycle_core::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Defaults from the run-config schema.
    Default,
    /// A minute-scale pipeline for smoke testing.
    Smoke,
    /// The desk-scale benchmark configuration.
    Desk,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run-config JSON; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root directory.
    #[arg(long, global = true, env = "REFCYCLE_OUT", default_value = "runs/default")]
    out: PathBuf,

    /// Overwrite existing artifacts where applicable.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the gold and detection corpora plus the vocabulary file.
    Generate,
    /// Run the coordinate-activation stage on detection captions.
    Train {
        /// Continue from the existing activation checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run cycle training from the activation checkpoint.
    Cycle {
        /// Mix previously generated pseudo-labels into the deck.
        #[arg(long)]
        use_pseudo: bool,
    },
    /// Generate pseudo expressions for the detection corpus.
    PseudoLabel {
        /// Checkpoint to label with.
        #[arg(long, default_value = "cycle")]
        checkpoint: String,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[arg(long, default_value = "cycle")]
        checkpoint: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Answer one question about one image.
    Infer {
        #[arg(long, default_value = "cycle")]
        checkpoint: String,
        #[arg(long)]
        image: PathBuf,
        /// Referring expression; the comprehension question is built from it.
        #[arg(long)]
        expr: Option<String>,
        /// Raw instruction text (alternative to --expr).
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Run the three-condition ablation ladder on one corpus and seed.
    Ablation,
}

#[derive(Debug, Parser)]
#[command(
    name = "refcycle",
    about = "Visual grounding with coordinates as text tokens: synthetic scenes, \
             coordinate-activation training, and cycle training of referring expressions"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => match common.preset {
            Preset::Default => RunConfig::default(),
            Preset::Smoke => RunConfig::smoke(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.activation.seed = seed;
        config.cycle.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli.common)?;
    let pipeline = Pipeline::new(config, &cli.common.out)?;
    match cli.command {
        Command::Generate => {
            pipeline.generate(cli.common.force)?;
        }
        Command::Train { resume } => {
            pipeline.train_activation(resume)?;
        }
        Command::Cycle { use_pseudo } => {
            pipeline.train_cycle(use_pseudo, if use_pseudo { "cycle_pseudo" } else { "cycle" })?;
        }
        Command::PseudoLabel { checkpoint } => {
            pipeline.pseudo_label(&checkpoint)?;
        }
        Command::Eval { checkpoint, split } => {
            let report = pipeline.eval_checkpoint(&checkpoint, split.into())?;
            print!("{}", refcycle_core::eval::render_report(&report));
        }
        Command::Infer { checkpoint, image, expr, question, beam_width, max_new_tokens } => {
            let mut pipeline = pipeline;
            if let Some(w) = beam_width {
                pipeline.config.beam.beam_width = w;
            }
            if let Some(m) = max_new_tokens {
                pipeline.config.beam.max_new_tokens = m;
            }
            let (answer, bbox) =
                pipeline.infer(&checkpoint, &image, expr.as_deref(), question.as_deref())?;
            println!("answer: {answer}");
            match bbox {
                Some(b) => println!("box_px: [{:.1}, {:.1}, {:.1}, {:.1}]", b.x1, b.y1, b.x2, b.y2),
                None => println!("box_px: no box parsed"),
            }
        }
        Command::Ablation => {
            let table = run_ablation(&pipeline)?;
            print!("{}", table.render());
            println!(
                "trend (2-point tolerance): {}",
                if table.trend_holds(0.02) { "holds" } else { "violated" }
            );
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidBox(_)
        | Error::InvalidConfig(_)
        | Error::Placement(_)
        | Error::ExpressionAmbiguous { .. }
        | Error::ExpressionParse(_)
        | Error::ShapeMismatch(_)
        | Error::EmptyMask
        | Error::NegativeWeight(_)
        | Error::Vocabulary(_)
        | Error::Json(_) => 2,
        Error::StageOrder(_) | Error::SplitOverlap(_) => 3,
        Error::Io { .. }
        | Error::NotFound(_)
        | Error::WouldOverwrite(_)
        | Error::Checkpoint(_)
        | Error::Image(_) => 4,
        Error::Divergence { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
