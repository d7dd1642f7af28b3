use std::path::PathBuf;
use std::process::ExitCode;

use adaseg_cli::checkpoint;
use adaseg_cli::commands::{self, InferOptions};
use adaseg_cli::config::RunConfig;
use adaseg_cli::{CliError, Result};
use adaseg_core::data::{ShiftLevel, Split, SynthSpec};
use adaseg_core::networks::Model;
use adaseg_core::pipeline::{CodeChoice, InferencePath};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "adaseg",
    version,
    about = "Segmentation with a single AdaIN-switched generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Direct,
    Adapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodeArg {
    #[value(name = "self")]
    SelfCode,
    Seg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    None,
    Weak,
    Harsh,
}

impl From<LevelArg> for ShiftLevel {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::None => ShiftLevel::None,
            LevelArg::Weak => ShiftLevel::Weak,
            LevelArg::Harsh => ShiftLevel::Harsh,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        #[arg(long, default_value_t = 10)]
        n_val: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
    },
    /// Train from a config file and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a periodic checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment every image of a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "direct")]
        path: PathArg,
        #[arg(long, value_enum, default_value = "self")]
        code: CodeArg,
        #[arg(long)]
        no_postprocess: bool,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Also write the adapted image (with --path adapt).
        #[arg(long)]
        save_adapted: bool,
    },
    /// Apply an intensity/contrast/noise shift to every image of a manifest.
    Shift {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output side length; defaults to the input size for square images.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against a ground-truth manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shift level the predictions were made under (tag only).
        #[arg(long, value_enum, default_value = "none")]
        shift: LevelArg,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Rebuild tables and plots from metrics tables.
    Report {
        #[arg(long = "rows", required = true, num_args = 1..)]
        rows: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count per module.
    Params {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            size,
            n_train,
            n_val,
            n_test,
        } => {
            let spec = SynthSpec {
                seed,
                size,
                n_train,
                n_val,
                n_test,
                ..SynthSpec::default()
            };
            let p = commands::synth(&spec, &out)?;
            println!("{}", p.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::train(&cfg, &manifest, &out, resume.as_deref())?;
            println!("{}", s.final_checkpoint.display());
            println!("{}", s.summary.display());
        }
        Command::Infer {
            checkpoint,
            manifest,
            out,
            path,
            code,
            no_postprocess,
            split,
            save_adapted,
        } => {
            let ck = checkpoint::load(&checkpoint)?;
            let path = match (path, code) {
                (PathArg::Adapt, _) => InferencePath::ViaAdaptation,
                (PathArg::Direct, CodeArg::SelfCode) => InferencePath::Direct(CodeChoice::SelfCode),
                (PathArg::Direct, CodeArg::Seg) => InferencePath::Direct(CodeChoice::Seg),
            };
            let opts = InferOptions {
                path,
                postprocess: !no_postprocess,
                split: split.map(Into::into),
                save_adapted,
            };
            let n = commands::infer(&ck, &manifest, &out, &opts)?;
            println!("{n} masks written to {}", out.display());
        }
        Command::Shift {
            manifest,
            level,
            seed,
            size,
            out,
        } => {
            let p = commands::shift(&manifest, level.into(), seed, size, &out)?;
            println!("{}", p.display());
        }
        Command::Eval {
            pred,
            manifest,
            out,
            shift,
            split,
        } => {
            let f = commands::eval(&pred, &manifest, shift.into(), split.map(Into::into), &out)?;
            println!("{}", f.summary.display());
        }
        Command::Report { rows, out } => {
            let f = commands::report(&rows, &out)?;
            println!("{}", f.summary.display());
        }
        Command::Params { checkpoint, config } => {
            let model = match (checkpoint, config) {
                (Some(p), _) => checkpoint::load(&p)?.state.model,
                (None, Some(c)) => Model::new(&RunConfig::load(&c)?.model(), 0)?,
                (None, None) => Model::new(&RunConfig::default().model(), 0)?,
            };
            print!("{}", commands::params_table(&model));
        }
        Command::Config { config, preset } => {
            let cfg = match (config, preset) {
                (Some(c), _) => RunConfig::load(&c)?,
                (None, Preset::Default) => RunConfig::default(),
                (None, Preset::Desk) => RunConfig::desk(),
            };
            print!("{}", cfg.dump());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
