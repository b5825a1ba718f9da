mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stcl::finetune::Task;
use stcl::losses::Ablation;

use config::SweepParameter;

#[derive(Parser)]
#[command(name = "stcl", version, about = "Contrastive pre-training for check-in sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Root for generated run directories [env: STCL_OUTPUT_ROOT].
    #[arg(long)]
    pub output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split a raw check-in log into a dataset bundle.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Raw check-in file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Optional friendship edge list.
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Bundle directory to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the representation model on a bundle.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: PretrainOverrides,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Run directory; defaults to <output root>/pretrain/<ablation>-seed<seed>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on a downstream task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Independent runs with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train only the head.
        #[arg(long)]
        freeze: bool,
        /// JSON report path; defaults next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pre-training loss and a frozen-encoder probe on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Pre-train and fine-tune once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: PretrainOverrides,
        #[arg(long, value_enum)]
        parameter: SweepParameter,
        /// Comma-separated values replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Output directory; defaults to <output root>/sweep/<parameter>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write sequence representations of a checkpoint as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: ExportSplit,
        /// CSV path; the row description goes next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a coordinate, or decode a geohash string.
    Geohash {
        #[arg(allow_negative_numbers = true, required_unless_present = "decode")]
        lat: Option<f64>,
        #[arg(allow_negative_numbers = true, required_unless_present = "decode")]
        lon: Option<f64>,
        #[arg(long, default_value_t = 32)]
        bits: usize,
        #[arg(long, conflicts_with_all = ["lat", "lon"])]
        decode: Option<String>,
    },
    /// Generate a synthetic check-in corpus with planted topics.
    Synth {
        /// Full generator spec (TOML); replaces the shape flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long, default_value_t = 5)]
        pois_per_topic: usize,
        #[arg(long, default_value_t = 0.5)]
        jitter_hours: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 28)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
pub struct PretrainOverrides {
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Gowalla,
    Weeplace,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Lp,
    Tul,
    Tp,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Lp => Task::Lp,
            TaskArg::Tul => Task::Tul,
            TaskArg::Tp => Task::Tp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblationArg {
    Full,
    Basic,
    NoStm,
    NoTim,
    NoStcv,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::Basic => Ablation::Basic,
            AblationArg::NoStm => Ablation::NoStm,
            AblationArg::NoTim => Ablation::NoTim,
            AblationArg::NoStcv => Ablation::NoStcv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportSplit {
    All,
    Train,
    Val,
    Test,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            common,
            input,
            edges,
            format,
            out,
        } => commands::ingest(&common, input, edges, format, out),
        Command::Pretrain {
            common,
            overrides,
            bundle,
            run_dir,
        } => commands::pretrain(&common, &overrides, bundle, run_dir),
        Command::Finetune {
            common,
            checkpoint,
            bundle,
            task,
            repeats,
            epochs,
            seed,
            freeze,
            report,
        } => commands::finetune(&common, commands::FinetuneArgs {
            checkpoint,
            bundle,
            task: task.map(Into::into),
            repeats,
            epochs,
            seed,
            freeze,
            report,
        }),
        Command::Evaluate {
            common,
            checkpoint,
            bundle,
            split,
            task,
        } => commands::evaluate(&common, &checkpoint, bundle, split, task.map(Into::into)),
        Command::Sweep {
            common,
            overrides,
            parameter,
            values,
            bundle,
            task,
            out,
        } => commands::sweep(&common, &overrides, parameter, values, bundle, task.map(Into::into), out),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            bundle,
            split,
            out,
        } => commands::export_embeddings(&common, &checkpoint, bundle, split, &out),
        Command::Geohash { lat, lon, bits, decode } => commands::geohash(lat, lon, bits, decode),
        Command::Synth {
            spec,
            users,
            topics,
            pois_per_topic,
            jitter_hours,
            noise,
            days,
            seed,
            out,
        } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    toml::from_str(&text)?
                }
                None => stcl::synth::SynthSpec::planted(users, topics, pois_per_topic, jitter_hours, noise, days, seed),
            };
            commands::synth(&spec, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already quote their source; skip repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg.push_str(": ");
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
