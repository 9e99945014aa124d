use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sidrec::pipeline::{run_ablation, write_synthetic_fixture, Pipeline, PipelineConfig, Stage, StageOutcome, Variant};
use sidrec::Error;

#[derive(Parser)]
#[command(name = "sidrec", version, about = "Semantic-ID generative recommendation pipeline")]
struct Cli {
    /// Pipeline config (TOML with dotted keys).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set grpo.alpha=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read items and interactions, k-core filter, split.
    Ingest,
    /// Describe item images with the vision model.
    Align,
    /// Mine interests per item.
    Mine,
    /// Label interest quality.
    Label,
    /// Embed the interest-enhanced item text.
    Embed,
    /// Train the residual quantizer and assign Semantic IDs.
    Quantize,
    /// Supervised next-item training.
    TrainSft,
    /// GRPO refinement against the SFT reference.
    TrainGrpo,
    /// Beam-search evaluation on the test split.
    Eval,
    /// Every stage in order.
    Run,
    /// Run ablation variants (all by default).
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Write the synthetic offline fixture into DIR.
    Fixture { dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingPrerequisite { .. } => 3,
        _ => 4,
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config {
                    key: s.clone(),
                    msg: "expected KEY=VALUE".into(),
                })
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let stage = match &cli.command {
        Command::Fixture { dir } => {
            write_synthetic_fixture(dir)?;
            println!("wrote fixture to {}", dir.display());
            return Ok(());
        }
        Command::Ingest => Some(Stage::Ingest),
        Command::Align => Some(Stage::Align),
        Command::Mine => Some(Stage::Mine),
        Command::Label => Some(Stage::Label),
        Command::Embed => Some(Stage::Embed),
        Command::Quantize => Some(Stage::Quantize),
        Command::TrainSft => Some(Stage::TrainSft),
        Command::TrainGrpo => Some(Stage::TrainGrpo),
        Command::Eval => Some(Stage::Eval),
        Command::Run | Command::Ablate { .. } => None,
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &parse_overrides(&cli.overrides)?)?;
    if let Command::Ablate { variants } = &cli.command {
        let variants: Vec<Variant> = if variants.is_empty() {
            Variant::ALL.to_vec()
        } else {
            variants
                .iter()
                .map(|v| {
                    v.parse().map_err(|msg| Error::Config {
                        key: "--variants".into(),
                        msg,
                    })
                })
                .collect::<Result<_, _>>()?
        };
        for (v, report) in run_ablation(&cfg, &variants)? {
            println!("{:<22} users={} {}", v.name(), report.users, format_metrics(&report));
        }
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg)?;
    match stage {
        Some(stage) => {
            let outcome = pipeline.run_stage(stage)?;
            let note = match outcome {
                StageOutcome::Ran => "done",
                StageOutcome::UpToDate => "up to date",
                StageOutcome::Disabled => "disabled",
            };
            println!("{stage}: {note}");
        }
        None => {
            let report = pipeline.run_all()?;
            println!("{}", format_metrics(&report));
        }
    }
    Ok(())
}

fn format_metrics(report: &sidrec::eval::MetricsReport) -> String {
    report
        .metrics
        .iter()
        .map(|m| format!("HR@{k}={:.4} NDCG@{k}={:.4}", m.hr, m.ndcg, k = m.k))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
