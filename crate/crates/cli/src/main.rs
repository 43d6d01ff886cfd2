use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphtext_cli::{
    cmd_eval, cmd_gen_data, cmd_pretrain_decoder, cmd_report, cmd_train, CliError, CliResult, RunConfig, Suite,
};

#[derive(Parser)]
#[command(name = "graphtext", version, about = "Graph-text encoder: data, pretraining, tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and freeze the decoder.
    PretrainDecoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Tune the encoder's adapters, alignment tokens and structural biases.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        /// Continue from an intermediate checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Zero-shot evaluation on one suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Merge evaluation directories into one comparison table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn config(c: &Common) -> CliResult<RunConfig> {
    Ok(RunConfig::load(&c.config)?.with_seed(c.seed))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            cmd_gen_data(&config(&common)?, Some(&common.config), &common.out)?;
        }
        Command::PretrainDecoder { common, data } => {
            cmd_pretrain_decoder(&config(&common)?, Some(&common.config), &data, &common.out)?;
        }
        Command::Train { common, data, decoder, resume } => {
            let cfg = config(&common)?;
            cmd_train(&cfg, Some(&common.config), &data, &decoder, resume.as_deref(), &common.out)?;
        }
        Command::Eval { common, encoder, decoder, data, suite } => {
            let cfg = config(&common)?;
            let (_, report) = cmd_eval(&cfg, Some(&common.config), &encoder, &decoder, &data, suite, &common.out)?;
            for r in &report.results {
                println!(
                    "{:<22} {:<13} {:<8} {:.4}  baseline {:.4}  legal {:.2}",
                    r.dataset,
                    format!("{:?}", r.conditioning),
                    r.metric.tag(),
                    r.value,
                    r.baseline,
                    r.legality_rate
                );
            }
        }
        Command::Report { out, dirs } => {
            let merged = cmd_report(&dirs, Path::new(&out))?;
            print!("{}", merged.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
