use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};
use ecgcxr::pipeline::{config_template, Overrides, Pipeline, Stage};

/// Predict chest radiograph findings from ECG measurements.
#[derive(Debug, Parser)]
#[command(name = "ecgcxr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline stage, or `all` of them in order.
    Run {
        #[arg(value_parser = PossibleValuesParser::new(Stage::ALL.map(Stage::as_str)))]
        stage: String,
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of the label schema.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        /// Worker threads for per-label stages; 0 uses every core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print a config with every default spelled out.
    InitConfig {
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    match cli.command {
        Command::Run {
            stage,
            config,
            out,
            labels,
            jobs,
        } => {
            let stage = Stage::parse(&stage).expect("validated by clap");
            let overrides = Overrides {
                output_dir: out,
                labels: labels.map(|ls| ls.into_iter().map(|l| l.trim().to_string()).collect()),
                jobs,
            };
            match Pipeline::from_file(&config, overrides).and_then(|p| p.run(stage)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(if e.is_usage() { 1 } else { 2 })
                }
            }
        }
        Command::InitConfig { output } => {
            let text = config_template();
            match output {
                Some(path) => match std::fs::write(&path, text) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("error: cannot write {}: {e}", path.display());
                        ExitCode::from(1)
                    }
                },
                None => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
            }
        }
    }
}
