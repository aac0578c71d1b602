use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cos2p::{checkpoint, config, dataset, inspect, output, replay, CliError, Result};
use cos2p_core::experiment;
use cos2p_core::federation::evaluate_global;

/// Semi-asynchronous structured-pruning federated training simulator.
#[derive(Debug, Parser)]
#[command(name = "cos2p", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its outputs.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Evaluate {
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
    },
    /// Generate the data of a config and write per-client index files.
    Partition {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print per-layer keep ratios and P histograms as JSON lines.
    InspectMask {
        #[arg(short = 'm', long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Re-derive delays, admissions and utilization from an event log.
    Replay {
        #[arg(short, long)]
        events: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        /// Defaults to `summary.json` next to the event log.
        #[arg(short, long)]
        summary: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = config::load_with_env(&config)?;
            let res = cos2p::run_to_dir(&cfg, &out)?;
            let s = &res.summary;
            eprintln!(
                "{} rounds, server top1 {:.4}, RU {:.4}, max tau {}, N* {:?} -> {}",
                s.rounds,
                s.server.top1,
                s.resource_utilization,
                s.max_tau,
                s.n_star,
                out.display()
            );
        }
        Command::Evaluate { model, data } => {
            let (layout, params) = checkpoint::load(&model)?;
            let ds = dataset::read_dataset(&data)?;
            if ds.dim != layout.spec.input_dim || ds.classes != layout.spec.classes {
                return Err(CliError::format(&data, "dataset shape does not match the checkpoint"));
            }
            print_json(&evaluate_global(&layout, &params, &ds)?);
        }
        Command::Partition { config, out } => {
            let cfg = config::load_with_env(&config)?;
            cos2p::write_partition(&cfg, &out)?;
        }
        Command::InspectMask { masks, bins } => {
            for line in inspect::inspect(&output::read_masks(&masks)?, bins) {
                print_json(&line);
            }
        }
        Command::Replay { events, config, summary } => {
            let cfg = config::load_with_env(&config)?;
            let summary_path = summary.unwrap_or_else(|| {
                events
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(output::SUMMARY)
            });
            let log = output::read_events(&events)?;
            let summary = output::read_summary(&summary_path)?;
            let sim = experiment::sim_config(&cfg);
            let report = replay::replay(&log, &sim, cfg.federation.clients, &summary)?;
            print_json(&report);
            if !report.is_clean() {
                for d in &report.diffs {
                    eprintln!("diff: {}", d);
                }
                return Err(CliError::Mismatch(report.diffs));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
