use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use trajclip::metrics::{
    histogram, parse_records, render_cumulative_csv, render_histogram_csv, render_report, render_summary_csv, summarize,
    MetricsError, DEFAULT_MAX_ROUNDS,
};
use trajclip::pipeline::{connect, run_export, run_graph, run_prune, PipelineConfig, PipelineError, RunOptions};
use trajclip::prompts::PromptSet;
use trajclip::rewrite::ExportMode;

#[derive(Debug, Parser)]
#[command(name = "clip", version, about = "Prune redundant rounds from web-agent trajectories")]
struct Cli {
    /// Directory every output is written to.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, mine, vote, prune, rewrite and export.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// Serve every model role from the config's mock script.
        #[arg(long)]
        mock: bool,
        /// Also write every constructed state graph.
        #[arg(long)]
        export_graphs: bool,
    },
    /// Accuracy, efficiency and F-AE of benchmark run records.
    Score {
        records: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
        max_rounds: u32,
        #[arg(long, default_value_t = 5)]
        bucket_width: u64,
    },
    /// Build and mine state graphs without pruning.
    Graph {
        trajectories: PathBuf,
        #[arg(long, default_value_t = 3)]
        runs: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock: bool,
        /// Mock script to use instead of the config's.
        #[arg(long)]
        mock_script: Option<PathBuf>,
    },
    /// Rebuild an SFT export from pruned.jsonl and unpruned.jsonl.
    Export {
        #[arg(long)]
        mode: ExportMode,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure with the exit status it maps to.
#[derive(Debug)]
struct Exit(i32, anyhow::Error);

impl From<PipelineError> for Exit {
    fn from(e: PipelineError) -> Self {
        Exit(e.exit_code(), e.into())
    }
}

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Exit(1, e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(Exit(code, e)) => {
            eprintln!("clip: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}

fn out_dir(cli_out: Option<PathBuf>, config: Option<&PipelineConfig>) -> PathBuf {
    cli_out.or_else(|| config.and_then(|c| c.out.clone())).unwrap_or_else(|| PathBuf::from("clip-out"))
}

fn run(cli: Cli) -> Result<i32, Exit> {
    match cli.command {
        Command::Prune { config, mock, export_graphs } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = out_dir(cli.out, Some(&cfg));
            let conn = connect(&cfg, mock)?;
            let report = run_prune(&cfg, &conn, &RunOptions { out: out.clone(), export_graphs })?;
            println!("{report}");
            println!("outputs in {}", out.display());
            Ok(report.exit_code())
        }
        Command::Score { records, max_rounds, bucket_width } => score(&records, max_rounds, bucket_width, &out_dir(cli.out, None)),
        Command::Graph { trajectories, runs, config, mock, mock_script } => {
            let mut cfg = match &config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::for_input(&trajectories),
            };
            if let Some(script) = mock_script {
                cfg.mock_script = Some(script);
                cfg.mock = true;
            }
            let out = out_dir(cli.out, Some(&cfg));
            let conn = connect(&cfg, mock)?;
            let report = run_graph(&trajectories, runs, &conn, cfg.workers, cfg.workspace_cap, &out)?;
            println!(
                "{} trajectories, {} graphs written; accepted {}, discarded {}, unreachable {}, failed {}",
                report.trajectories, report.graphs_written, report.accepted, report.discarded, report.unreachable, report.failed
            );
            Ok(if report.failed > 0 { 1 } else { 0 })
        }
        Command::Export { mode, config } => {
            let cfg = config.as_deref().map(PipelineConfig::load).transpose()?;
            let prompts = match &cfg {
                Some(c) => c.prompts()?,
                None => PromptSet::default(),
            };
            let out = out_dir(cli.out, cfg.as_ref());
            let n = run_export(&out, mode, prompts.agent_system.text())?;
            println!("{n} examples written to {}", out.join(mode.file_name()).display());
            Ok(0)
        }
    }
}

fn score(path: &Path, max_rounds: u32, bucket_width: u64, out: &Path) -> Result<i32, Exit> {
    let metrics_exit = |e: MetricsError| {
        let code = match e {
            MetricsError::Parse { .. } | MetricsError::EmptyInput => 3,
            _ => 2,
        };
        Exit(code, anyhow::Error::new(e).context(format!("scoring {}", path.display())))
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Exit(3, e))?;
    let records = parse_records(&text).map_err(metrics_exit)?;
    let summary = summarize(&records, max_rounds).map_err(metrics_exit)?;
    let hist = histogram(&records, bucket_width).map_err(metrics_exit)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, body) in [
        ("summary.csv", render_summary_csv(&summary)),
        ("rounds_histogram.csv", render_histogram_csv(&hist)),
        ("cumulative_accuracy.csv", render_cumulative_csv(&hist)),
    ] {
        let p = out.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", render_report(&summary, &hist));
    Ok(0)
}
