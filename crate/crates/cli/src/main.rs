//! leakscope CLI: reproducible disclosure-audit and inference-measurement
//! runs over conversational-history corpora.
//!
//! Stages write into a run directory and append to a ledger; order is
//! enforced (`filter` needs a corpus, `audit` and `cohort` need flags,
//! `infer` needs the cohort, `evaluate` needs traces). Exit codes: 0 ok,
//! 2 config error, 3 stage-order error, 4 oracle exhaustion.

mod config;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use stages::CliError;

#[derive(Parser)]
#[command(
    name = "leakscope",
    about = "Audit explicit disclosure and measure demographic inference risk in donated AI chat histories",
    version
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for stage outputs (overrides config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// OpenAI-compatible endpoint base URL (overrides config, implies a live endpoint).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Model identifier sent to the endpoint (overrides config).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Maximum in-flight oracle requests (overrides config).
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Seed for synthesis and sampling (overrides config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Resume from existing traces and cache instead of recomputing.
    #[arg(long, global = true)]
    resume: bool,
    /// Use the deterministic mock oracle; no network.
    #[arg(long, global = true)]
    mock_oracle: bool,
    /// Corpus file consumed by filter/audit/cohort/infer (overrides config).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse export archives and a survey table into a canonical corpus.
    Ingest,
    /// Generate a synthetic corpus with planted ground truth.
    Synth,
    /// Run entity flagging and SAFE/UNSAFE + taxonomy classification.
    Filter,
    /// Compute discovery points, category distributions, and the leak curve.
    Audit,
    /// Build the analytic cohort from verdicts and stream lengths.
    Cohort,
    /// Run the incremental-prefix inference protocol over the cohort.
    Infer,
    /// Score traces: confusion matrices, baselines, context statistics.
    Evaluate,
    /// Assemble emitted tables and charts into a single report page.
    Report,
    /// Check the configuration and print its normalized form.
    ValidateConfig {
        /// Print the built-in defaults instead of a loaded config.
        #[arg(long)]
        show_defaults: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(corpus) = &cli.corpus {
        config.corpus = Some(corpus.clone());
    }
    if let Some(endpoint) = &cli.endpoint {
        config.endpoint.base_url = Some(endpoint.clone());
        config.mock_oracle = false;
    }
    if let Some(model) = &cli.model {
        config.endpoint.model = model.clone();
    }
    if let Some(concurrency) = cli.concurrency {
        config.endpoint.concurrency = concurrency;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    if cli.mock_oracle {
        config.mock_oracle = true;
    }
    let problems = config.validate(false);
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("; ")));
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ValidateConfig { show_defaults } = &cli.command {
        let config = if *show_defaults {
            RunConfig::default()
        } else {
            load_config(&cli)?
        };
        let problems = config.validate(!show_defaults);
        if !problems.is_empty() {
            for p in &problems {
                eprintln!("invalid: {p}");
            }
            return Err(CliError::Config(format!(
                "{} problem(s) found",
                problems.len()
            )));
        }
        let rendered =
            serde_json::to_string_pretty(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
        // Tolerate a closed pipe (e.g. `leakscope validate-config | head`).
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), "{rendered}");
        return Ok(());
    }

    let config = load_config(&cli)?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| CliError::Runtime(format!("out dir {}: {e}", config.out_dir.display())))?;
    match cli.command {
        Command::Ingest => stages::stage_ingest(&config),
        Command::Synth => stages::stage_synth(&config),
        Command::Filter => stages::stage_filter(&config),
        Command::Audit => stages::stage_audit(&config),
        Command::Cohort => stages::stage_cohort(&config),
        Command::Infer => stages::stage_infer(&config, cli.resume),
        Command::Evaluate => stages::stage_evaluate(&config),
        Command::Report => stages::stage_report(&config),
        Command::ValidateConfig { .. } => unreachable!("handled above"),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
