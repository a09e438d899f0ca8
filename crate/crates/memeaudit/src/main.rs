use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memeaudit::commands::{self, CommandError, RunOptions};
use memeaudit::config::{Overrides, RunConfig};
use memeaudit::mock::{MockScript, MockServer};

#[derive(Parser)]
#[command(
    name = "memeaudit",
    version,
    about = "Black-box evaluation and occlusion auditing of meme classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ledger directory, overriding the config.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Comma-separated prompt ids, e.g. `vn-vn,ocr-ex`.
    #[arg(long, value_delimiter = ',')]
    prompts: Option<Vec<String>>,
    /// Stop after this many uncached requests; rerunning resumes.
    #[arg(long)]
    max_new_requests: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Query every (dataset, model, prompt) and score the predictions.
    Eval(RunArgs),
    /// Weighted macro-F1 per (model, prompt) and per-model prompt stability.
    Leaderboard {
        /// Eval results table.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occlusion audit of misclassified samples.
    Audit {
        #[command(flatten)]
        run: RunArgs,
        /// Prompt id to audit with instead of each model's best prompt.
        #[arg(long)]
        audit_prompt: Option<String>,
    },
    /// Cluster audited errors and describe each cluster.
    Typology {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Krippendorff's alpha over a JSONL annotation file.
    Agreement {
        #[arg(long)]
        input: PathBuf,
        /// Also write the result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a scripted chat/embedding endpoint until interrupted.
    MockServe {
        /// Mock script (TOML).
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
}

fn load(
    run: &RunArgs,
    audit_prompt: Option<String>,
    typology_seed: Option<u64>,
) -> Result<(RunConfig, RunOptions), CommandError> {
    let mut cfg = RunConfig::load(&run.config)?;
    cfg.apply(&Overrides {
        out_dir: run.out.clone(),
        ledger_dir: run.ledger.clone(),
        prompts: run.prompts.clone(),
        audit_prompt,
        typology_seed,
    });
    Ok((
        cfg,
        RunOptions {
            max_new_requests: run.max_new_requests,
        },
    ))
}

async fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Eval(run) => {
            let (cfg, opts) = load(&run, None, None)?;
            let out = commands::cmd_eval(&cfg, &opts).await?;
            println!(
                "{} result rows written to {} ({} new requests)",
                out.rows.len(),
                out.out_dir.display(),
                out.fetched
            );
        }
        Command::Leaderboard { eval, out } => {
            let lb = commands::cmd_leaderboard(&eval, &out)?;
            println!(
                "{} leaderboard cells, {} stability rows",
                lb.cells.len(),
                lb.stability.len()
            );
        }
        Command::Audit { run, audit_prompt } => {
            let (cfg, opts) = load(&run, audit_prompt, None)?;
            let out = commands::cmd_audit(&cfg, &opts).await?;
            println!(
                "{} samples audited, {} skipped, written to {} ({} new requests)",
                out.outcomes.len(),
                out.skipped.len(),
                out.out_dir.display(),
                out.fetched
            );
        }
        Command::Typology { run, seed } => {
            let (cfg, opts) = load(&run, None, seed)?;
            let out = commands::cmd_typology(&cfg, &opts).await?;
            println!(
                "{} typology reports written to {} ({} new requests)",
                out.reports.len(),
                out.out_dir.display(),
                out.fetched
            );
        }
        Command::Agreement { input, out } => {
            let r = commands::cmd_agreement(&input, out.as_deref())?;
            println!(
                "alpha = {} ({} items, {} annotators)",
                r.alpha_display, r.n_items, r.n_annotators
            );
        }
        Command::MockServe { script, port } => {
            let script = MockScript::load(&script).map_err(CommandError::Invalid)?;
            let server = MockServer::start(script, port)
                .await
                .map_err(|e| CommandError::Invalid(e.to_string()))?;
            println!("mock endpoint listening at {}", server.base_url());
            let _ = tokio::signal::ctrl_c().await;
            server.stop().await;
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MEMEAUDIT_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
