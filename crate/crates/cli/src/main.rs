use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use themewise::{config, parse_scores, CliError, Run};

/// Theme-aware depression screening over interview transcripts.
///
/// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or
/// unknown config key, 3 missing input artifact.
#[derive(Parser, Debug)]
#[command(name = "themewise", version)]
struct Cli {
    /// JSON run config; see config.reference.json for every key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Directory holding this run's stage files.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Sets corpus.synthetic.seed, corpus.split_seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write corpus.jsonl (synthetic, or corpus.input) with splits assigned.
    GenerateCorpus,
    /// Extract theme texts and feedback scores into themes.jsonl.
    Extract,
    /// Embed theme texts into features.jsonl.
    Embed,
    /// Train and write checkpoint.json and train_log.csv.
    Train,
    /// Score the eval split into metrics.csv and metrics.md.
    Evaluate,
    /// Train every ablation variant and write ablation.csv and ablation.md.
    Ablate,
    /// Score transcripts from a JSON or JSONL file.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Clinician scores replacing LLM feedback: `family=3,work=7,...`.
        #[arg(long)]
        scores: Option<String>,
    },
    /// Export figure data for the eval split into figures/.
    Figures,
    /// Run the HTTP service.
    Serve,
    /// Print the resolved config.
    PrintConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    let run = Run::new(cli.run_dir, cfg);
    match cli.command {
        Command::GenerateCorpus => {
            let c = themewise::generate_corpus(&run)?;
            println!("wrote {} sessions to {}", c.len(), run.path(themewise::CORPUS).display());
        }
        Command::Extract => {
            let r = themewise::extract(&run)?;
            let degraded = r.iter().filter(|r| !r.warnings.is_empty()).count();
            println!("extracted {} sessions ({degraded} with warnings)", r.len());
        }
        Command::Embed => {
            let f = themewise::embed(&run)?;
            println!("embedded {} sessions", f.len());
        }
        Command::Train => {
            let s = themewise::train_cmd(&run)?;
            println!(
                "best epoch {} (dev WA-F1 {:.4}), {} parameters",
                s.best_epoch, s.dev.wa_f1, s.num_params
            );
        }
        Command::Evaluate => {
            let m = themewise::evaluate_cmd(&run)?;
            print!("{}", m.markdown(&format!("{} split", run.config.eval.split)));
        }
        Command::Ablate => {
            let rows = themewise::ablate(&run)?;
            print!("{}", themewise_core::eval::ablation_markdown(&rows));
        }
        Command::Predict { input, scores } => {
            let scores = scores.as_deref().map(parse_scores).transpose()?;
            for v in themewise::predict(&run, &input, scores)? {
                println!("{}", serde_json::to_string(&v["prediction"]).expect("serializes"));
            }
        }
        Command::Figures => {
            let n = themewise::figures(&run)?.len();
            println!("wrote {n} figure files");
        }
        Command::Serve => themewise::serve(&run)?,
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&run.config).expect("serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
