use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crfforge::eval::{BaselineConfig, HistoryMode, ScoreConfig};
use crfforge::pipeline::{
    predictions_jsonl, run_eval, run_pipeline, write_report, Clients, Pipeline, RunConfig,
};
use crfforge::revise::{session_path, Decision, ReviewSession};

#[derive(Parser)]
#[command(
    name = "crfforge",
    version,
    about = "Build case report forms from annotated clinical cases and score slot filling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Log filter (error, warn, info, debug, trace, or a tracing directive)
    #[arg(long, default_value = "warn", global = true)]
    log: String,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// Override the output directory
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override the seed
    #[arg(long)]
    rng_seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(o) = &self.output {
            c.output = std::path::absolute(o)?;
        }
        if let Some(s) = self.rng_seed {
            c.rng_seed = s;
        }
        Ok(c)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let c = self.load()?;
        let dir = c.output_dir();
        Ok(Pipeline::new(c, dir)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage into a fresh output directory
    Run(RunArgs),
    /// Load and validate the corpus
    Ingest(RunArgs),
    /// Select one diagnosis per document
    Diagnose(RunArgs),
    /// Build the document similarity graph
    Graph(RunArgs),
    /// Partition documents into groups
    Cluster(RunArgs),
    /// Generate templates and gold fillings
    Generate(RunArgs),
    /// Review merge proposals
    Revise {
        #[command(subcommand)]
        command: ReviseCommand,
    },
    /// Fill every CRF with the string-matching baseline
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Keep only the number of a numeric answer
        #[arg(long)]
        truncate_units: bool,
        /// Predictions file (default: <output>/baseline_predictions.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one evaluation prompt per document and item
    Prompts {
        #[command(flatten)]
        run: RunArgs,
        /// Prompt language (en, it); defaults to each document's language
        #[arg(long)]
        language: Option<String>,
        /// Prompts file (default: <output>/prompts.jsonl)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against the gold fillings of an output directory
    Score {
        /// Output directory of a run
        #[arg(long)]
        gold: PathBuf,
        /// Predictions (JSON lines with doc_id, item_id, answer)
        #[arg(long)]
        predictions: PathBuf,
        /// History scoring: strict or simplified
        #[arg(long, default_value = "strict")]
        mode: HistoryMode,
        /// Compare open answers ignoring case
        #[arg(long)]
        case_insensitive: bool,
        /// Score only documents in this language (en, it)
        #[arg(long)]
        language: Option<String>,
        /// Report path (JSON); a .tsv table is written next to it
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReviseCommand {
    /// Serve the review API over a sessions directory
    Serve {
        /// Directory of session logs
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8077")]
        addr: SocketAddr,
    },
    /// Print pending proposals of a session
    Pending {
        /// Directory of session logs
        #[arg(long)]
        sessions: PathBuf,
        /// Session id, e.g. group_0
        session: String,
    },
    /// Record one decision
    Decide {
        /// Directory of session logs
        #[arg(long)]
        sessions: PathBuf,
        /// Session id, e.g. group_0
        session: String,
        /// Proposal id, e.g. g0-p0
        proposal: String,
        /// approve or reject
        decision: Decision,
        #[arg(long)]
        reviewer: String,
    },
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = execute(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let out = run_pipeline(&args.load()?)?;
            println!("{}", out.display());
        }
        Command::Ingest(args) => {
            let p = args.pipeline()?;
            let corpus = p.ingest()?;
            p.write_manifest()?;
            println!("{} documents", corpus.len());
        }
        Command::Diagnose(args) => {
            let p = args.pipeline()?;
            let clients = Clients::from_config(&p.config)?;
            let results = p.diagnose(&p.load_corpus()?, &clients)?;
            p.write_manifest()?;
            let found = results.values().filter(|r| r.diagnosis.is_some()).count();
            println!("{found}/{} documents with a diagnosis", results.len());
        }
        Command::Graph(args) => {
            let p = args.pipeline()?;
            let clients = Clients::from_config(&p.config)?;
            let graph = p.graph(&p.load_corpus()?, &p.load_diagnoses()?, &clients)?;
            p.write_manifest()?;
            println!("{} nodes, {} edges", graph.nodes.len(), graph.edges.len());
        }
        Command::Cluster(args) => {
            let p = args.pipeline()?;
            let partition = p.cluster(&p.load_graph()?)?;
            p.write_manifest()?;
            println!(
                "{} groups, {} unassigned",
                partition.num_groups(),
                partition.unassigned().len()
            );
        }
        Command::Generate(args) => {
            let p = args.pipeline()?;
            let clients = Clients::from_config(&p.config)?;
            let generated = p.generate(
                &p.load_corpus()?,
                &p.load_partition()?,
                &p.load_diagnoses()?,
                &clients,
            )?;
            p.write_manifest()?;
            println!(
                "{} templates, {} filled CRFs",
                generated.templates.len(),
                generated.filled.len()
            );
        }
        Command::Revise { command } => revise(command)?,
        Command::Baseline {
            run,
            truncate_units,
            out,
        } => {
            let p = run.pipeline()?;
            let preds = p.baseline(&BaselineConfig { truncate_units })?;
            let path = out.unwrap_or_else(|| p.dir.join("baseline_predictions.jsonl"));
            write_file(&path, &predictions_jsonl(&p, &preds))?;
            println!("{} predictions -> {}", preds.len(), path.display());
        }
        Command::Prompts { run, language, out } => {
            let p = run.pipeline()?;
            let prompts = p.prompts(language.as_deref())?;
            let path = out.unwrap_or_else(|| p.dir.join("prompts.jsonl"));
            write_file(&path, &prompts)?;
            println!("{} prompts -> {}", prompts.lines().count(), path.display());
        }
        Command::Score {
            gold,
            predictions,
            mode,
            case_insensitive,
            language,
            report,
        } => {
            let config = ScoreConfig {
                mode,
                case_sensitive: !case_insensitive,
            };
            let r = run_eval(&gold, &predictions, &config, language.as_deref())?;
            if let Some(path) = report {
                write_report(&r, &path)?;
            }
            if r.missing_predictions > 0 {
                eprintln!(
                    "{} gold pairs had no prediction and were scored as not available",
                    r.missing_predictions
                );
            }
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn open_session(dir: &Path, id: &str) -> Result<ReviewSession> {
    let path = session_path(dir, id);
    if !path.is_file() {
        bail!("no session {id} in {}", dir.display());
    }
    Ok(ReviewSession::open(&path)?)
}

fn revise(command: ReviseCommand) -> Result<()> {
    match command {
        ReviseCommand::Serve { sessions, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crfforge_review::serve(sessions, addr))?;
        }
        ReviseCommand::Pending { sessions, session } => {
            let s = open_session(&sessions, &session)?;
            for p in s.list_pending() {
                println!(
                    "{}\t{}\t{}\t{}",
                    p.id, p.source_item, p.target_item, p.justification
                );
            }
        }
        ReviseCommand::Decide {
            sessions,
            session,
            proposal,
            decision,
            reviewer,
        } => {
            let mut s = open_session(&sessions, &session)?;
            let version = s.apply_decision(&proposal, decision, &reviewer)?;
            println!("template_version {version}");
        }
    }
    Ok(())
}
