//! `taskflow`: run the mining pipeline stage by stage or end to end, replay
//! logs against a flow, chat with it in the terminal, or serve it over HTTP.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use taskflow_core::actions::{apply_manifest, build_actions, load_actions, load_manifest, save_actions, ActionCatalog};
use taskflow_core::corpus::{load_dialogues, save_dialogues, Dialogue, Speaker, UtteranceStore};
use taskflow_core::harness::replay_conformance;
use taskflow_core::ngram::{fit_ngram, NGramModel};
use taskflow_core::pipeline::{run_pipeline, TASKFLOW_FILE};
use taskflow_core::sampler::{read_samples, sample_sequences, write_samples};
use taskflow_core::standardize::{build_bm25_index, read_sequences, standardize_corpus, write_sequences};
use taskflow_core::synth::{synthetic_corpus, CorpusShape};
use taskflow_core::taskflow::{build_taskflow, validate_taskflow, Severity, TaskFlow};
use taskflow_service::{serve, shutdown_signal, AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "taskflow", version, about = "Mine dialogue flows from chat logs and run them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that reads a service configuration.
#[derive(Args, Clone)]
struct Common {
    /// TOML service configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ServiceConfig> {
        let mut config = match &self.config {
            Some(p) => ServiceConfig::load(p)?,
            None => ServiceConfig::default(),
        };
        if let Some(c) = &self.corpus {
            config.corpus = Some(c.clone());
        }
        if let Some(a) = &self.artifacts {
            config.artifact_dir = a.clone();
        }
        if let Some(s) = self.seed {
            config.pipeline.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus file and print its size.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Cluster utterances of each role into dialogue actions.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        user_k: usize,
        #[arg(long, default_value_t = 100)]
        staff_k: usize,
        /// Merge, split and rename operations applied after clustering.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Label every utterance with its dialogue action.
    Standardize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the N-gram model over action sequences.
    Ngram {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        order: usize,
    },
    /// Beam-sample action sequences from a model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the TaskFlow tree from sampled sequences.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report structural problems in a TaskFlow file.
    Validate {
        #[arg(long)]
        taskflow: PathBuf,
    },
    /// Talk to the flow in the terminal.
    Chat {
        #[command(flatten)]
        common: Common,
    },
    /// Replay recorded dialogues and report conformance.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dialogues to replay; defaults to the configured corpus.
        #[arg(long)]
        dialogues: Option<PathBuf>,
        /// Write the full report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run every pipeline stage and write all artifacts.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic corpus with known actions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2_000)]
        utterances: usize,
        /// Actions per role.
        #[arg(long, default_value_t = 12)]
        actions: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_max_level(tracing::Level::INFO)
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn corpus_of(config: &ServiceConfig) -> Result<(Vec<Dialogue>, UtteranceStore)> {
    let path = config.corpus.as_ref().context("a corpus is required (--corpus or config)")?;
    let dialogues = load_dialogues(path).with_context(|| format!("reading {}", path.display()))?;
    let store = UtteranceStore::from_dialogues(&dialogues);
    Ok((dialogues, store))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest { corpus } => {
            let dialogues = load_dialogues(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let count = |r: Speaker| dialogues.iter().flat_map(|d| &d.utterances).filter(|u| u.speaker == r).count();
            let summary = serde_json::json!({
                "dialogues": dialogues.len(),
                "user_utterances": count(Speaker::User),
                "staff_utterances": count(Speaker::Staff),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Cluster { corpus, out, user_k, staff_k, manifest, seed } => {
            let dialogues = load_dialogues(&corpus)?;
            let mut actions = build_actions(&dialogues, Speaker::User, user_k, seed)?;
            actions.extend(build_actions(&dialogues, Speaker::Staff, staff_k, seed)?);
            if let Some(m) = manifest {
                let store = UtteranceStore::from_dialogues(&dialogues);
                actions = apply_manifest(&actions, &load_manifest(m)?, &store)?;
            }
            save_actions(&out, &actions)?;
            eprintln!("{} actions written to {}", actions.len(), out.display());
        }
        Command::Standardize { common, actions, out } => {
            let config = common.resolve()?;
            let (dialogues, store) = corpus_of(&config)?;
            let index = build_bm25_index(&load_actions(actions)?, &store, config.pipeline.retrieval)?;
            let seqs = standardize_corpus(&index, &dialogues);
            write_sequences(create(&out)?, &seqs)?;
            eprintln!("{} sequences written to {}", seqs.len(), out.display());
        }
        Command::Ngram { sequences, out, order } => {
            let seqs = read_sequences(File::open(&sequences)?)?;
            fit_ngram(&seqs, order)?.save(&out)?;
            eprintln!("{order}-gram model written to {}", out.display());
        }
        Command::Sample { common, model, out } => {
            let config = common.resolve()?;
            let samples = sample_sequences(&NGramModel::load(model)?, &config.pipeline.beam);
            write_samples(create(&out)?, &samples)?;
            eprintln!("{} sequences written to {}", samples.len(), out.display());
        }
        Command::Build { common, samples, model, actions, out } => {
            let config = common.resolve()?;
            let (_, store) = corpus_of(&config)?;
            let catalog = ActionCatalog::new(load_actions(actions)?, &store)?;
            let samples = read_samples(File::open(&samples)?)?;
            let tf = build_taskflow(&samples, &NGramModel::load(model)?, &catalog, &config.pipeline.scenario)?;
            tf.save(&out)?;
            eprintln!("{} nodes written to {}", tf.nodes.len(), out.display());
        }
        Command::Validate { taskflow } => {
            let issues = validate_taskflow(&TaskFlow::load(&taskflow)?);
            for i in &issues {
                println!("{}", serde_json::to_string(i)?);
            }
            let errors = issues.iter().filter(|i| i.severity == Severity::Error).count();
            eprintln!("{errors} error(s), {} warning(s)", issues.len() - errors);
            if errors > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Chat { common } => chat(load_state(&common)?)?,
        Command::Eval { common, dialogues, json } => {
            let state = load_state(&common)?;
            let path = dialogues.or_else(|| state.config().corpus.clone()).context("no dialogues to replay")?;
            let dialogues = load_dialogues(&path)?;
            let engine = state.engine(state.store().current_version())?;
            let report = replay_conformance(&engine, &dialogues);
            print!("{}", report.to_table());
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
        Command::Serve { common, listen } => {
            let mut config = common.resolve()?;
            if let Some(l) = listen {
                config.listen = l;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let addr = config.listen.clone();
                let state = Arc::new(AppState::load(config)?);
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                tracing::info!(%addr, version = state.store().current_version(), "listening");
                serve(state, listener, shutdown_signal()).await?;
                anyhow::Ok(())
            })?;
        }
        Command::Run { common } => {
            let config = common.resolve()?;
            let out = run_pipeline(&config.pipeline_config()?)?;
            println!("{}", serde_json::to_string_pretty(&out.metadata)?);
        }
        Command::Synth { out, utterances, actions, seed } => {
            let shape = CorpusShape {
                user_actions: actions,
                staff_actions: actions,
                utterances,
                ..CorpusShape::default()
            };
            let corpus = synthetic_corpus(seed, &shape);
            save_dialogues(&out, &corpus.dialogues)?;
            eprintln!("{} dialogues written to {}", corpus.dialogues.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_state(common: &Common) -> Result<AppState> {
    let config = common.resolve()?;
    if !config.artifact_dir.join(TASKFLOW_FILE).exists() && config.corpus.is_none() {
        bail!("no artifacts in {} and no corpus to build them from", config.artifact_dir.display());
    }
    Ok(AppState::load(config)?)
}

fn chat(state: AppState) -> Result<()> {
    let created = state.create_session()?;
    let rt = tokio::runtime::Builder::new_current_thread().build()?;
    let mut out = std::io::stdout().lock();
    for r in &created.turn.responses {
        writeln!(out, "bot> {r}")?;
    }
    let stdin = BufReader::new(std::io::stdin());
    write!(out, "you> ")?;
    out.flush()?;
    for line in stdin.lines() {
        let line = line?;
        if line.trim().is_empty() {
            write!(out, "you> ")?;
            out.flush()?;
            continue;
        }
        let turn = rt.block_on(state.post_message(&created.session_id, &line))?;
        for r in &turn.responses {
            writeln!(out, "bot> {r}")?;
        }
        if turn.closed {
            writeln!(out, "[session closed]")?;
            break;
        }
        write!(out, "you> ")?;
        out.flush()?;
    }
    Ok(())
}
