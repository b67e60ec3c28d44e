//! One-shot offline run: cluster, standardize, fit, sample, build, and write
//! every intermediate artifact to an output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{
    apply_manifest, build_actions, load_manifest, save_actions, ActionCatalog, DialogueAction,
};
use crate::corpus::{load_dialogues, Dialogue, Speaker, UtteranceStore};
use crate::ngram::{fit_ngram, NGramModel, DEFAULT_ORDER};
use crate::sampler::{sample_sequences, write_samples, BeamConfig, ScoredSequence};
use crate::standardize::{
    build_bm25_index, standardize_corpus, write_sequences, ActionSequence, RetrievalConfig,
};
use crate::taskflow::{build_taskflow, TaskFlow};

pub const ACTIONS_FILE: &str = "actions.json";
pub const SEQUENCES_FILE: &str = "standardized.jsonl";
pub const NGRAM_FILE: &str = "ngram.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TASKFLOW_FILE: &str = "taskflow.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub user_k: usize,
    pub staff_k: usize,
    pub order: usize,
    pub beam: BeamConfig,
    pub retrieval: RetrievalConfig,
    pub seed: u64,
    pub scenario: String,
}

/// The deployment configuration: 100 actions per role, a 4-gram model and
/// top-5 beam expansion.
impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            user_k: 100,
            staff_k: 100,
            order: DEFAULT_ORDER,
            beam: BeamConfig::default(),
            retrieval: RetrievalConfig::default(),
            seed: 42,
            scenario: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub params: PipelineParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCounts {
    pub dialogues: usize,
    pub utterances: usize,
    pub user_actions: usize,
    pub staff_actions: usize,
    /// Utterances whose label fell below the similarity threshold.
    pub unknown_utterances: usize,
    pub ngram_contexts: usize,
    pub samples: usize,
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub params: PipelineParams,
    pub manifest_ops: usize,
    pub counts: PipelineCounts,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub actions: Vec<DialogueAction>,
    pub catalog: ActionCatalog,
    pub sequences: Vec<ActionSequence>,
    pub model: NGramModel,
    pub samples: Vec<ScoredSequence>,
    pub taskflow: TaskFlow,
    pub metadata: Metadata,
}

/// Runs every stage in memory.
pub fn run_stages(
    dialogues: &[Dialogue],
    params: &PipelineParams,
    manifest: &[crate::actions::ManifestOp],
) -> Result<PipelineOutput, PipelineError> {
    let store = UtteranceStore::from_dialogues(dialogues);
    let mut actions = build_actions(dialogues, Speaker::User, params.user_k, params.seed)
        .map_err(stage("cluster"))?;
    actions.extend(
        build_actions(dialogues, Speaker::Staff, params.staff_k, params.seed).map_err(stage("cluster"))?,
    );
    if !manifest.is_empty() {
        actions = apply_manifest(&actions, manifest, &store).map_err(stage("manifest"))?;
    }
    let catalog = ActionCatalog::new(actions.iter().cloned(), &store).map_err(stage("cluster"))?;

    let index = build_bm25_index(&actions, &store, params.retrieval).map_err(stage("standardize"))?;
    let sequences = standardize_corpus(&index, dialogues);
    let labelled: usize = sequences.iter().map(|s| s.interior().len()).sum();

    let model = fit_ngram(&sequences, params.order).map_err(stage("ngram"))?;
    let samples = sample_sequences(&model, &params.beam);
    let taskflow = build_taskflow(&samples, &model, &catalog, &params.scenario).map_err(stage("build"))?;

    let role_count = |r: Speaker| actions.iter().filter(|a| a.role == r).count();
    let counts = PipelineCounts {
        dialogues: dialogues.len(),
        utterances: store.len(),
        user_actions: role_count(Speaker::User),
        staff_actions: role_count(Speaker::Staff),
        unknown_utterances: store.len() - labelled,
        ngram_contexts: model.contexts().count(),
        samples: samples.len(),
        nodes: taskflow.nodes.len(),
        edges: taskflow.edges.len(),
    };
    let files = [
        ("actions", ACTIONS_FILE),
        ("sequences", SEQUENCES_FILE),
        ("ngram", NGRAM_FILE),
        ("samples", SAMPLES_FILE),
        ("taskflow", TASKFLOW_FILE),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    Ok(PipelineOutput {
        actions,
        catalog,
        sequences,
        model,
        samples,
        taskflow,
        metadata: Metadata {
            params: params.clone(),
            manifest_ops: manifest.len(),
            counts,
            files,
        },
    })
}

/// Loads the corpus, runs every stage and writes all artifacts.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let dialogues = load_dialogues(&config.corpus).map_err(stage("ingest"))?;
    let manifest = match &config.manifest {
        Some(p) => load_manifest(p).map_err(stage("manifest"))?,
        None => Vec::new(),
    };
    let out = run_stages(&dialogues, &config.params, &manifest)?;
    write_artifacts(&config.out_dir, &out).map_err(stage("write"))?;
    Ok(out)
}

pub fn write_artifacts(dir: &Path, out: &PipelineOutput) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    save_actions(dir.join(ACTIONS_FILE), &out.actions)?;
    write_sequences(BufWriter::new(File::create(dir.join(SEQUENCES_FILE))?), &out.sequences)?;
    out.model.save(dir.join(NGRAM_FILE))?;
    write_samples(BufWriter::new(File::create(dir.join(SAMPLES_FILE))?), &out.samples)?;
    out.taskflow.save(dir.join(TASKFLOW_FILE))?;
    let mut meta = serde_json::to_string_pretty(&out.metadata)?;
    meta.push('\n');
    std::fs::write(dir.join(METADATA_FILE), meta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::synth::{synthetic_corpus, CorpusShape};

    fn small() -> (Vec<Dialogue>, PipelineParams) {
        let shape = CorpusShape {
            user_actions: 6,
            staff_actions: 6,
            utterances: 600,
            ..CorpusShape::default()
        };
        let params = PipelineParams {
            user_k: 6,
            staff_k: 6,
            scenario: "synthetic".into(),
            ..PipelineParams::default()
        };
        (synthetic_corpus(11, &shape).dialogues, params)
    }

    #[test]
    fn leaves_are_the_samples() {
        let (dialogues, params) = small();
        let out = run_stages(&dialogues, &params, &[]).unwrap();
        let sampled: BTreeSet<Vec<String>> = out
            .samples
            .iter()
            .map(|s| s.seq.interior().to_vec())
            .collect();
        assert_eq!(out.taskflow.action_paths(), sampled);
        assert_eq!(out.metadata.counts.user_actions, 6);
        assert_eq!(out.metadata.params.order, 4);
        assert_eq!(out.metadata.params.beam.top_k, 5);
    }

    #[test]
    fn stage_errors_are_named() {
        let (dialogues, params) = small();
        let too_many = PipelineParams {
            user_k: 100_000,
            ..params
        };
        let err = run_stages(&dialogues, &too_many, &[]).unwrap_err();
        assert_eq!(err.stage, "cluster");
        let missing = PipelineConfig {
            corpus: "/nonexistent/corpus.jsonl".into(),
            out_dir: std::env::temp_dir(),
            manifest: None,
            params: PipelineParams::default(),
        };
        assert_eq!(run_pipeline(&missing).unwrap_err().stage, "ingest");
    }
}
