//! Shared service state: the versioned TaskFlow store, one engine per
//! version, and the live sessions. Every HTTP handler is a thin wrapper over
//! a method here.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use taskflow_core::actions::{load_actions, ActionCatalog, DialogueAction};
use taskflow_core::corpus::{load_dialogues, Speaker, UtteranceStore};
use taskflow_core::engine::{Clock, Engine, Session, SystemClock, TurnResult};
use taskflow_core::pipeline::{run_pipeline, Metadata, ACTIONS_FILE, TASKFLOW_FILE};
use taskflow_core::standardize::{build_bm25_index, RetrievalIndex};
use taskflow_core::taskflow::{TaskFlow, TaskFlowStore};

use crate::{ServiceConfig, ServiceError};

/// Dialogue actions of the loaded artifacts and the retrieval index over
/// their member utterances.
#[derive(Debug)]
pub struct Artifacts {
    pub actions: Vec<ActionView>,
    pub index: Arc<RetrievalIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionView {
    pub id: String,
    pub role: Speaker,
    pub name: String,
    pub canonical_id: String,
    pub canonical_text: String,
    pub members: usize,
}

impl Artifacts {
    pub fn build(
        actions: &[DialogueAction],
        store: &UtteranceStore,
        config: &ServiceConfig,
    ) -> Result<Self, ServiceError> {
        let catalog = ActionCatalog::new(actions.iter().cloned(), store).map_err(ServiceError::artifacts)?;
        let index = build_bm25_index(actions, store, config.pipeline.retrieval).map_err(ServiceError::artifacts)?;
        let actions = catalog
            .iter()
            .map(|a| ActionView {
                id: a.id.clone(),
                role: a.role,
                name: a.name.clone(),
                canonical_id: a.canonical_id.clone(),
                canonical_text: catalog.canonical_text(&a.id).unwrap_or_default().to_string(),
                members: a.member_ids.len(),
            })
            .collect();
        Ok(Self {
            actions,
            index: Arc::new(index),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub taskflow_version: u64,
    /// Staff turns emitted before the user speaks.
    pub turn: TurnResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub taskflow_version: u64,
    pub metadata: Metadata,
}

struct SessionSlot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

pub struct AppState {
    config: ServiceConfig,
    store: TaskFlowStore,
    artifacts: RwLock<Arc<Artifacts>>,
    engines: Mutex<BTreeMap<u64, Arc<Engine>>>,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    next_session: AtomicU64,
    clock: Arc<dyn Clock>,
}

impl AppState {
    pub fn new(
        config: ServiceConfig,
        taskflow: TaskFlow,
        artifacts: Artifacts,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let store = TaskFlowStore::new(taskflow)?;
        Ok(Self {
            config,
            store,
            artifacts: RwLock::new(Arc::new(artifacts)),
            engines: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            clock,
        })
    }

    /// Reads `taskflow.json` and `actions.json` from the artifact directory,
    /// running the pipeline first when they are absent.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let corpus = config.corpus.clone().ok_or(ServiceError::NoCorpus)?;
        let tf_path = config.artifact_dir.join(TASKFLOW_FILE);
        let actions_path = config.artifact_dir.join(ACTIONS_FILE);
        if !tf_path.exists() || !actions_path.exists() {
            tracing::info!(dir = %config.artifact_dir.display(), "artifacts missing, running the pipeline");
            run_pipeline(&config.pipeline_config()?)?;
        }
        let dialogues = load_dialogues(&corpus).map_err(ServiceError::artifacts)?;
        let store = UtteranceStore::from_dialogues(&dialogues);
        let actions = load_actions(&actions_path).map_err(ServiceError::artifacts)?;
        let taskflow = TaskFlow::load(&tf_path).map_err(ServiceError::artifacts)?;
        let artifacts = Artifacts::build(&actions, &store, &config)?;
        Self::new(config, taskflow, artifacts, Arc::new(SystemClock))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &TaskFlowStore {
        &self.store
    }

    pub fn artifacts(&self) -> Arc<Artifacts> {
        Arc::clone(&self.artifacts.read().expect("artifact lock poisoned"))
    }

    /// The engine running `version`, built on first use.
    pub fn engine(&self, version: u64) -> Result<Arc<Engine>, ServiceError> {
        if let Some(e) = self.engines.lock().expect("engine lock poisoned").get(&version) {
            return Ok(Arc::clone(e));
        }
        let tf = self.store.get(version).ok_or(ServiceError::UnknownVersion(version))?;
        let engine = Arc::new(self.make_engine(tf, &self.artifacts())?);
        let mut engines = self.engines.lock().expect("engine lock poisoned");
        Ok(Arc::clone(engines.entry(version).or_insert(engine)))
    }

    fn make_engine(&self, tf: Arc<TaskFlow>, artifacts: &Artifacts) -> Result<Engine, ServiceError> {
        Ok(Engine::new(
            tf,
            Arc::clone(&artifacts.index),
            self.config.param_defs.clone(),
            self.config.engine_config(),
            Arc::clone(&self.clock),
        )?)
    }

    /// Opens a session pinned to the current TaskFlow version.
    pub fn create_session(&self) -> Result<SessionCreated, ServiceError> {
        let version = self.store.current_version();
        let engine = self.engine(version)?;
        let id = format!("s{:06}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let (session, turn) = engine.create_session(id.clone());
        self.sessions.lock().expect("session lock poisoned").insert(
            id.clone(),
            SessionSlot {
                session: Arc::new(tokio::sync::Mutex::new(session)),
                last_used: Instant::now(),
            },
        );
        Ok(SessionCreated {
            session_id: id,
            taskflow_version: version,
            turn,
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ServiceError> {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let slot = sessions.get_mut(id).ok_or_else(|| ServiceError::UnknownSession(id.to_string()))?;
        slot.last_used = Instant::now();
        Ok(Arc::clone(&slot.session))
    }

    /// One user turn. Turns of the same session run one at a time.
    pub async fn post_message(&self, id: &str, text: &str) -> Result<TurnResult, ServiceError> {
        let slot = self.slot(id)?;
        let mut session = slot.lock().await;
        let engine = self.engine(session.taskflow_version)?;
        Ok(engine.step(&mut session, text)?)
    }

    pub async fn session(&self, id: &str) -> Result<Session, ServiceError> {
        let slot = self.slot(id)?;
        let session = slot.lock().await;
        Ok(session.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock poisoned").len()
    }

    /// Drops sessions idle for longer than `max_idle`; returns how many.
    pub fn expire_idle(&self, max_idle: Duration) -> usize {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let before = sessions.len();
        sessions.retain(|_, s| s.last_used.elapsed() <= max_idle);
        before - sessions.len()
    }

    pub fn taskflow(&self, version: Option<u64>) -> Result<Arc<TaskFlow>, ServiceError> {
        match version {
            Some(v) => self.store.get(v).ok_or(ServiceError::UnknownVersion(v)),
            None => self.store.current().ok_or(ServiceError::UnknownVersion(0)),
        }
    }

    /// Validates and stores an edited tree as the next version.
    pub fn publish(&self, candidate: TaskFlow) -> Result<u64, ServiceError> {
        Ok(self.store.publish(candidate)?.version)
    }

    pub fn actions(&self) -> Vec<ActionView> {
        self.artifacts().actions.clone()
    }

    /// Reruns the offline pipeline and makes its tree the current version.
    /// Existing sessions stay on the version they started with.
    pub fn run_pipeline(&self) -> Result<PipelineSummary, ServiceError> {
        let config = self.config.pipeline_config()?;
        let out = run_pipeline(&config)?;
        let dialogues = load_dialogues(&config.corpus).map_err(ServiceError::artifacts)?;
        let store = UtteranceStore::from_dialogues(&dialogues);
        let artifacts = Arc::new(Artifacts::build(&out.actions, &store, &self.config)?);
        let snap = self.store.replace(out.taskflow)?;
        let engine = Arc::new(self.make_engine(Arc::clone(&snap), &artifacts)?);
        self.engines.lock().expect("engine lock poisoned").insert(snap.version, engine);
        *self.artifacts.write().expect("artifact lock poisoned") = artifacts;
        Ok(PipelineSummary {
            taskflow_version: snap.version,
            metadata: out.metadata,
        })
    }
}
