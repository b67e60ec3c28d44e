//! Live sessions over a pinned TaskFlow snapshot.
//!
//! Each user turn is classified to a user action, matched against the
//! children of the session's position, and then the tree is walked through
//! API calls and staff responses until the next user action is expected or a
//! leaf is reached.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Speaker;
use crate::extract::{ParamDef, ParamExtractor};
use crate::standardize::{standardize_as, RetrievalIndex};
use crate::taskflow::{
    validate_taskflow, api_path, Condition, Edge, Issue, NodeKind, Severity, TaskFlow, ROOT_ID,
};
use crate::value::{TypeMismatch, Value};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("taskflow has blocking issues: {}", .0.iter().map(|i| i.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Issue>),
    #[error("session {0:?} is closed")]
    Closed(String),
    #[error("session {session:?} is pinned to version {pinned}, engine runs version {engine}")]
    VersionMismatch {
        session: String,
        pinned: u64,
        engine: u64,
    },
    #[error(transparent)]
    Extract(#[from] crate::extract::ExtractError),
}

pub trait Clock: Send + Sync {
    /// Seconds since the Unix epoch.
    fn now(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub i64);

impl Clock for FixedClock {
    fn now(&self) -> i64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub fallback_message: String,
    /// `{params}` is replaced by the comma-separated missing parameter names.
    pub clarification_message: String,
    /// Match a user action among the root's children when the current node
    /// has no matching child.
    pub root_recovery: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            fallback_message: "Sorry, I did not understand that. Let me transfer you to a human agent.".into(),
            clarification_message: "Could you please provide your {params}?".into(),
            root_recovery: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub taskflow_version: u64,
    pub current: String,
    /// `api.<name>.<field>` response values and extracted parameters by name.
    pub bindings: BTreeMap<String, Value>,
    pub transcript: Vec<TranscriptEntry>,
    pub closed: bool,
    /// Every node entered, in order. A return to the root marks a restart.
    pub path: Vec<String>,
    /// User node whose API call is waiting for missing parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiCallRecord {
    pub name: String,
    pub params: BTreeMap<String, Value>,
    pub response: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnResult {
    pub responses: Vec<String>,
    pub api_calls: Vec<ApiCallRecord>,
    pub path_delta: Vec<String>,
    pub closed: bool,
    pub fallback: bool,
}

impl TurnResult {
    fn fallback(message: String) -> Self {
        Self {
            responses: vec![message],
            fallback: true,
            ..Self::default()
        }
    }
}

/// Verdict of one edge condition against the current bindings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Satisfied,
    Unsatisfied,
    /// Decided by probability against sibling edges.
    Competes,
}

pub fn eval_condition(
    cond: &Condition,
    bindings: &BTreeMap<String, Value>,
) -> Result<Verdict, TypeMismatch> {
    Ok(match cond {
        Condition::Always => Verdict::Satisfied,
        Condition::MaxProb => Verdict::Competes,
        Condition::Predicate(p) => match bindings.get(&p.path) {
            None => Verdict::Unsatisfied,
            Some(v) if v.compare(p.op, &p.literal)? => Verdict::Satisfied,
            Some(_) => Verdict::Unsatisfied,
        },
    })
}

fn better<'a>(a: &'a Edge, b: &'a Edge) -> &'a Edge {
    let pa = a.prob.unwrap_or(0.0);
    let pb = b.prob.unwrap_or(0.0);
    if pb > pa || (pb == pa && b.to < a.to) {
        b
    } else {
        a
    }
}

/// Next edge out of a node: satisfied Predicate/Always edges win over
/// MaxProb ones; within a class the higher probability wins, then the
/// smaller node id. `None` when nothing applies.
pub fn select_edge<'a>(
    edges: &[&'a Edge],
    bindings: &BTreeMap<String, Value>,
) -> Result<Option<&'a Edge>, TypeMismatch> {
    let mut satisfied: Option<&Edge> = None;
    let mut competing: Option<&Edge> = None;
    for e in edges {
        let slot = match eval_condition(&e.condition, bindings)? {
            Verdict::Satisfied => &mut satisfied,
            Verdict::Competes => &mut competing,
            Verdict::Unsatisfied => continue,
        };
        *slot = Some(slot.map_or(*e, |cur| better(cur, e)));
    }
    Ok(satisfied.or(competing))
}

enum Advance {
    Done,
    Missing(Vec<String>),
    Stuck,
}

/// Executes sessions on one TaskFlow version.
pub struct Engine {
    tf: Arc<TaskFlow>,
    index: Arc<RetrievalIndex>,
    extractor: ParamExtractor,
    config: EngineConfig,
    clock: Arc<dyn Clock>,
}

impl Engine {
    pub fn new(
        tf: Arc<TaskFlow>,
        index: Arc<RetrievalIndex>,
        defs: Vec<ParamDef>,
        config: EngineConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, EngineError> {
        let errors: Vec<Issue> = validate_taskflow(&tf)
            .into_iter()
            .filter(|i| i.severity == Severity::Error)
            .collect();
        if !errors.is_empty() {
            return Err(EngineError::Invalid(errors));
        }
        Ok(Self {
            tf,
            index,
            extractor: ParamExtractor::new(defs)?,
            config,
            clock,
        })
    }

    pub fn taskflow(&self) -> &Arc<TaskFlow> {
        &self.tf
    }

    pub fn index(&self) -> &Arc<RetrievalIndex> {
        &self.index
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// A session at the root. When the root has no user-action child the
    /// opening staff turns are played at once and returned.
    pub fn create_session(&self, id: impl Into<String>) -> (Session, TurnResult) {
        let mut session = Session {
            id: id.into(),
            taskflow_version: self.tf.version,
            current: ROOT_ID.to_string(),
            bindings: BTreeMap::new(),
            transcript: Vec::new(),
            closed: false,
            path: vec![ROOT_ID.to_string()],
            pending: None,
        };
        let mut turn = TurnResult::default();
        if !self.has_user_child(ROOT_ID) {
            let mut draft = session.clone();
            if let Ok(Advance::Done) = self.advance(&mut draft, &mut turn) {
                session = draft;
                turn.closed = session.closed;
            } else {
                turn = TurnResult::default();
            }
        }
        (session, turn)
    }

    pub fn step(&self, session: &mut Session, text: &str) -> Result<TurnResult, EngineError> {
        self.step_at(session, text, self.clock.now())
    }

    /// One user turn. On fallback the session position is unchanged.
    pub fn step_at(&self, session: &mut Session, text: &str, now: i64) -> Result<TurnResult, EngineError> {
        if session.closed {
            return Err(EngineError::Closed(session.id.clone()));
        }
        if session.taskflow_version != self.tf.version {
            return Err(EngineError::VersionMismatch {
                session: session.id.clone(),
                pinned: session.taskflow_version,
                engine: self.tf.version,
            });
        }
        let extracted = self.extractor.extract_values(text, now);

        if let Some(pending) = session.pending.clone() {
            let mut draft = session.clone();
            for pv in &extracted {
                draft.bindings.insert(pv.param.clone(), pv.value.clone());
            }
            draft.transcript.push(TranscriptEntry {
                speaker: Speaker::User,
                text: text.to_string(),
                node: None,
            });
            let mut turn = TurnResult::default();
            self.enter(&mut draft, &pending, &mut turn);
            if let Ok(Advance::Done) = self.advance(&mut draft, &mut turn) {
                draft.pending = None;
                turn.closed = draft.closed;
                *session = draft;
                return Ok(turn);
            }
        }

        let label = standardize_as(&self.index, text, Some(Speaker::User));
        let Some(action) = label.action_id else {
            return Ok(self.fallback(session, text, self.config.fallback_message.clone()));
        };
        let Some(target) = self.match_user_node(&session.current, &action) else {
            return Ok(self.fallback(session, text, self.config.fallback_message.clone()));
        };

        let mut draft = session.clone();
        for pv in &extracted {
            draft.bindings.insert(pv.param.clone(), pv.value.clone());
        }
        draft.pending = None;
        draft.transcript.push(TranscriptEntry {
            speaker: Speaker::User,
            text: text.to_string(),
            node: Some(target.clone()),
        });
        let mut turn = TurnResult::default();
        self.enter(&mut draft, &target, &mut turn);
        match self.advance(&mut draft, &mut turn) {
            Ok(Advance::Done) => {
                turn.closed = draft.closed;
                *session = draft;
                Ok(turn)
            }
            Ok(Advance::Missing(params)) => {
                let message = self
                    .config
                    .clarification_message
                    .replace("{params}", &params.join(", "));
                for pv in extracted {
                    session.bindings.insert(pv.param, pv.value);
                }
                session.pending = Some(target);
                Ok(self.fallback(session, text, message))
            }
            Ok(Advance::Stuck) | Err(_) => Ok(self.fallback(session, text, self.config.fallback_message.clone())),
        }
    }

    fn fallback(&self, session: &mut Session, text: &str, message: String) -> TurnResult {
        session.transcript.push(TranscriptEntry {
            speaker: Speaker::User,
            text: text.to_string(),
            node: None,
        });
        session.transcript.push(TranscriptEntry {
            speaker: Speaker::Staff,
            text: message.clone(),
            node: None,
        });
        TurnResult::fallback(message)
    }

    fn has_user_child(&self, id: &str) -> bool {
        self.tf.children(id).any(|e| {
            self.tf
                .node(&e.to)
                .is_some_and(|n| n.kind == NodeKind::UserAction)
        })
    }

    fn user_child(&self, id: &str, action: &str) -> Option<String> {
        self.tf
            .children(id)
            .filter_map(|e| self.tf.node(&e.to))
            .filter(|n| n.kind == NodeKind::UserAction && n.action_id.as_deref() == Some(action))
            .map(|n| n.id.clone())
            .min()
    }

    fn match_user_node(&self, current: &str, action: &str) -> Option<String> {
        self.user_child(current, action).or_else(|| {
            (self.config.root_recovery && current != ROOT_ID)
                .then(|| self.user_child(ROOT_ID, action))
                .flatten()
        })
    }

    /// Moves to `id`, first returning to the root when `id` is not a child of
    /// the current node.
    fn enter(&self, session: &mut Session, id: &str, turn: &mut TurnResult) {
        let is_child = self
            .tf
            .parent_edge(id)
            .is_some_and(|e| e.from == session.current);
        if !is_child && session.current != ROOT_ID {
            session.path.push(ROOT_ID.to_string());
            turn.path_delta.push(ROOT_ID.to_string());
        }
        session.current = id.to_string();
        session.path.push(id.to_string());
        turn.path_delta.push(id.to_string());
    }

    fn advance(&self, session: &mut Session, turn: &mut TurnResult) -> Result<Advance, TypeMismatch> {
        loop {
            let edges: Vec<&Edge> = self.tf.children(&session.current).collect();
            if edges.is_empty() {
                session.closed = true;
                return Ok(Advance::Done);
            }
            if self.has_user_child(&session.current) {
                return Ok(Advance::Done);
            }
            let Some(edge) = select_edge(&edges, &session.bindings)? else {
                return Ok(Advance::Stuck);
            };
            let Some(node) = self.tf.node(&edge.to) else {
                return Ok(Advance::Stuck);
            };
            match node.kind {
                NodeKind::ApiCall => {
                    let Some(spec) = node.api.as_deref().and_then(|a| self.tf.api_spec(a)) else {
                        return Ok(Advance::Stuck);
                    };
                    let missing: Vec<String> = spec
                        .params
                        .iter()
                        .filter(|p| !session.bindings.contains_key(&p.name))
                        .map(|p| p.name.clone())
                        .collect();
                    if !missing.is_empty() {
                        return Ok(Advance::Missing(missing));
                    }
                    let params: BTreeMap<String, Value> = spec
                        .params
                        .iter()
                        .map(|p| (p.name.clone(), session.bindings[&p.name].clone()))
                        .collect();
                    let response = spec.call(&params);
                    for (field, value) in &response {
                        session.bindings.insert(api_path(&spec.name, field), value.clone());
                    }
                    turn.api_calls.push(ApiCallRecord {
                        name: spec.name.clone(),
                        params,
                        response,
                    });
                }
                NodeKind::StaffAction => {
                    let text = node.text.clone().unwrap_or_default();
                    session.transcript.push(TranscriptEntry {
                        speaker: Speaker::Staff,
                        text: text.clone(),
                        node: Some(node.id.clone()),
                    });
                    turn.responses.push(text);
                }
                NodeKind::UserAction | NodeKind::Root => return Ok(Advance::Stuck),
            }
            session.current = node.id.clone();
            session.path.push(node.id.clone());
            turn.path_delta.push(node.id.clone());
        }
    }
}
