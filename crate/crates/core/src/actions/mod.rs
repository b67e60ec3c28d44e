//! Dialogue Actions: per-role clusters of utterances that carry the same
//! meaning, each represented by a medoid utterance.
//!
//! Construction is two-stage: utterances are embedded with [`Vectorizer`] and
//! grouped with [`kmeans_cluster`]. Annotator corrections are applied
//! afterwards as a [`ManifestOp`] edit script.

mod kmeans;
mod vectorizer;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, Speaker, UtteranceStore};
use crate::num::Real;

pub use kmeans::{kmeans_cluster, Clustering, MAX_ITERATIONS};
pub use vectorizer::{fit_vectorizer, EmbeddingVector, Vectorizer};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("no texts to fit")]
    EmptyInput,
    #[error("no text produced any token")]
    EmptyVocabulary,
    #[error("k must be positive")]
    ZeroClusters,
    #[error("cannot form {k} clusters from {points} points")]
    TooFewPoints { k: usize, points: usize },
    #[error("vector dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("utterance {utterance:?} is not a member of {action:?}")]
    NotAMember { utterance: String, action: String },
    #[error("utterance {0:?} not found in corpus")]
    MissingUtterance(String),
    #[error("cannot merge {a:?} ({ra}) with {b:?} ({rb})")]
    CrossRole {
        a: String,
        ra: Speaker,
        b: String,
        rb: Speaker,
    },
    #[error("cannot merge {0:?} into itself")]
    SelfMerge(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueAction {
    pub id: String,
    pub role: Speaker,
    pub name: String,
    pub canonical_id: String,
    pub member_ids: BTreeSet<String>,
}

const NAME_CHARS: usize = 48;

fn short_name(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.chars().count() <= NAME_CHARS {
        trimmed.to_string()
    } else {
        let mut s: String = trimmed.chars().take(NAME_CHARS - 1).collect();
        s.push('…');
        s
    }
}

fn action_id(role: Speaker, n: usize) -> String {
    format!("{}_{n:03}", role.as_str())
}

/// Embeds the utterances of one role for medoid scoring. Fit over every
/// utterance of that role in the store.
struct RoleEmbedder<'a> {
    vectorizer: Vectorizer<f64>,
    store: &'a UtteranceStore,
}

impl<'a> RoleEmbedder<'a> {
    fn fit(store: &'a UtteranceStore, role: Speaker) -> Result<Self, ActionError> {
        let texts: Vec<&str> = store
            .iter()
            .filter(|u| u.speaker == role)
            .map(|u| u.text.as_str())
            .collect();
        Ok(Self {
            vectorizer: fit_vectorizer(&texts)?,
            store,
        })
    }

    fn medoid(&self, members: &BTreeSet<String>) -> Result<String, ActionError> {
        let vecs = members
            .iter()
            .map(|id| {
                self.store
                    .text(id)
                    .map(|t| self.vectorizer.embed(t))
                    .ok_or_else(|| ActionError::MissingUtterance(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<(&str, &EmbeddingVector<f64>)> =
            members.iter().map(String::as_str).zip(vecs.iter()).collect();
        Ok(medoid(&refs).to_string())
    }
}

/// Member maximizing the summed cosine similarity to the other members; ties
/// go to the smallest id. Members are processed in id order so the result
/// does not depend on input order.
pub fn medoid<'a, F: Real>(members: &[(&'a str, &EmbeddingVector<F>)]) -> &'a str {
    assert!(!members.is_empty(), "medoid of an empty cluster");
    let mut sorted: Vec<_> = members.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let dim = sorted[0].1.dim();
    let mut total = vec![F::zero(); dim];
    for (_, v) in &sorted {
        for &(i, x) in v.entries() {
            total[i as usize] = total[i as usize] + x;
        }
    }
    let mut best: Option<(&str, F)> = None;
    for (id, v) in &sorted {
        let score = v.dot_dense(&total) - v.norm_sq();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((id, score));
        }
    }
    best.map(|(id, _)| id).expect("non-empty")
}

/// Clusters the utterances of `role` into `k` actions. Ids are
/// `<role>_001`, `<role>_002`, ... by descending cluster size.
pub fn build_actions(
    dialogues: &[Dialogue],
    role: Speaker,
    k: usize,
    seed: u64,
) -> Result<Vec<DialogueAction>, ActionError> {
    let utterances: Vec<_> = dialogues
        .iter()
        .flat_map(|d| d.utterances.iter())
        .filter(|u| u.speaker == role)
        .collect();
    if utterances.len() < k {
        return Err(ActionError::TooFewPoints {
            k,
            points: utterances.len(),
        });
    }
    let texts: Vec<&str> = utterances.iter().map(|u| u.text.as_str()).collect();
    let vectorizer: Vectorizer<f64> = fit_vectorizer(&texts)?;
    let vectors: Vec<_> = texts.iter().map(|t| vectorizer.embed(t)).collect();
    let clustering = kmeans_cluster(&vectors, k, seed)?;

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in clustering.assignments.iter().enumerate() {
        groups[c].push(i);
    }
    let mut clusters: Vec<(BTreeSet<String>, String)> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let members: Vec<(&str, &EmbeddingVector<f64>)> = g
                .iter()
                .map(|&i| (utterances[i].id.as_str(), &vectors[i]))
                .collect();
            let canonical = medoid(&members).to_string();
            let ids = g.iter().map(|&i| utterances[i].id.clone()).collect();
            (ids, canonical)
        })
        .collect();
    clusters.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));

    let text_of = |id: &str| {
        utterances
            .iter()
            .find(|u| u.id == id)
            .map(|u| u.text.as_str())
            .unwrap_or_default()
    };
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(n, (member_ids, canonical_id))| DialogueAction {
            id: action_id(role, n + 1),
            role,
            name: short_name(text_of(&canonical_id)),
            canonical_id,
            member_ids,
        })
        .collect())
}

/// One annotator edit. `merge` folds `with` into `id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ManifestOp {
    Rename { id: String, name: String },
    Merge { id: String, with: String },
    Delete { id: String },
    Move {
        utterance: String,
        from: String,
        to: String,
    },
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestOp>, ActionError> {
    let raw = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&raw)?)
}

/// Applies annotator edits in order. Actions touched by a merge or move get
/// their medoid recomputed; an action emptied by moves is dropped.
pub fn apply_manifest(
    actions: &[DialogueAction],
    manifest: &[ManifestOp],
    store: &UtteranceStore,
) -> Result<Vec<DialogueAction>, ActionError> {
    let mut out: Vec<DialogueAction> = actions.to_vec();
    let mut touched: BTreeSet<String> = BTreeSet::new();
    let pos = |out: &[DialogueAction], id: &str| {
        out.iter()
            .position(|a| a.id == id)
            .ok_or_else(|| ActionError::UnknownAction(id.to_string()))
    };

    for op in manifest {
        match op {
            ManifestOp::Rename { id, name } => {
                let i = pos(&out, id)?;
                out[i].name = name.clone();
            }
            ManifestOp::Merge { id, with } => {
                if id == with {
                    return Err(ActionError::SelfMerge(id.clone()));
                }
                let i = pos(&out, id)?;
                let j = pos(&out, with)?;
                if out[i].role != out[j].role {
                    return Err(ActionError::CrossRole {
                        a: id.clone(),
                        ra: out[i].role,
                        b: with.clone(),
                        rb: out[j].role,
                    });
                }
                let absorbed = out.remove(j);
                let i = pos(&out, id)?;
                out[i].member_ids.extend(absorbed.member_ids);
                touched.insert(id.clone());
                touched.remove(with);
            }
            ManifestOp::Delete { id } => {
                let i = pos(&out, id)?;
                out.remove(i);
                touched.remove(id);
            }
            ManifestOp::Move {
                utterance,
                from,
                to,
            } => {
                let i = pos(&out, from)?;
                let j = pos(&out, to)?;
                if out[i].role != out[j].role {
                    return Err(ActionError::CrossRole {
                        a: from.clone(),
                        ra: out[i].role,
                        b: to.clone(),
                        rb: out[j].role,
                    });
                }
                if !out[i].member_ids.remove(utterance) {
                    return Err(ActionError::NotAMember {
                        utterance: utterance.clone(),
                        action: from.clone(),
                    });
                }
                out[j].member_ids.insert(utterance.clone());
                touched.insert(to.clone());
                if out[i].member_ids.is_empty() {
                    out.remove(i);
                    touched.remove(from);
                } else {
                    touched.insert(from.clone());
                }
            }
        }
    }

    let roles: BTreeSet<Speaker> = out
        .iter()
        .filter(|a| touched.contains(&a.id))
        .map(|a| a.role)
        .collect();
    for role in roles {
        let embedder = RoleEmbedder::fit(store, role)?;
        for a in out.iter_mut().filter(|a| a.role == role && touched.contains(&a.id)) {
            a.canonical_id = embedder.medoid(&a.member_ids)?;
        }
    }
    Ok(out)
}

/// Actions together with the text of their canonical utterances.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionCatalog {
    actions: BTreeMap<String, DialogueAction>,
    texts: BTreeMap<String, String>,
}

impl ActionCatalog {
    pub fn new(
        actions: impl IntoIterator<Item = DialogueAction>,
        store: &UtteranceStore,
    ) -> Result<Self, ActionError> {
        let mut catalog = ActionCatalog::default();
        for a in actions {
            let text = store
                .text(&a.canonical_id)
                .ok_or_else(|| ActionError::MissingUtterance(a.canonical_id.clone()))?
                .to_string();
            catalog.insert(a, text);
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, action: DialogueAction, canonical_text: String) {
        self.texts.insert(action.id.clone(), canonical_text);
        self.actions.insert(action.id.clone(), action);
    }

    pub fn get(&self, id: &str) -> Option<&DialogueAction> {
        self.actions.get(id)
    }

    pub fn role(&self, id: &str) -> Option<Speaker> {
        self.actions.get(id).map(|a| a.role)
    }

    pub fn canonical_text(&self, id: &str) -> Option<&str> {
        self.texts.get(id).map(String::as_str)
    }

    /// Actions in id order.
    pub fn iter(&self) -> impl Iterator<Item = &DialogueAction> {
        self.actions.values()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn save_actions(path: impl AsRef<Path>, actions: &[DialogueAction]) -> Result<(), ActionError> {
    let mut body = serde_json::to_string_pretty(actions)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_actions(path: impl AsRef<Path>) -> Result<Vec<DialogueAction>, ActionError> {
    let raw = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&raw)?)
}
