//! Versioned snapshots of the live TaskFlow. Readers hold an `Arc` to the
//! snapshot they started with; publishing never mutates an old snapshot.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use super::{validate_taskflow, Issue, Severity, TaskFlow};

#[derive(Debug, Error)]
pub enum PublishError {
    #[error("candidate is based on version {candidate}, current is {current}")]
    Conflict { current: u64, candidate: u64 },
    #[error("candidate has {} validation error(s)", .0.len())]
    Invalid(Vec<Issue>),
}

#[derive(Debug, Default)]
pub struct TaskFlowStore {
    versions: RwLock<BTreeMap<u64, Arc<TaskFlow>>>,
}

impl TaskFlowStore {
    pub fn new(initial: TaskFlow) -> Result<Self, PublishError> {
        let store = Self::default();
        store.replace(initial)?;
        Ok(store)
    }

    pub fn current(&self) -> Option<Arc<TaskFlow>> {
        let v = self.versions.read().expect("store lock poisoned");
        v.values().next_back().cloned()
    }

    pub fn current_version(&self) -> u64 {
        self.current().map_or(0, |t| t.version)
    }

    pub fn get(&self, version: u64) -> Option<Arc<TaskFlow>> {
        let v = self.versions.read().expect("store lock poisoned");
        v.get(&version).cloned()
    }

    pub fn versions(&self) -> Vec<u64> {
        let v = self.versions.read().expect("store lock poisoned");
        v.keys().copied().collect()
    }

    /// Publishes an edit of the current snapshot. The candidate must carry
    /// either the current version (an edited copy of it) or current + 1 (as
    /// produced by the editing functions); it is stored as current + 1.
    pub fn publish(&self, mut candidate: TaskFlow) -> Result<Arc<TaskFlow>, PublishError> {
        let mut v = self.versions.write().expect("store lock poisoned");
        let current = v.keys().next_back().copied().unwrap_or(0);
        if candidate.version != current && candidate.version != current + 1 {
            return Err(PublishError::Conflict {
                current,
                candidate: candidate.version,
            });
        }
        candidate.version = current + 1;
        Self::check(&candidate)?;
        let snap = Arc::new(candidate);
        v.insert(snap.version, Arc::clone(&snap));
        Ok(snap)
    }

    /// Stores a tree as the next version regardless of what it was based on.
    pub fn replace(&self, mut tf: TaskFlow) -> Result<Arc<TaskFlow>, PublishError> {
        Self::check(&tf)?;
        let mut v = self.versions.write().expect("store lock poisoned");
        let current = v.keys().next_back().copied().unwrap_or(0);
        tf.version = tf.version.max(current + 1);
        let snap = Arc::new(tf);
        v.insert(snap.version, Arc::clone(&snap));
        Ok(snap)
    }

    fn check(tf: &TaskFlow) -> Result<(), PublishError> {
        let errors: Vec<Issue> = validate_taskflow(tf)
            .into_iter()
            .filter(|i| i.severity == Severity::Error)
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PublishError::Invalid(errors))
        }
    }
}
