//! Dialogue standardization: BM25 recall over clustered utterances, rerank of
//! the recalled candidates by text similarity, and the argmax candidate's
//! action as the label.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{fit_vectorizer, DialogueAction, Vectorizer};
use crate::corpus::{tokenize, Dialogue, Speaker, UtteranceStore};

pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("action {action:?} lists utterance {utterance:?} which is not in the corpus")]
    MissingMember { action: String, utterance: String },
    #[error("utterance {utterance:?} belongs to both {first:?} and {second:?}")]
    SharedMember {
        utterance: String,
        first: String,
        second: String,
    },
    #[error("no clustered utterance has any token")]
    EmptyIndex,
    #[error("invalid action sequence: {0}")]
    InvalidSequence(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Candidates kept by BM25 recall.
    pub recall_k: usize,
    /// Similarity below which a label is Unknown.
    pub threshold: f64,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            recall_k: 20,
            threshold: 0.5,
            k1: 1.2,
            b: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone)]
struct IndexedDoc {
    id: String,
    text: String,
    len: u32,
    owner: u32,
    role: Speaker,
}

/// Inverted index over every member utterance of every action.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    config: RetrievalConfig,
    postings: HashMap<String, Vec<Posting>>,
    docs: Vec<IndexedDoc>,
    by_id: HashMap<String, u32>,
    action_ids: Vec<String>,
    avg_doc_length: f64,
    vectorizer: Vectorizer<f64>,
}

pub fn build_bm25_index(
    actions: &[DialogueAction],
    corpus: &UtteranceStore,
    config: RetrievalConfig,
) -> Result<RetrievalIndex, StandardizeError> {
    let mut action_ids: Vec<String> = actions.iter().map(|a| a.id.clone()).collect();
    action_ids.sort();
    let action_pos: HashMap<&str, u32> = action_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();

    let mut members: BTreeMap<&str, &DialogueAction> = BTreeMap::new();
    for a in actions {
        for m in &a.member_ids {
            if let Some(prev) = members.insert(m.as_str(), a) {
                return Err(StandardizeError::SharedMember {
                    utterance: m.clone(),
                    first: prev.id.clone(),
                    second: a.id.clone(),
                });
            }
        }
    }

    let mut docs = Vec::with_capacity(members.len());
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    for (doc, (uid, action)) in members.into_iter().enumerate() {
        let text = corpus
            .text(uid)
            .ok_or_else(|| StandardizeError::MissingMember {
                action: action.id.clone(),
                utterance: uid.to_string(),
            })?;
        let tokens = tokenize(text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.as_str().to_string()).or_default() += 1;
        }
        for (tok, n) in tf {
            postings.entry(tok).or_default().push(Posting {
                doc: doc as u32,
                tf: n,
            });
        }
        docs.push(IndexedDoc {
            id: uid.to_string(),
            text: text.to_string(),
            len: tokens.len() as u32,
            owner: action_pos[action.id.as_str()],
            role: action.role,
        });
    }
    if postings.is_empty() {
        return Err(StandardizeError::EmptyIndex);
    }
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vectorizer = fit_vectorizer(&texts).map_err(|_| StandardizeError::EmptyIndex)?;
    let avg_doc_length = docs.iter().map(|d| f64::from(d.len)).sum::<f64>() / docs.len() as f64;
    let by_id = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.clone(), i as u32))
        .collect();

    Ok(RetrievalIndex {
        config,
        postings,
        docs,
        by_id,
        action_ids,
        avg_doc_length,
        vectorizer,
    })
}

impl RetrievalIndex {
    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, utterance_id: &str) -> Option<usize> {
        self.by_id
            .get(utterance_id)
            .map(|&d| self.docs[d as usize].len as usize)
    }

    pub fn postings(&self, token: &str) -> &[Posting] {
        self.postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_id(&self, doc: u32) -> &str {
        &self.docs[doc as usize].id
    }

    pub fn owner(&self, utterance_id: &str) -> Option<&str> {
        self.by_id
            .get(utterance_id)
            .map(|&d| self.action_ids[self.docs[d as usize].owner as usize].as_str())
    }

    pub fn text(&self, utterance_id: &str) -> Option<&str> {
        self.by_id
            .get(utterance_id)
            .map(|&d| self.docs[d as usize].text.as_str())
    }

    /// Indexed utterance ids in ascending order.
    pub fn utterance_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }

    pub fn vectorizer(&self) -> &Vectorizer<f64> {
        &self.vectorizer
    }

    /// Cosine similarity of TF-IDF vectors under the index's weights.
    pub fn similarity(&self, x: &str, y: &str) -> f64 {
        similarity(&self.vectorizer, x, y)
    }

    fn bm25_scores(&self, query: &str, role: Option<Speaker>) -> Vec<(u32, f64)> {
        let RetrievalConfig { k1, b, .. } = self.config;
        let n = self.docs.len() as f64;
        let mut seen = Vec::new();
        for t in tokenize(query) {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for tok in &seen {
            let list = self.postings(tok.as_str());
            if list.is_empty() {
                continue;
            }
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for p in list {
                let doc = &self.docs[p.doc as usize];
                if role.is_some_and(|r| r != doc.role) {
                    continue;
                }
                let tf = f64::from(p.tf);
                let dl = f64::from(doc.len);
                let s = idf * (tf * (k1 + 1.0))
                    / (tf + k1 * (1.0 - b + b * dl / self.avg_doc_length));
                *scores.entry(p.doc).or_insert(0.0) += s;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|x, y| {
            y.1.total_cmp(&x.1)
                .then_with(|| self.docs[x.0 as usize].id.cmp(&self.docs[y.0 as usize].id))
        });
        ranked
    }

    fn recall_docs(&self, query: &str, k: usize, role: Option<Speaker>) -> Vec<(u32, f64)> {
        let mut ranked = self.bm25_scores(query, role);
        ranked.truncate(k);
        ranked
    }
}

pub fn similarity(vectorizer: &Vectorizer<f64>, x: &str, y: &str) -> f64 {
    vectorizer.cosine(x, y)
}

/// Top `k` indexed utterances by BM25 (`k1`, `b` from the index config),
/// descending score, ties to the smaller utterance id. Query terms are counted
/// once each.
pub fn bm25_recall(index: &RetrievalIndex, query: &str, k: usize) -> Vec<(String, f64)> {
    index
        .recall_docs(query, k, None)
        .into_iter()
        .map(|(d, s)| (index.doc_id(d).to_string(), s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLabel {
    /// `None` is the Unknown label.
    pub action_id: Option<String>,
    pub score: f64,
    pub evidence_id: Option<String>,
}

impl ActionLabel {
    pub fn unknown() -> Self {
        Self {
            action_id: None,
            score: 0.0,
            evidence_id: None,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.action_id.is_none()
    }
}

pub fn standardize_utterance(index: &RetrievalIndex, text: &str) -> ActionLabel {
    standardize_as(index, text, None)
}

/// Labels `text`, restricting candidates to actions of `role` when given.
pub fn standardize_as(index: &RetrievalIndex, text: &str, role: Option<Speaker>) -> ActionLabel {
    let candidates = index.recall_docs(text, index.config.recall_k, role);
    let mut best: Option<(u32, f64)> = None;
    for (doc, _) in candidates {
        let s = index.similarity(text, &index.docs[doc as usize].text);
        let better = match best {
            None => true,
            Some((bd, bs)) => {
                s > bs || (s == bs && index.docs[doc as usize].id < index.docs[bd as usize].id)
            }
        };
        if better {
            best = Some((doc, s));
        }
    }
    match best {
        None => ActionLabel::unknown(),
        Some((doc, score)) => {
            let d = &index.docs[doc as usize];
            let action_id = (score >= index.config.threshold)
                .then(|| index.action_ids[d.owner as usize].clone());
            ActionLabel {
                action_id,
                score,
                evidence_id: Some(d.id.clone()),
            }
        }
    }
}

/// `[SOS] a_1 ... a_n [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionSequence {
    pub actions: Vec<String>,
    #[serde(rename = "dialogue_id", default, skip_serializing_if = "Option::is_none")]
    pub source_dialogue: Option<String>,
}

impl ActionSequence {
    pub fn from_interior<I, S>(interior: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut actions = vec![SOS.to_string()];
        actions.extend(interior.into_iter().map(Into::into));
        actions.push(EOS.to_string());
        Self {
            actions,
            source_dialogue: None,
        }
    }

    pub fn with_source(mut self, dialogue_id: impl Into<String>) -> Self {
        self.source_dialogue = Some(dialogue_id.into());
        self
    }

    pub fn interior(&self) -> &[String] {
        &self.actions[1..self.actions.len() - 1]
    }

    pub fn validate(&self) -> Result<(), StandardizeError> {
        let bad = |m: &str| Err(StandardizeError::InvalidSequence(m.to_string()));
        if self.actions.len() < 2 {
            return bad("fewer than two symbols");
        }
        if self.actions[0] != SOS {
            return bad("does not start with [SOS]");
        }
        if self.actions[self.actions.len() - 1] != EOS {
            return bad("does not end with [EOS]");
        }
        if self.interior().iter().any(|a| a == SOS || a == EOS) {
            return bad("interior [SOS] or [EOS]");
        }
        Ok(())
    }
}

/// Labels every utterance in turn order against its own speaker's actions and
/// drops Unknown labels.
pub fn standardize_dialogue(index: &RetrievalIndex, d: &Dialogue) -> ActionSequence {
    let interior: Vec<String> = d
        .utterances
        .iter()
        .filter_map(|u| standardize_as(index, &u.text, Some(u.speaker)).action_id)
        .collect();
    ActionSequence::from_interior(interior).with_source(d.id.clone())
}

/// [`standardize_dialogue`] over a corpus, labelling each distinct
/// (speaker, text) pair once.
pub fn standardize_corpus(index: &RetrievalIndex, dialogues: &[Dialogue]) -> Vec<ActionSequence> {
    let mut distinct: Vec<(Speaker, &str)> = dialogues
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| (u.speaker, u.text.as_str())))
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    let labels: HashMap<(Speaker, &str), Option<String>> = distinct
        .par_iter()
        .map(|&(s, t)| ((s, t), standardize_as(index, t, Some(s)).action_id))
        .collect();
    dialogues
        .iter()
        .map(|d| {
            let interior = d
                .utterances
                .iter()
                .filter_map(|u| labels[&(u.speaker, u.text.as_str())].clone());
            ActionSequence::from_interior(interior).with_source(d.id.clone())
        })
        .collect()
}

pub fn write_sequences<W: Write>(mut w: W, seqs: &[ActionSequence]) -> std::io::Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_sequences<R: Read>(r: R) -> Result<Vec<ActionSequence>, StandardizeError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: ActionSequence =
            serde_json::from_str(&line).map_err(|e| StandardizeError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        seq.validate().map_err(|e| StandardizeError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use std::collections::BTreeSet;

    fn store(items: &[(&str, Speaker, &str)]) -> UtteranceStore {
        let mut s = UtteranceStore::default();
        for (i, (id, sp, text)) in items.iter().enumerate() {
            s.insert(Utterance {
                id: id.to_string(),
                dialogue_id: "d".into(),
                turn_index: i,
                speaker: *sp,
                text: text.to_string(),
            });
        }
        s
    }

    fn action(id: &str, role: Speaker, members: &[&str]) -> DialogueAction {
        DialogueAction {
            id: id.into(),
            role,
            name: id.into(),
            canonical_id: members[0].into(),
            member_ids: members.iter().map(|m| m.to_string()).collect::<BTreeSet<_>>(),
        }
    }

    #[test]
    fn single_doc_stats() {
        let st = store(&[("x1", Speaker::User, "lock my bike")]);
        let idx = build_bm25_index(
            &[action("user_001", Speaker::User, &["x1"])],
            &st,
            RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.avg_doc_length(), 3.0);
        let hits = bm25_recall(&idx, "lock my bike", 5);
        assert_eq!(hits[0].0, "x1");
        assert!(bm25_recall(&idx, "refund", 5).is_empty());
    }

    #[test]
    fn shared_token_postings() {
        let st = store(&[("x1", Speaker::User, "lock bike"), ("x2", Speaker::User, "lock fee")]);
        let idx = build_bm25_index(
            &[action("user_001", Speaker::User, &["x1", "x2"])],
            &st,
            RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(idx.postings("lock").len(), 2);
        assert_eq!(idx.postings("fee").len(), 1);
    }

    #[test]
    fn worked_bm25_example() {
        let st = store(&[("d1", Speaker::User, "a b"), ("d2", Speaker::User, "c")]);
        let idx = build_bm25_index(
            &[action("user_001", Speaker::User, &["d1", "d2"])],
            &st,
            RetrievalConfig::default(),
        )
        .unwrap();
        let hits = bm25_recall(&idx, "a", 10);
        assert_eq!(hits.len(), 1);
        let expected = 2f64.ln() * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * (2.0 / 1.5)));
        assert!((hits[0].1 - expected).abs() < 1e-12);
        assert!((hits[0].1 - 0.609_969_518_892_751_9).abs() < 1e-12);
    }

    #[test]
    fn missing_and_shared_members() {
        let st = store(&[("x1", Speaker::User, "lock")]);
        let err = build_bm25_index(
            &[action("user_001", Speaker::User, &["nope"])],
            &st,
            RetrievalConfig::default(),
        );
        assert!(matches!(err, Err(StandardizeError::MissingMember { .. })));
        let err = build_bm25_index(
            &[
                action("user_001", Speaker::User, &["x1"]),
                action("user_002", Speaker::User, &["x1"]),
            ],
            &st,
            RetrievalConfig::default(),
        );
        assert!(matches!(err, Err(StandardizeError::SharedMember { .. })));
    }

    fn bike_index() -> RetrievalIndex {
        let st = store(&[
            ("u1", Speaker::User, "i forgot to lock the bike"),
            ("u2", Speaker::User, "forgot locking bike"),
            ("u3", Speaker::User, "brake failure please refund"),
            ("s1", Speaker::Staff, "we locked the bike remotely"),
            ("s2", Speaker::Staff, "refund issued"),
        ]);
        build_bm25_index(
            &[
                action("user_001", Speaker::User, &["u1", "u2"]),
                action("user_002", Speaker::User, &["u3"]),
                action("staff_001", Speaker::Staff, &["s1"]),
                action("staff_002", Speaker::Staff, &["s2"]),
            ],
            &st,
            RetrievalConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn exact_member_is_labelled_with_full_score() {
        let idx = bike_index();
        let l = standardize_utterance(&idx, "brake failure please refund");
        assert_eq!(l.action_id.as_deref(), Some("user_002"));
        assert_eq!(l.score, 1.0);
        assert_eq!(l.evidence_id.as_deref(), Some("u3"));
        assert!(standardize_utterance(&idx, "qwerty zxcv").is_unknown());
    }

    #[test]
    fn equal_similarity_prefers_smaller_id() {
        let st = store(&[("b2", Speaker::User, "lock bike"), ("a9", Speaker::User, "lock bike")]);
        let idx = build_bm25_index(
            &[
                action("user_001", Speaker::User, &["b2"]),
                action("user_002", Speaker::User, &["a9"]),
            ],
            &st,
            RetrievalConfig::default(),
        )
        .unwrap();
        let l = standardize_utterance(&idx, "lock bike");
        assert_eq!(l.evidence_id.as_deref(), Some("a9"));
        assert_eq!(l.action_id.as_deref(), Some("user_002"));
    }

    #[test]
    fn dialogue_to_sequence() {
        let idx = bike_index();
        let mk = |texts: &[(Speaker, &str)]| Dialogue {
            id: "dd".into(),
            scenario: "s".into(),
            utterances: texts
                .iter()
                .enumerate()
                .map(|(i, (sp, t))| Utterance {
                    id: format!("q{i}"),
                    dialogue_id: "dd".into(),
                    turn_index: i,
                    speaker: *sp,
                    text: t.to_string(),
                })
                .collect(),
        };
        let d = mk(&[
            (Speaker::User, "i forgot to lock the bike"),
            (Speaker::Staff, "we locked the bike remotely"),
        ]);
        let seq = standardize_dialogue(&idx, &d);
        assert_eq!(seq.actions, ["[SOS]", "user_001", "staff_001", "[EOS]"]);
        assert_eq!(seq.source_dialogue.as_deref(), Some("dd"));

        let d = mk(&[
            (Speaker::User, "i forgot to lock the bike"),
            (Speaker::Staff, "hmm qqq zzz"),
        ]);
        assert_eq!(standardize_dialogue(&idx, &d).actions.len(), 3);

        let d = mk(&[(Speaker::User, "xx"), (Speaker::Staff, "yy")]);
        assert_eq!(standardize_dialogue(&idx, &d).actions, ["[SOS]", "[EOS]"]);
        assert_eq!(standardize_corpus(&idx, std::slice::from_ref(&d)), vec![standardize_dialogue(&idx, &d)]);
    }

    #[test]
    fn sequence_validation_and_io() {
        let s = ActionSequence::from_interior(["user_001", "staff_002"]).with_source("d7");
        s.validate().unwrap();
        let mut buf = Vec::new();
        write_sequences(&mut buf, std::slice::from_ref(&s)).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"actions\":[\"[SOS]\",\"user_001\",\"staff_002\",\"[EOS]\"],\"dialogue_id\":\"d7\"}\n"
        );
        assert_eq!(read_sequences(buf.as_slice()).unwrap(), vec![s]);
        let bad = ActionSequence {
            actions: vec!["[SOS]".into(), "[EOS]".into(), "x".into()],
            source_dialogue: None,
        };
        assert!(bad.validate().is_err());
    }
}
