//! Conformance replay: feed recorded dialogues to the engine and check that
//! every staff response it produces is the staff action the dialogue shows.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Speaker, Utterance};
use crate::engine::{Engine, Session, TurnResult};
use crate::standardize::standardize_as;
use crate::taskflow::NodeKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub dialogue_id: String,
    pub completed: bool,
    pub user_turns: usize,
    pub fallback_turns: usize,
    /// Index of the utterance where replay first disagreed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub total: usize,
    pub completed: usize,
    pub diverged: usize,
    /// Share of user turns answered with a fallback.
    pub fallback_rate: f64,
    pub verdicts: Vec<Verdict>,
}

impl ConformanceReport {
    pub fn from_verdicts(verdicts: Vec<Verdict>) -> Self {
        let completed = verdicts.iter().filter(|v| v.completed).count();
        let turns: usize = verdicts.iter().map(|v| v.user_turns).sum();
        let fallbacks: usize = verdicts.iter().map(|v| v.fallback_turns).sum();
        Self {
            total: verdicts.len(),
            completed,
            diverged: verdicts.len() - completed,
            fallback_rate: if turns == 0 { 0.0 } else { fallbacks as f64 / turns as f64 },
            verdicts,
        }
    }

    pub fn conformance(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.completed as f64 / self.total as f64
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>10} {:>6} {:>9}  note", "dialogue", "verdict", "turns", "fallback");
        for v in &self.verdicts {
            let verdict = if v.completed { "completed" } else { "diverged" };
            let note = match (&v.diverged_at, &v.reason) {
                (Some(i), Some(r)) => format!("utterance {i}: {r}"),
                (None, Some(r)) => r.clone(),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "{:<24} {:>10} {:>6} {:>9}  {}",
                v.dialogue_id, verdict, v.user_turns, v.fallback_turns, note
            );
        }
        let _ = writeln!(
            out,
            "total {}  completed {}  diverged {}  conformance {:.4}  fallback rate {:.4}",
            self.total,
            self.completed,
            self.diverged,
            self.conformance(),
            self.fallback_rate
        );
        out
    }
}

/// Action ids of the staff nodes a turn passed through, in order.
fn response_actions(engine: &Engine, turn: &TurnResult) -> Vec<String> {
    let tf = engine.taskflow();
    turn.path_delta
        .iter()
        .filter_map(|id| tf.node(id))
        .filter(|n| n.kind == NodeKind::StaffAction)
        .filter_map(|n| n.action_id.clone())
        .collect()
}

fn staff_labels(engine: &Engine, run: &[&Utterance]) -> Vec<Option<String>> {
    run.iter()
        .map(|u| standardize_as(engine.index(), &u.text, Some(Speaker::Staff)).action_id)
        .collect()
}

fn compare(expected: &[Option<String>], got: &[String]) -> Option<String> {
    let matches = expected.len() == got.len()
        && expected.iter().zip(got).all(|(e, g)| e.as_deref() == Some(g.as_str()));
    (!matches).then(|| {
        let exp: Vec<&str> = expected.iter().map(|e| e.as_deref().unwrap_or("?")).collect();
        format!("expected [{}], engine gave [{}]", exp.join(", "), got.join(", "))
    })
}

pub fn replay_dialogue(engine: &Engine, d: &Dialogue) -> Verdict {
    let mut verdict = Verdict {
        dialogue_id: d.id.clone(),
        completed: false,
        user_turns: 0,
        fallback_turns: 0,
        diverged_at: None,
        reason: None,
    };
    let (mut session, opening) = engine.create_session(format!("replay-{}", d.id));
    let utts = &d.utterances;
    let mut i = 0;
    let lead: Vec<&Utterance> = utts.iter().take_while(|u| u.speaker == Speaker::Staff).collect();
    i += lead.len();
    if let Some(reason) = compare(&staff_labels(engine, &lead), &response_actions(engine, &opening)) {
        verdict.diverged_at = Some(0);
        verdict.reason = Some(reason);
        return verdict;
    }
    while i < utts.len() {
        let at = i;
        let user = &utts[i];
        i += 1;
        let run: Vec<&Utterance> = utts[i..].iter().take_while(|u| u.speaker == Speaker::Staff).collect();
        i += run.len();
        verdict.user_turns += 1;
        if session.closed {
            verdict.diverged_at = Some(at);
            verdict.reason = Some("session closed before the dialogue ended".into());
            return verdict;
        }
        let turn = match engine.step(&mut session, &user.text) {
            Ok(t) => t,
            Err(e) => {
                verdict.diverged_at = Some(at);
                verdict.reason = Some(e.to_string());
                return verdict;
            }
        };
        if turn.fallback {
            verdict.fallback_turns += 1;
            verdict.diverged_at = Some(at);
            verdict.reason = Some("fallback".into());
            return verdict;
        }
        if let Some(reason) = compare(&staff_labels(engine, &run), &response_actions(engine, &turn)) {
            verdict.diverged_at = Some(at);
            verdict.reason = Some(reason);
            return verdict;
        }
    }
    let at_end = session.closed
        || engine
            .taskflow()
            .node(&session.current)
            .is_some_and(|n| n.end);
    if at_end {
        verdict.completed = true;
    } else {
        verdict.diverged_at = Some(utts.len());
        verdict.reason = Some(format!("dialogue ended while the engine waits at {}", session.current));
    }
    verdict
}

pub fn replay_conformance(engine: &Engine, dialogues: &[Dialogue]) -> ConformanceReport {
    let verdicts: Vec<Verdict> = dialogues.par_iter().map(|d| replay_dialogue(engine, d)).collect();
    ConformanceReport::from_verdicts(verdicts)
}

/// Dialogues the engine itself would produce: every user choice at every
/// await point, answered with the canonical utterance of the chosen user
/// node. Stops after `limit` dialogues, in depth-first order.
pub fn synthesize_dialogues(engine: &Engine, limit: usize) -> Vec<Dialogue> {
    let tf = engine.taskflow();
    let mut out = Vec::new();
    let (session, opening) = engine.create_session("synth");
    let transcript: Vec<(Speaker, String)> =
        opening.responses.into_iter().map(|t| (Speaker::Staff, t)).collect();
    let mut stack: Vec<(Session, Vec<(Speaker, String)>)> = vec![(session, transcript)];
    while let Some((session, transcript)) = stack.pop() {
        if out.len() >= limit {
            break;
        }
        let at_end = session.closed || tf.node(&session.current).is_some_and(|n| n.end);
        if at_end && transcript.len() >= 2 {
            let id = format!("synth-{:05}", out.len() + 1);
            out.push(to_dialogue(&id, &tf.scenario, &transcript));
        }
        if session.closed {
            continue;
        }
        let mut children: Vec<(&str, String)> = tf
            .children(&session.current)
            .filter_map(|e| tf.node(&e.to))
            .filter(|n| n.kind == NodeKind::UserAction)
            .filter_map(|n| Some((n.id.as_str(), n.text.clone()?)))
            .collect();
        children.sort();
        for (_, text) in children.into_iter().rev() {
            let mut next = session.clone();
            let Ok(turn) = engine.step(&mut next, &text) else { continue };
            if turn.fallback {
                continue;
            }
            let mut t = transcript.clone();
            t.push((Speaker::User, text));
            t.extend(turn.responses.into_iter().map(|r| (Speaker::Staff, r)));
            stack.push((next, t));
        }
    }
    out
}

fn to_dialogue(id: &str, scenario: &str, transcript: &[(Speaker, String)]) -> Dialogue {
    Dialogue {
        id: id.to_string(),
        scenario: scenario.to_string(),
        utterances: transcript
            .iter()
            .enumerate()
            .map(|(i, (speaker, text))| Utterance {
                id: format!("{id}_{i:02}"),
                dialogue_id: id.to_string(),
                turn_index: i,
                speaker: *speaker,
                text: text.clone(),
            })
            .collect(),
    }
}
