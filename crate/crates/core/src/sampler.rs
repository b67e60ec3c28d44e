//! Beam sampling of complete action sequences from an [`NGramModel`].
//!
//! Every partial sequence in the beam is extended with its top-K
//! continuations. A partial that reaches `[EOS]` leaves the beam and becomes a
//! sample. The beam cap, length cap, probability floor and sample cap bound
//! the otherwise exponential expansion.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::ngram::NGramModel;
use crate::standardize::{ActionSequence, StandardizeError, EOS, SOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub seq: ActionSequence,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    /// Continuations tried per partial sequence.
    pub top_k: usize,
    /// Partials kept after each step.
    pub beam_cap: usize,
    /// Longest interior (excluding `[SOS]`/`[EOS]`) a partial may reach.
    pub max_len: usize,
    pub min_log_prob: f64,
    pub max_completed: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            beam_cap: 200,
            max_len: 40,
            min_log_prob: 1e-4f64.ln(),
            max_completed: 500,
        }
    }
}

impl BeamConfig {
    /// Caps large enough that nothing but `max_len` limits the search.
    pub fn unbounded(max_len: usize) -> Self {
        Self {
            top_k: usize::MAX,
            beam_cap: usize::MAX,
            max_len,
            min_log_prob: f64::NEG_INFINITY,
            max_completed: usize::MAX,
        }
    }
}

/// Up to `k` continuations of the longest stored suffix of `context`, by
/// descending probability then action id.
pub fn top_k_continuations(model: &NGramModel, context: &[String], k: usize) -> Vec<(String, f64)> {
    let Some(ctx) = model.longest_stored_suffix(context) else {
        return Vec::new();
    };
    let total = model.context_count(ctx) as f64;
    let mut next: Vec<(&str, u64)> = model.continuations(ctx).collect();
    next.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    next.into_iter()
        .take(k)
        .map(|(a, c)| (a.to_string(), c as f64 / total))
        .collect()
}

fn rank(a: &(Vec<String>, f64), b: &(Vec<String>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

pub fn sample_sequences(model: &NGramModel, cfg: &BeamConfig) -> Vec<ScoredSequence> {
    let ctx_len = model.order() - 1;
    let mut beam: Vec<(Vec<String>, f64)> = vec![(vec![SOS.to_string()], 0.0)];
    let mut completed: Vec<(Vec<String>, f64)> = Vec::new();

    'search: while !beam.is_empty() {
        let mut next_beam = Vec::new();
        for (partial, lp) in &beam {
            let ctx = &partial[partial.len().saturating_sub(ctx_len)..];
            for (action, p) in top_k_continuations(model, ctx, cfg.top_k) {
                let lp = lp + p.ln();
                if lp < cfg.min_log_prob {
                    continue;
                }
                let mut seq = partial.clone();
                let done = action == EOS;
                seq.push(action);
                if done {
                    completed.push((seq, lp));
                    if completed.len() >= cfg.max_completed {
                        break 'search;
                    }
                } else if seq.len() - 1 <= cfg.max_len {
                    next_beam.push((seq, lp));
                }
            }
        }
        next_beam.sort_by(rank);
        next_beam.truncate(cfg.beam_cap);
        beam = next_beam;
    }

    completed.sort_by(rank);
    completed.dedup_by(|a, b| a.0 == b.0);
    completed
        .into_iter()
        .map(|(actions, log_prob)| ScoredSequence {
            seq: ActionSequence {
                actions,
                source_dialogue: None,
            },
            log_prob,
        })
        .collect()
}

/// All positive-probability sequences with at most `max_len` interior
/// symbols, by depth-first search. Distinct sequences only.
pub fn enumerate_sequences(model: &NGramModel, max_len: usize) -> BTreeSet<Vec<String>> {
    fn walk(
        model: &NGramModel,
        prefix: &mut Vec<String>,
        max_len: usize,
        out: &mut BTreeSet<Vec<String>>,
    ) {
        let ctx_len = model.order() - 1;
        let ctx = prefix[prefix.len().saturating_sub(ctx_len)..].to_vec();
        let Some(stored) = model.longest_stored_suffix(&ctx) else {
            return;
        };
        let nexts: Vec<String> = model.continuations(stored).map(|(a, _)| a.to_string()).collect();
        for a in nexts {
            prefix.push(a);
            if prefix.last().map(String::as_str) == Some(EOS) {
                out.insert(prefix.clone());
            } else if prefix.len() - 1 <= max_len {
                walk(model, prefix, max_len, out);
            }
            prefix.pop();
        }
    }
    let mut out = BTreeSet::new();
    walk(model, &mut vec![SOS.to_string()], max_len, &mut out);
    out
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    actions: Vec<String>,
    log_prob: f64,
}

pub fn write_samples<W: Write>(mut w: W, samples: &[ScoredSequence]) -> std::io::Result<()> {
    for s in samples {
        let rec = SampleRecord {
            actions: s.seq.actions.clone(),
            log_prob: s.log_prob,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<ScoredSequence>, StandardizeError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| StandardizeError::Malformed {
            line: i + 1,
            message,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let seq = ActionSequence {
            actions: rec.actions,
            source_dialogue: None,
        };
        seq.validate().map_err(|e| malformed(e.to_string()))?;
        out.push(ScoredSequence {
            seq,
            log_prob: rec.log_prob,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{fit_ngram, sequence_prob};

    fn toy() -> NGramModel {
        fit_ngram(
            &[
                ActionSequence::from_interior(["A", "B"]),
                ActionSequence::from_interior(["A", "B"]),
                ActionSequence::from_interior(["A", "C"]),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn top_k_ordering() {
        let m = toy();
        let ctx = vec!["A".to_string()];
        let two = top_k_continuations(&m, &ctx, 2);
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].0, "B");
        assert!((two[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(two[1].0, "C");
        assert!((two[1].1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(top_k_continuations(&m, &ctx, 1).len(), 1);
        assert!(top_k_continuations(&m, &["Q".to_string()], 3).is_empty());
    }

    #[test]
    fn deterministic_corpus_single_sample() {
        let seqs = vec![ActionSequence::from_interior(["A", "B"]); 3];
        let m = fit_ngram(&seqs, 3).unwrap();
        let out = sample_sequences(&m, &BeamConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].seq, seqs[0]);
        assert_eq!(out[0].log_prob, 0.0);
    }

    #[test]
    fn toy_both_branches() {
        let m = toy();
        let cfg = BeamConfig {
            top_k: 5,
            beam_cap: 10,
            ..BeamConfig::default()
        };
        let out = sample_sequences(&m, &cfg);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].seq.interior(), ["A", "B"]);
        assert!((out[0].log_prob - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert_eq!(out[1].seq.interior(), ["A", "C"]);
        assert!((out[1].log_prob - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        for s in &out {
            assert!((s.log_prob.exp() - sequence_prob(&m, &s.seq)).abs() < 1e-9);
        }
        let enumerated = enumerate_sequences(&m, 10);
        let sampled: BTreeSet<_> = out.iter().map(|s| s.seq.actions.clone()).collect();
        assert_eq!(sampled, enumerated);
    }

    #[test]
    fn greedy_follows_likely_branch() {
        let cfg = BeamConfig {
            top_k: 1,
            ..BeamConfig::default()
        };
        let out = sample_sequences(&toy(), &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].seq.interior(), ["A", "B"]);
    }

    #[test]
    fn caps_terminate_cycles() {
        // A can repeat forever under a bigram model
        let m = fit_ngram(
            &[
                ActionSequence::from_interior(["A", "A"]),
                ActionSequence::from_interior(["A"]),
            ],
            2,
        )
        .unwrap();
        let cfg = BeamConfig {
            max_len: 6,
            min_log_prob: f64::NEG_INFINITY,
            ..BeamConfig::default()
        };
        let out = sample_sequences(&m, &cfg);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|s| s.seq.interior().len() <= 6));
        let floor = sample_sequences(&m, &BeamConfig::default());
        assert!(floor.iter().all(|s| s.log_prob >= 1e-4f64.ln()));
        let capped = sample_sequences(
            &m,
            &BeamConfig {
                max_completed: 2,
                ..cfg
            },
        );
        assert_eq!(capped.len(), 2);
    }

    #[test]
    fn samples_io() {
        let out = sample_sequences(&toy(), &BeamConfig::default());
        let mut buf = Vec::new();
        write_samples(&mut buf, &out).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        assert_eq!(back, out);
    }
}
