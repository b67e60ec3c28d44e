//! Maximum-likelihood n-gram model over action sequences.
//!
//! `P(a_i | context) = C(context ‖ a_i) / C(context)` where the context is
//! the preceding `N - 1` symbols, cut short at `[SOS]` near the start of a
//! sequence. No smoothing: anything unseen has probability zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Probability;
use crate::standardize::{ActionSequence, EOS, SOS};

pub const DEFAULT_ORDER: usize = 4;

/// Separator for count-table keys in the persisted model.
pub const KEY_SEPARATOR: char = '␟';

#[derive(Debug, Error)]
pub enum NGramError {
    #[error("no sequences to fit")]
    EmptyInput,
    #[error("order must be at least 2, got {0}")]
    OrderTooSmall(usize),
    #[error("sequence {index}: {message}")]
    InvalidSequence { index: usize, message: String },
    #[error("inconsistent count table: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramModel {
    order: usize,
    context_counts: BTreeMap<Vec<String>, u64>,
    continuation_counts: BTreeMap<Vec<String>, BTreeMap<String, u64>>,
    vocabulary: BTreeSet<String>,
}

pub fn fit_ngram(sequences: &[ActionSequence], order: usize) -> Result<NGramModel, NGramError> {
    if order < 2 {
        return Err(NGramError::OrderTooSmall(order));
    }
    if sequences.is_empty() {
        return Err(NGramError::EmptyInput);
    }
    let mut model = NGramModel {
        order,
        context_counts: BTreeMap::new(),
        continuation_counts: BTreeMap::new(),
        vocabulary: BTreeSet::new(),
    };
    for (index, seq) in sequences.iter().enumerate() {
        seq.validate().map_err(|e| NGramError::InvalidSequence {
            index,
            message: e.to_string(),
        })?;
        let a = &seq.actions;
        model.vocabulary.extend(a.iter().cloned());
        for i in 1..a.len() {
            let longest = (order - 1).min(i);
            for len in 1..=longest {
                let ctx = a[i - len..i].to_vec();
                *model
                    .continuation_counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(a[i].clone())
                    .or_default() += 1;
                *model.context_counts.entry(ctx).or_default() += 1;
            }
        }
    }
    Ok(model)
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn context_count(&self, context: &[String]) -> u64 {
        self.context_counts.get(context).copied().unwrap_or(0)
    }

    pub fn continuation_count(&self, context: &[String], next: &str) -> u64 {
        self.continuation_counts
            .get(context)
            .and_then(|m| m.get(next))
            .copied()
            .unwrap_or(0)
    }

    /// Stored contexts with their counts, in key order.
    pub fn contexts(&self) -> impl Iterator<Item = (&[String], u64)> {
        self.context_counts.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Observed continuations of an exact stored context.
    pub fn continuations(&self, context: &[String]) -> impl Iterator<Item = (&str, u64)> {
        self.continuation_counts
            .get(context)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, &v)| (k.as_str(), v)))
    }

    /// Longest suffix of `context`, at most `N - 1` symbols, that was observed
    /// as a context.
    pub fn longest_stored_suffix<'a>(&self, context: &'a [String]) -> Option<&'a [String]> {
        let max = context.len().min(self.order - 1);
        (1..=max)
            .rev()
            .map(|len| &context[context.len() - len..])
            .find(|s| self.context_counts.contains_key(*s))
    }

    pub fn prob<P: Probability>(&self, context: &[String], next: &str) -> P {
        match self.longest_stored_suffix(context) {
            None => P::zero(),
            Some(ctx) => {
                let c = self.continuation_count(ctx, next);
                if c == 0 {
                    P::zero()
                } else {
                    P::from_counts(c, self.context_count(ctx))
                }
            }
        }
    }

    /// Chain-rule product over every position after `[SOS]`, `[EOS]`
    /// included.
    pub fn sequence_prob_as<P: Probability>(&self, seq: &ActionSequence) -> P {
        let a = &seq.actions;
        let mut p = P::one();
        for i in 1..a.len() {
            let start = i.saturating_sub(self.order - 1);
            let factor: P = self.prob(&a[start..i], &a[i]);
            if factor.is_zero() {
                return P::zero();
            }
            p = p * factor;
        }
        p
    }

    /// Sum of log conditionals; `-inf` when any factor is zero.
    pub fn sequence_log_prob(&self, seq: &ActionSequence) -> f64 {
        let a = &seq.actions;
        let mut lp = 0.0;
        for i in 1..a.len() {
            let start = i.saturating_sub(self.order - 1);
            let p: f64 = self.prob(&a[start..i], &a[i]);
            if p == 0.0 {
                return f64::NEG_INFINITY;
            }
            lp += p.ln();
        }
        lp
    }

    fn check(&self) -> Result<(), NGramError> {
        for (ctx, &count) in &self.context_counts {
            let sum: u64 = self.continuations(ctx).map(|(_, c)| c).sum();
            if sum != count || count == 0 {
                return Err(NGramError::Inconsistent(format!(
                    "context {ctx:?} counted {count}, continuations sum to {sum}"
                )));
            }
        }
        if self.continuation_counts.len() != self.context_counts.len() {
            return Err(NGramError::Inconsistent(
                "continuation table has contexts without counts".into(),
            ));
        }
        Ok(())
    }
}

pub fn ngram_prob(model: &NGramModel, context: &[String], next: &str) -> f64 {
    model.prob(context, next)
}

pub fn sequence_prob(model: &NGramModel, seq: &ActionSequence) -> f64 {
    model.sequence_prob_as(seq)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    context_counts: BTreeMap<String, u64>,
    continuation_counts: BTreeMap<String, u64>,
}

fn join(parts: &[String]) -> String {
    let mut s = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            s.push(KEY_SEPARATOR);
        }
        s.push_str(p);
    }
    s
}

fn split(key: &str) -> Vec<String> {
    key.split(KEY_SEPARATOR).map(str::to_string).collect()
}

impl NGramModel {
    pub fn to_json(&self) -> Result<String, NGramError> {
        let file = ModelFile {
            order: self.order,
            context_counts: self
                .context_counts
                .iter()
                .map(|(k, &v)| (join(k), v))
                .collect(),
            continuation_counts: self
                .continuation_counts
                .iter()
                .flat_map(|(ctx, m)| {
                    m.iter().map(move |(next, &v)| {
                        let mut key = ctx.clone();
                        key.push(next.clone());
                        (join(&key), v)
                    })
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str) -> Result<Self, NGramError> {
        let file: ModelFile = serde_json::from_str(raw)?;
        if file.order < 2 {
            return Err(NGramError::OrderTooSmall(file.order));
        }
        let mut model = NGramModel {
            order: file.order,
            context_counts: BTreeMap::new(),
            continuation_counts: BTreeMap::new(),
            vocabulary: BTreeSet::new(),
        };
        for (k, v) in file.context_counts {
            let ctx = split(&k);
            model.vocabulary.extend(ctx.iter().cloned());
            model.context_counts.insert(ctx, v);
        }
        for (k, v) in file.continuation_counts {
            let mut key = split(&k);
            let next = key.pop().filter(|_| !key.is_empty()).ok_or_else(|| {
                NGramError::Inconsistent(format!("continuation key {k:?} has no context"))
            })?;
            model.vocabulary.insert(next.clone());
            model
                .continuation_counts
                .entry(key)
                .or_default()
                .insert(next, v);
        }
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NGramError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NGramError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `true` for the bracketing symbols.
pub fn is_boundary(symbol: &str) -> bool {
    symbol == SOS || symbol == EOS
}
