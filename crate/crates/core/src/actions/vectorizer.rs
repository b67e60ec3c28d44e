//! TF-IDF features for utterances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ActionError;
use crate::corpus::tokenize;
use crate::num::Real;

/// Sparse vector with dense semantics: `entries` are `(column, value)` pairs
/// in ascending column order, absent columns are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector<F> {
    dim: usize,
    entries: Vec<(u32, F)>,
}

impl<F: Real> EmbeddingVector<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn from_dense(values: &[F]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Self {
            dim: values.len(),
            entries,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, F)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Vec<F> {
        let mut out = vec![F::zero(); self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }

    pub fn norm_sq(&self) -> F {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> F {
        let (mut i, mut j) = (0, 0);
        let mut acc = F::zero();
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc = acc + a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn dot_dense(&self, dense: &[F]) -> F {
        self.entries
            .iter()
            .fold(F::zero(), |acc, &(i, v)| acc + v * dense[i as usize])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vectorizer<F> {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<F>,
    doc_count: usize,
}

/// Fits TF-IDF weights with `idf(t) = ln((1 + D) / (1 + df(t))) + 1`.
/// Columns are assigned in lexicographic token order.
pub fn fit_vectorizer<F: Real, S: AsRef<str>>(texts: &[S]) -> Result<Vectorizer<F>, ActionError> {
    if texts.is_empty() {
        return Err(ActionError::EmptyInput);
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        let mut toks: Vec<String> = tokenize(text.as_ref())
            .into_iter()
            .map(|t| t.into_string())
            .collect();
        toks.sort_unstable();
        toks.dedup();
        for t in toks {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(ActionError::EmptyVocabulary);
    }
    let d = texts.len();
    let mut vocabulary = BTreeMap::new();
    let mut idf = Vec::with_capacity(df.len());
    for (i, (tok, count)) in df.into_iter().enumerate() {
        vocabulary.insert(tok, i);
        idf.push(idf_weight(d, count));
    }
    Ok(Vectorizer {
        vocabulary,
        idf,
        doc_count: d,
    })
}

fn idf_weight<F: Real>(doc_count: usize, df: usize) -> F {
    let ratio = (1.0 + doc_count as f64) / (1.0 + df as f64);
    F::from_f64_lossy(ratio.ln() + 1.0)
}

impl<F: Real> Vectorizer<F> {
    pub fn dimension(&self) -> usize {
        self.idf.len()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn column(&self, token: &str) -> Option<usize> {
        self.vocabulary.get(token).copied()
    }

    pub fn idf(&self, token: &str) -> Option<F> {
        self.column(token).map(|c| self.idf[c])
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = (&str, usize)> {
        self.vocabulary.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// L2-normalized TF-IDF vector. Out-of-vocabulary tokens are ignored; a
    /// text without known tokens maps to the zero vector.
    pub fn embed(&self, text: &str) -> EmbeddingVector<F> {
        let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(c) = self.column(tok.as_str()) {
                *tf.entry(c).or_default() += 1;
            }
        }
        let mut entries: Vec<(u32, F)> = tf
            .into_iter()
            .map(|(c, n)| (c as u32, F::from_usize_lossy(n) * self.idf[c]))
            .collect();
        let norm = entries.iter().map(|&(_, v)| v * v).sum::<F>().sqrt();
        if norm > F::zero() {
            for e in &mut entries {
                e.1 = e.1 / norm;
            }
        }
        EmbeddingVector {
            dim: self.dimension(),
            entries,
        }
    }

    /// Weighted term map of a text. Tokens outside the vocabulary get the
    /// weight of a term seen in no document, so they still count against the
    /// match.
    fn weights(&self, text: &str) -> BTreeMap<String, F> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for tok in tokenize(text) {
            *tf.entry(tok.into_string()).or_default() += 1;
        }
        let unseen = idf_weight::<F>(self.doc_count, 0);
        tf.into_iter()
            .map(|(tok, n)| {
                let idf = self.idf(&tok).unwrap_or(unseen);
                (tok, F::from_usize_lossy(n) * idf)
            })
            .collect()
    }

    /// Cosine similarity of the TF-IDF vectors of two texts, in `[0, 1]`.
    /// Symmetric, and exactly 1 for identical texts with at least one token.
    pub fn cosine(&self, x: &str, y: &str) -> F {
        let wx = self.weights(x);
        let wy = self.weights(y);
        if wx.is_empty() || wy.is_empty() {
            return F::zero();
        }
        // shared terms are visited in token order from either side
        let dot: F = wx
            .iter()
            .filter_map(|(t, &a)| wy.get(t).map(|&b| a * b))
            .sum();
        let nx: F = wx.values().map(|&v| v * v).sum();
        let ny: F = wy.values().map(|&v| v * v).sum();
        let cos = dot / (nx * ny).sqrt();
        cos.max(F::zero()).min(F::one())
    }
}
