//! Brute-force reference implementations shared by the integration suites.
//! Each one recomputes a quantity straight from its definition without using
//! the library's data structures.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskflow_core::corpus::tokenize;
use taskflow_core::standardize::{ActionSequence, EOS, SOS};

pub fn seqs(raw: &[Vec<&str>]) -> Vec<ActionSequence> {
    raw.iter()
        .map(|s| ActionSequence::from_interior(s.iter().copied()))
        .collect()
}

/// Occurrences of `window` inside any one sequence.
pub fn count_windows(corpus: &[ActionSequence], window: &[String]) -> u64 {
    corpus
        .iter()
        .map(|s| {
            if s.actions.len() < window.len() {
                return 0;
            }
            s.actions.windows(window.len()).filter(|w| *w == window).count() as u64
        })
        .sum()
}

/// Occurrences of `context` that have a following symbol.
pub fn count_contexts(corpus: &[ActionSequence], context: &[String]) -> u64 {
    corpus
        .iter()
        .map(|s| {
            let a = &s.actions;
            (0..a.len())
                .filter(|&i| i + context.len() < a.len() && a[i..i + context.len()] == *context)
                .count() as u64
        })
        .sum()
}

/// `C(ctx ‖ next) / C(ctx)` on the longest suffix of `context` (at most
/// `order - 1` symbols) that occurs with a successor.
pub fn oracle_prob(corpus: &[ActionSequence], order: usize, context: &[String], next: &str) -> Ratio<u64> {
    let max = context.len().min(order - 1);
    for len in (1..=max).rev() {
        let ctx = &context[context.len() - len..];
        let c = count_contexts(corpus, ctx);
        if c > 0 {
            let mut w = ctx.to_vec();
            w.push(next.to_string());
            return Ratio::new(count_windows(corpus, &w), c);
        }
    }
    Ratio::from_integer(0)
}

pub fn oracle_seq_prob(corpus: &[ActionSequence], order: usize, seq: &[String]) -> Ratio<u64> {
    let mut p = Ratio::from_integer(1u64);
    for i in 1..seq.len() {
        let start = i.saturating_sub(order - 1);
        p *= oracle_prob(corpus, order, &seq[start..i], &seq[i]);
        if p == Ratio::from_integer(0) {
            break;
        }
    }
    p
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Every positive-probability `[SOS] … [EOS]` sequence with at most `max_len`
/// interior symbols, with its log probability.
pub fn oracle_enumerate(corpus: &[ActionSequence], order: usize, max_len: usize) -> BTreeMap<Vec<String>, f64> {
    let vocab: BTreeSet<String> = corpus
        .iter()
        .flat_map(|s| s.actions.iter().cloned())
        .filter(|a| a != SOS)
        .collect();
    let mut out = BTreeMap::new();
    let mut stack = vec![(vec![SOS.to_string()], 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let start = prefix.len().saturating_sub(order - 1);
        for a in &vocab {
            let p = oracle_prob(corpus, order, &prefix[start..], a);
            if *p.numer() == 0 {
                continue;
            }
            let mut next = prefix.clone();
            next.push(a.clone());
            let lp = lp + ratio_f64(p).ln();
            if a == EOS {
                out.insert(next, lp);
            } else if next.len() - 1 <= max_len {
                stack.push((next, lp));
            }
        }
    }
    out
}

/// Random corpus of `n_seqs` sequences over `vocab` action names.
pub fn random_corpus(rng: &mut ChaCha8Rng, n_seqs: usize, vocab: usize, max_len: usize) -> Vec<ActionSequence> {
    (0..n_seqs)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            ActionSequence::from_interior((0..len).map(|_| format!("a{}", rng.random_range(0..vocab))))
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// BM25 over `docs` exactly as written: idf = ln(1 + (D − df + 0.5)/(df + 0.5)),
/// distinct query terms, documents sharing at least one term, sorted by
/// descending score then id.
pub fn oracle_bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|(_, t)| tokenize(t).into_iter().map(|x| x.into_string()).collect())
        .collect();
    let d = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len() as f64).sum::<f64>() / d;
    let terms: BTreeSet<String> = tokenize(query).into_iter().map(|x| x.into_string()).collect();
    let mut out = Vec::new();
    for ((id, _), dt) in docs.iter().zip(&toks) {
        let mut score = 0.0;
        let mut hit = false;
        for t in &terms {
            let tf = dt.iter().filter(|x| *x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = toks.iter().filter(|x| x.contains(t)).count() as f64;
            let idf = (1.0 + (d - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dt.len() as f64 / avgdl));
        }
        if hit {
            out.push((id.clone(), score));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

/// TF-IDF cosine with smoothed idf ln((1 + D)/(1 + df)) + 1, tokens absent
/// from the fitted documents weighted as df = 0.
pub fn oracle_cosine(docs: &[String], x: &str, y: &str) -> f64 {
    let d = docs.len() as f64;
    let doc_toks: Vec<BTreeSet<String>> = docs
        .iter()
        .map(|t| tokenize(t).into_iter().map(|x| x.into_string()).collect())
        .collect();
    let weights = |text: &str| {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t.into_string()).or_default() += 1.0;
        }
        tf.into_iter()
            .map(|(t, n)| {
                let df = doc_toks.iter().filter(|s| s.contains(&t)).count() as f64;
                let idf = ((1.0 + d) / (1.0 + df)).ln() + 1.0;
                (t, n * idf)
            })
            .collect::<BTreeMap<_, _>>()
    };
    let wx = weights(x);
    let wy = weights(y);
    if wx.is_empty() || wy.is_empty() {
        return 0.0;
    }
    let dot: f64 = wx.iter().filter_map(|(t, a)| wy.get(t).map(|b| a * b)).sum();
    let nx: f64 = wx.values().map(|v| v * v).sum();
    let ny: f64 = wy.values().map(|v| v * v).sum();
    (dot / (nx * ny).sqrt()).clamp(0.0, 1.0)
}

/// Prints one acceptance line and fails the test when `ok` is false. The line
/// goes straight to stderr so the test harness does not capture it.
pub fn verdict(name: &str, ok: bool, detail: &str) {
    use std::io::Write;
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}
