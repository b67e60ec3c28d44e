//! Parameter value extraction: pattern-based mention spotting followed by
//! rule-based rewriting of each mention into a typed value.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::Value;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("parameter {0:?} has no patterns")]
    NoPatterns(String),
    #[error("pattern {pattern:?} of parameter {param:?} is invalid: {message}")]
    BadPattern {
        param: String,
        pattern: String,
        message: String,
    },
    #[error("pattern {pattern:?} of parameter {param:?} has no capture group {group}")]
    MissingGroup {
        param: String,
        pattern: String,
        group: usize,
    },
    #[error("cannot read {surface:?} as {ty:?} for parameter {param:?}")]
    Unparseable {
        param: String,
        surface: String,
        ty: ParamType,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    /// Seconds since the Unix epoch.
    Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPattern {
    pub name: String,
    pub pattern: String,
    /// Capture group holding the mention; 0 is the whole match.
    #[serde(default)]
    pub group: usize,
}

impl NamedPattern {
    pub fn new(name: &str, pattern: &str, group: usize) -> Self {
        Self {
            name: name.to_string(),
            pattern: pattern.to_string(),
            group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub patterns: Vec<NamedPattern>,
    /// Relative-time unit words and their length in seconds.
    #[serde(default = "default_units", skip_serializing_if = "is_default_units")]
    pub units: BTreeMap<String, i64>,
}

fn default_units() -> BTreeMap<String, i64> {
    [
        ("second", 1),
        ("seconds", 1),
        ("sec", 1),
        ("secs", 1),
        ("minute", 60),
        ("minutes", 60),
        ("min", 60),
        ("mins", 60),
        ("hour", 3600),
        ("hours", 3600),
        ("hr", 3600),
        ("hrs", 3600),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn is_default_units(units: &BTreeMap<String, i64>) -> bool {
    *units == default_units()
}

impl ParamDef {
    pub fn new(name: &str, ty: ParamType, patterns: Vec<NamedPattern>) -> Self {
        Self {
            name: name.to_string(),
            ty,
            patterns,
            units: default_units(),
        }
    }
}

/// The two parameters the after-sale scenarios need: a relative time and a
/// numeric user id. Time comes first so that "120 minutes ago" is never read
/// as an id.
pub fn default_param_defs() -> Vec<ParamDef> {
    vec![
        ParamDef::new(
            "time",
            ParamType::Timestamp,
            vec![
                NamedPattern::new(
                    "relative",
                    r"(?i)\b(\d+\s*(?:seconds?|secs?|minutes?|mins?|hours?|hrs?)\s+ago)\b",
                    1,
                ),
                NamedPattern::new("now", r"(?i)\b((?:just |right )?now)\b", 1),
            ],
        ),
        ParamDef::new(
            "user_id",
            ParamType::Integer,
            vec![
                NamedPattern::new("labeled", r"(?i)\b(?:user\s*id|id|account)\D{0,12}?(\d+)", 1),
                NamedPattern::new("digits", r"\b(\d{4,})\b", 1),
            ],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub param: String,
    pub surface: String,
    /// Character offsets, end exclusive.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamValue {
    pub param: String,
    pub value: Value,
}

/// Compiled parameter definitions.
#[derive(Debug, Clone)]
pub struct ParamExtractor {
    defs: Vec<ParamDef>,
    compiled: Vec<Vec<(Regex, usize)>>,
}

impl ParamExtractor {
    pub fn new(defs: Vec<ParamDef>) -> Result<Self, ExtractError> {
        let mut compiled = Vec::with_capacity(defs.len());
        for def in &defs {
            if def.patterns.is_empty() {
                return Err(ExtractError::NoPatterns(def.name.clone()));
            }
            let mut pats = Vec::new();
            for p in &def.patterns {
                let re = Regex::new(&p.pattern).map_err(|e| ExtractError::BadPattern {
                    param: def.name.clone(),
                    pattern: p.name.clone(),
                    message: e.to_string(),
                })?;
                if p.group >= re.captures_len() {
                    return Err(ExtractError::MissingGroup {
                        param: def.name.clone(),
                        pattern: p.name.clone(),
                        group: p.group,
                    });
                }
                pats.push((re, p.group));
            }
            compiled.push(pats);
        }
        Ok(Self { defs, compiled })
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn def(&self, name: &str) -> Option<&ParamDef> {
        self.defs.iter().find(|d| d.name == name)
    }

    /// At most one mention per definition: the leftmost match of its first
    /// pattern that matches anywhere, skipping spans already claimed by an
    /// earlier definition. Sorted by start offset.
    pub fn extract(&self, text: &str) -> Vec<Mention> {
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut out = Vec::new();
        for (def, pats) in self.defs.iter().zip(&self.compiled) {
            let found = pats.iter().find_map(|(re, group)| {
                re.captures_iter(text)
                    .filter_map(|c| c.get(*group))
                    .filter(|m| !m.is_empty())
                    .find(|m| claimed.iter().all(|&(s, e)| m.end() <= s || m.start() >= e))
            });
            if let Some(m) = found {
                claimed.push((m.start(), m.end()));
                out.push(Mention {
                    param: def.name.clone(),
                    surface: m.as_str().to_string(),
                    span: (char_offset(text, m.start()), char_offset(text, m.end())),
                });
            }
        }
        out.sort_by_key(|m| m.span);
        out
    }

    /// Extracts and normalizes, skipping mentions that fail to normalize.
    pub fn extract_values(&self, text: &str, now: i64) -> Vec<ParamValue> {
        self.extract(text)
            .iter()
            .filter_map(|m| {
                let def = self.def(&m.param)?;
                normalize_mention(m, def, now).ok()
            })
            .collect()
    }
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// The substring at a character span.
pub fn slice_chars(text: &str, span: (usize, usize)) -> String {
    text.chars().skip(span.0).take(span.1.saturating_sub(span.0)).collect()
}

pub fn extract_params(text: &str, defs: &[ParamDef]) -> Result<Vec<Mention>, ExtractError> {
    Ok(ParamExtractor::new(defs.to_vec())?.extract(text))
}

pub fn normalize_mention(m: &Mention, def: &ParamDef, now: i64) -> Result<ParamValue, ExtractError> {
    let surface = m.surface.trim();
    let unparseable = || ExtractError::Unparseable {
        param: def.name.clone(),
        surface: m.surface.clone(),
        ty: def.ty,
    };
    let value = match def.ty {
        ParamType::String => Value::Str(surface.to_string()),
        ParamType::Integer => Value::Int(parse_digits(surface).ok_or_else(unparseable)?),
        ParamType::Timestamp => Value::Int(parse_time(surface, &def.units, now).ok_or_else(unparseable)?),
    };
    Ok(ParamValue {
        param: def.name.clone(),
        value,
    })
}

fn parse_digits(s: &str) -> Option<i64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_time(s: &str, units: &BTreeMap<String, i64>, now: i64) -> Option<i64> {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    match words.as_slice() {
        ["now"] | ["just", "now"] | ["right", "now"] => Some(now),
        [n, unit, "ago"] => relative(n, unit, units, now),
        [nu, "ago"] => {
            let split = nu.find(|c: char| !c.is_ascii_digit())?;
            relative(&nu[..split], &nu[split..], units, now)
        }
        [epoch] => parse_digits(epoch),
        _ => None,
    }
}

fn relative(n: &str, unit: &str, units: &BTreeMap<String, i64>, now: i64) -> Option<i64> {
    let n = parse_digits(n)?;
    let secs = *units.get(unit)?;
    now.checked_sub(n.checked_mul(secs)?)
}
