//! Dialogue logs: data model, line-delimited JSON I/O and tokenization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate utterance id {id:?}")]
    DuplicateUtterance { line: usize, id: String },
    #[error("line {line}: dialogue {dialogue:?} has turn {found} where {expected} was expected")]
    NonConsecutiveTurn {
        line: usize,
        dialogue: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: utterance {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: dialogue {dialogue:?} has {count} utterances, at least 2 required")]
    TooShort {
        line: usize,
        dialogue: String,
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Staff,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Staff => "staff",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub scenario: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    turn: usize,
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    scenario: String,
    utterances: Vec<UtteranceRecord>,
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    let file = File::open(path)?;
    read_dialogues(file)
}

/// Parses line-delimited dialogue records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn read_dialogues<R: Read>(reader: R) -> Result<Vec<Dialogue>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        out.push(validate_record(record, line_no, &mut seen)?);
    }
    Ok(out)
}

fn validate_record(
    record: DialogueRecord,
    line: usize,
    seen: &mut HashSet<String>,
) -> Result<Dialogue, CorpusError> {
    if record.utterances.len() < 2 {
        return Err(CorpusError::TooShort {
            line,
            dialogue: record.id,
            count: record.utterances.len(),
        });
    }
    let mut utterances = Vec::with_capacity(record.utterances.len());
    for (expected, u) in record.utterances.into_iter().enumerate() {
        if u.turn != expected {
            return Err(CorpusError::NonConsecutiveTurn {
                line,
                dialogue: record.id,
                expected,
                found: u.turn,
            });
        }
        if u.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { line, id: u.id });
        }
        if !seen.insert(u.id.clone()) {
            return Err(CorpusError::DuplicateUtterance { line, id: u.id });
        }
        utterances.push(Utterance {
            id: u.id,
            dialogue_id: record.id.clone(),
            turn_index: u.turn,
            speaker: u.speaker,
            text: u.text,
        });
    }
    Ok(Dialogue {
        id: record.id,
        scenario: record.scenario,
        utterances,
    })
}

pub fn write_dialogues<W: Write>(mut writer: W, dialogues: &[Dialogue]) -> std::io::Result<()> {
    for d in dialogues {
        let record = DialogueRecord {
            id: d.id.clone(),
            scenario: d.scenario.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    id: u.id.clone(),
                    turn: u.turn_index,
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> std::io::Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_dialogues(file, dialogues)
}

/// Utterance lookup by id.
#[derive(Debug, Clone, Default)]
pub struct UtteranceStore {
    by_id: BTreeMap<String, Utterance>,
}

impl UtteranceStore {
    pub fn from_dialogues(dialogues: &[Dialogue]) -> Self {
        let by_id = dialogues
            .iter()
            .flat_map(|d| d.utterances.iter())
            .map(|u| (u.id.clone(), u.clone()))
            .collect();
        Self { by_id }
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.by_id.get(id)
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(|u| u.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Utterances in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.by_id.values()
    }

    pub fn insert(&mut self, u: Utterance) {
        self.by_id.insert(u.id.clone(), u);
    }
}

/// Scripts written without spaces between words. Runs of these characters are
/// split into overlapping bigrams.
fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // ext B..F, supplement
}

/// Lowercased word tokens; overlapping character bigrams for CJK runs (a run
/// of a single CJK character yields that character). Everything that is not
/// alphanumeric is a separator.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut run: Vec<char> = Vec::new();

    fn flush_word(word: &mut String, tokens: &mut Vec<Token>) {
        if !word.is_empty() {
            tokens.push(Token(std::mem::take(word)));
        }
    }
    fn flush_run(run: &mut Vec<char>, tokens: &mut Vec<Token>) {
        match run.len() {
            0 => {}
            1 => tokens.push(Token(run[0].to_string())),
            _ => tokens.extend(run.windows(2).map(|w| Token(w.iter().collect()))),
        }
        run.clear();
    }

    for c in text.chars() {
        if is_cjk(c) {
            flush_word(&mut word, &mut tokens);
            run.push(c);
        } else if c.is_alphanumeric() {
            flush_run(&mut run, &mut tokens);
            word.extend(c.to_lowercase());
        } else {
            flush_word(&mut word, &mut tokens);
            flush_run(&mut run, &mut tokens);
        }
    }
    flush_word(&mut word, &mut tokens);
    flush_run(&mut run, &mut tokens);
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(Token::into_string).collect()
    }

    #[test]
    fn tokenize_words() {
        assert_eq!(toks("Lock the bike"), ["lock", "the", "bike"]);
        assert_eq!(toks(""), Vec::<String>::new());
        assert_eq!(toks("Hi!! user-id: 42."), ["hi", "user", "id", "42"]);
    }

    #[test]
    fn tokenize_cjk_bigrams() {
        assert_eq!(toks("锁车了"), ["锁车", "车了"]);
        assert_eq!(toks("车"), ["车"]);
        assert_eq!(toks("我的bike没锁"), ["我的", "bike", "没锁"]);
        assert_eq!(toks("你好，谢谢"), ["你好", "谢谢"]);
    }

    const TWO: &str = r#"{"id":"d1","scenario":"lock","utterances":[{"id":"u1","turn":0,"speaker":"user","text":"forgot to lock"},{"id":"u2","turn":1,"speaker":"staff","text":"I will lock it"}]}"#;

    #[test]
    fn load_smallest_valid_file() {
        let ds = read_dialogues(TWO.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].utterances.len(), 2);
        assert_eq!(ds[0].utterances[1].speaker, Speaker::Staff);
        assert_eq!(ds[0].utterances[1].dialogue_id, "d1");
    }

    #[test]
    fn load_empty_file() {
        assert!(read_dialogues("".as_bytes()).unwrap().is_empty());
        assert!(read_dialogues("\n  \n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn missing_speaker_names_line() {
        let bad = r#"{"id":"d2","scenario":"s","utterances":[{"id":"x1","turn":0,"text":"a"},{"id":"x2","turn":1,"speaker":"user","text":"b"}]}"#;
        let input = format!("{TWO}\n{bad}\n");
        match read_dialogues(input.as_bytes()) {
            Err(CorpusError::Malformed { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("speaker"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_turn_gaps_rejected() {
        let dup = TWO.replace("\"d1\"", "\"d9\"");
        let input = format!("{TWO}\n{dup}");
        assert!(matches!(
            read_dialogues(input.as_bytes()),
            Err(CorpusError::DuplicateUtterance { line: 2, .. })
        ));

        let gap = TWO.replace("\"turn\":1", "\"turn\":2");
        assert!(matches!(
            read_dialogues(gap.as_bytes()),
            Err(CorpusError::NonConsecutiveTurn { expected: 1, found: 2, .. })
        ));

        let blank = TWO.replace("forgot to lock", "   ");
        assert!(matches!(
            read_dialogues(blank.as_bytes()),
            Err(CorpusError::EmptyText { .. })
        ));
    }
}
