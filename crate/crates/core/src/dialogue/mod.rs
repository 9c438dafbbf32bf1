//! Conversation data model, dataset files and statistics.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::word_count;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One user question with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_ids: Option<Vec<String>>,
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            rewrite: None,
            relevant_ids: None,
        }
    }

    pub fn with_rewrite(mut self, rewrite: impl Into<String>) -> Self {
        self.rewrite = Some(rewrite.into());
        self
    }

    pub fn with_relevant<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.relevant_ids = Some(ids.into_iter().map(Into::into).collect());
        self
    }

    pub fn relevant_set(&self) -> BTreeSet<String> {
        self.relevant_ids.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Turns strictly before `turn_index`.
    pub fn history(&self, turn_index: usize) -> &[Turn] {
        &self.turns[..turn_index.min(self.turns.len())]
    }
}

fn required_str<'a>(obj: &'a Value, field: &str, line: usize) -> Result<&'a str, DatasetError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(DatasetError::MissingField {
            line,
            field: field.to_owned(),
        }),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(DatasetError::Invalid {
            line,
            message: format!("field `{field}` must be a string"),
        }),
    }
}

fn optional_str(obj: &Value, field: &str, line: usize) -> Result<Option<String>, DatasetError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(DatasetError::Invalid {
            line,
            message: format!("field `{field}` must be a string"),
        }),
    }
}

fn parse_record(text: &str, line: usize) -> Result<Conversation, DatasetError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DatasetError::Malformed {
        line,
        message: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(DatasetError::Malformed {
            line,
            message: "expected a JSON object".into(),
        });
    }
    let id = required_str(&value, "id", line)?.to_owned();
    let turns_value = value.get("turns").ok_or_else(|| DatasetError::MissingField {
        line,
        field: "turns".into(),
    })?;
    let Value::Array(items) = turns_value else {
        return Err(DatasetError::Invalid {
            line,
            message: "field `turns` must be an array".into(),
        });
    };
    if items.is_empty() {
        return Err(DatasetError::Invalid {
            line,
            message: "conversation has no turns".into(),
        });
    }
    let mut turns = Vec::with_capacity(items.len());
    for item in items {
        let question = required_str(item, "question", line)?;
        if question.trim().is_empty() {
            return Err(DatasetError::Invalid {
                line,
                message: "empty `question`".into(),
            });
        }
        let answer = required_str(item, "answer", line)?;
        let rewrite = optional_str(item, "rewrite", line)?;
        if rewrite.as_deref().is_some_and(|r| r.trim().is_empty()) {
            return Err(DatasetError::Invalid {
                line,
                message: "empty `rewrite`".into(),
            });
        }
        let relevant_ids = match item.get("relevant_ids") {
            None | Some(Value::Null) => None,
            Some(Value::Array(ids)) => Some(
                ids.iter()
                    .map(|v| {
                        v.as_str().map(str::to_owned).ok_or_else(|| DatasetError::Invalid {
                            line,
                            message: "`relevant_ids` must contain strings".into(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            Some(_) => {
                return Err(DatasetError::Invalid {
                    line,
                    message: "field `relevant_ids` must be an array".into(),
                })
            }
        };
        turns.push(Turn {
            question: question.to_owned(),
            answer: answer.to_owned(),
            rewrite,
            relevant_ids,
        });
    }
    Ok(Conversation { id, turns })
}

/// Read one conversation per line, preserving file order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Conversation>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in conversations {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub conversations: usize,
    pub turns: usize,
    pub mean_answer_words: f64,
    pub turns_with_rewrite: usize,
}

pub fn dataset_stats(conversations: &[Conversation]) -> DatasetStats {
    let turns: usize = conversations.iter().map(|c| c.turns.len()).sum();
    let words: usize = conversations
        .iter()
        .flat_map(|c| &c.turns)
        .map(|t| word_count(&t.answer))
        .sum();
    let turns_with_rewrite = conversations
        .iter()
        .flat_map(|c| &c.turns)
        .filter(|t| t.rewrite.is_some())
        .count();
    DatasetStats {
        conversations: conversations.len(),
        turns,
        mean_answer_words: if turns == 0 { 0.0 } else { words as f64 / turns as f64 },
        turns_with_rewrite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_in_order_with_absent_optionals() {
        let f = write_lines(&[
            r#"{"id":"a","turns":[{"question":"q1","answer":"a1","rewrite":"r1","relevant_ids":["p1"]},{"question":"q2","answer":"a2"},{"question":"q3","answer":"a3"}]}"#,
            r#"{"id":"b","turns":[{"question":"q1","answer":"a1"},{"question":"q2","answer":"a2"},{"question":"q3","answer":""}]}"#,
        ]);
        let data = load_dataset(f.path()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].id, "a");
        assert_eq!(data[1].turns.len(), 3);
        assert_eq!(data[0].turns[0].rewrite.as_deref(), Some("r1"));
        assert_eq!(data[0].turns[1].rewrite, None);
        assert_eq!(data[0].turns[1].relevant_ids, None);
        assert_eq!(data[0].history(2).len(), 2);
    }

    #[test]
    fn missing_question_names_field_and_line() {
        let f = write_lines(&[
            r#"{"id":"a","turns":[{"question":"q","answer":"a"}]}"#,
            r#"{"id":"b","turns":[{"answer":"a"}]}"#,
        ]);
        match load_dataset(f.path()) {
            Err(DatasetError::MissingField { line, field }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "question");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_lines(&[r#"{"id":"a","turns":[{"question":"q","answer":"a"}]}"#, "{oops"]);
        assert!(matches!(
            load_dataset(f.path()),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
        let f = write_lines(&[r#"{"id":"a","turns":[{"question":"q","answer":"a","rewrite":" "}]}"#]);
        assert!(matches!(
            load_dataset(f.path()),
            Err(DatasetError::Invalid { line: 1, .. })
        ));
        let f = write_lines(&[r#"{"id":"a","turns":[]}"#]);
        assert!(matches!(load_dataset(f.path()), Err(DatasetError::Invalid { .. })));
    }

    #[test]
    fn stats_arithmetic() {
        let conv = Conversation {
            id: "c".into(),
            turns: vec![
                Turn::new("q", "one two three four"),
                Turn::new("q", "one two three four five six"),
            ],
        };
        let s = dataset_stats(std::slice::from_ref(&conv));
        assert_eq!(s.conversations, 1);
        assert_eq!(s.turns, 2);
        assert_eq!(s.mean_answer_words, 5.0);

        let empty_answer = Conversation {
            id: "e".into(),
            turns: vec![Turn::new("q", ""), Turn::new("q", "a b")],
        };
        assert_eq!(dataset_stats(&[empty_answer]).mean_answer_words, 1.0);
    }
}
