//! One JSON object per line:
//! `{"id", "question", "passage_sentences": [..], "answers": [{"sent","start","end"}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, Span};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub question: String,
    pub passage_sentences: Vec<String>,
    pub answers: Vec<AnswerRecord>,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        ExampleRecord {
            id: ex.id.clone(),
            question: ex.question_text.clone(),
            passage_sentences: ex.passage_text.clone(),
            answers: ex
                .answers
                .iter()
                .map(|s| AnswerRecord {
                    sent: s.sent,
                    start: s.start,
                    end: s.end,
                })
                .collect(),
        }
    }
}

impl ExampleRecord {
    pub fn into_example(self) -> Result<Example> {
        let spans = self
            .answers
            .iter()
            .map(|a| Span::new(a.sent, a.start, a.end))
            .collect();
        Example::from_text(&self.id, &self.question, &self.passage_sentences, spans)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Require at least two answers per example.
    pub strict: bool,
}

/// Parse JSONL bytes. Blank lines are skipped; errors carry the 1-based line.
pub fn parse_jsonl(bytes: &[u8], opts: LoadOptions) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::validation(Some(line_no), "invalid UTF-8"))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::validation(Some(line_no), format!("malformed JSON: {e}")))?;
        let ex = rec.into_example()?;
        ex.validate(opts.strict).map_err(|e| match e {
            Error::Validation { msg, .. } => Error::validation(Some(line_no), msg),
            other => other,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, opts: LoadOptions) -> Result<Vec<Example>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&bytes, opts)
}

/// Canonical serialization: one compact object per line, trailing newline.
pub fn examples_to_jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(&ExampleRecord::from(ex)).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, examples_to_jsonl(examples)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"id":"a","question":"How to x?","passage_sentences":["Do x now.","Then y."],"answers":[{"sent":0,"start":0,"end":1},{"sent":1,"start":1,"end":1}]}
{"id":"b","question":"Why?","passage_sentences":["Because."],"answers":[]}
"#;

    #[test]
    fn parses_valid_file() {
        let exs = parse_jsonl(GOOD.as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(exs.len(), 2);
        assert_eq!(exs[0].passage[0], vec!["do", "x", "now", "."]);
        assert_eq!(exs[0].answers[1], Span::new(1, 1, 1));
    }

    #[test]
    fn canonical_round_trip() {
        let exs = parse_jsonl(GOOD.as_bytes(), LoadOptions::default()).unwrap();
        let canon = examples_to_jsonl(&exs);
        assert_eq!(canon, GOOD);
        let again = parse_jsonl(canon.as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(examples_to_jsonl(&again), canon);
    }

    #[test]
    fn errors_cite_line_numbers() {
        let bad_span = GOOD.replace(
            r#""sent":1,"start":1,"end":1"#,
            r#""sent":1,"start":1,"end":9"#,
        );
        let err = parse_jsonl(bad_span.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(
            matches!(err, Error::Validation { line: Some(1), .. }),
            "{err}"
        );

        let broken = format!("{GOOD}{{not json\n");
        let err = parse_jsonl(broken.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(
            matches!(err, Error::Validation { line: Some(3), .. }),
            "{err}"
        );

        let overlap = GOOD.replace(
            r#"{"sent":1,"start":1,"end":1}"#,
            r#"{"sent":0,"start":1,"end":2}"#,
        );
        let err = parse_jsonl(overlap.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let err = parse_jsonl(GOOD.as_bytes(), LoadOptions { strict: true }).unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(2), .. }));

        let err = parse_jsonl(b"\xff\n", LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(1), .. }));
    }
}
