use serde::{Deserialize, Serialize};

use super::tokenize::{split_sentences, tokenize, tokenize_with_offsets};
use crate::error::{Error, Result};

/// Answer span inside one passage sentence; token offsets are local to the
/// sentence and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(sent: usize, start: usize, end: usize) -> Self {
        Span { sent, start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One question/passage pair with its gold answer spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub question_text: String,
    pub question: Vec<String>,
    pub passage_text: Vec<String>,
    pub passage: Vec<Vec<String>>,
    pub answers: Vec<Span>,
}

impl Example {
    /// Tokenize raw question and sentence strings. Spans are not validated.
    pub fn from_text(
        id: &str,
        question: &str,
        sentences: &[String],
        answers: Vec<Span>,
    ) -> Result<Self> {
        Ok(Example {
            id: id.to_string(),
            question_text: question.to_string(),
            question: tokenize(question),
            passage_text: sentences.to_vec(),
            passage: sentences.iter().map(|s| tokenize(s)).collect(),
            answers,
        })
    }

    /// Unlabeled example from a question and a block of running text, split
    /// into sentences at terminal punctuation.
    pub fn from_running_text(id: &str, question: &str, passage: &str) -> Self {
        let sents = split_sentences(passage);
        Example {
            id: id.to_string(),
            question_text: question.to_string(),
            question: tokenize(question),
            passage_text: sents.iter().map(|s| s.text.clone()).collect(),
            passage: sents
                .iter()
                .map(|s| s.tokens.iter().map(|t| t.text.clone()).collect())
                .collect(),
            answers: Vec::new(),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.passage.len()
    }

    /// Total passage tokens `n`.
    pub fn num_tokens(&self) -> usize {
        self.passage.iter().map(Vec::len).sum()
    }

    pub fn sentence_lengths(&self) -> Vec<usize> {
        self.passage.iter().map(Vec::len).collect()
    }

    /// Start of each sentence in the flattened passage.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        self.passage
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.len();
                Some(o)
            })
            .collect()
    }

    /// Question split into sentences at terminal punctuation; lengths only.
    pub fn question_sentence_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = 0;
        for t in &self.question {
            cur += 1;
            if matches!(t.as_str(), "." | "!" | "?") {
                out.push(cur);
                cur = 0;
            }
        }
        if cur > 0 {
            out.push(cur);
        }
        out
    }

    /// Flattened `[start, end]` of a span.
    pub fn flat_range(&self, span: &Span) -> (usize, usize) {
        let off = self.sentence_offsets()[span.sent];
        (off + span.start, off + span.end)
    }

    /// Flattened positions of all gold answer tokens.
    pub fn answer_token_positions(&self) -> Vec<usize> {
        let offsets = self.sentence_offsets();
        let mut out: Vec<usize> = self
            .answers
            .iter()
            .flat_map(|s| (offsets[s.sent] + s.start)..=(offsets[s.sent] + s.end))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Indices of sentences containing at least one gold span.
    pub fn answer_sentences(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.answers.iter().map(|a| a.sent).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Surface text of a span: the exact source slice when the sentence text
    /// tokenizes to the stored tokens, else the tokens joined by spaces.
    pub fn span_text(&self, span: &Span) -> String {
        let raw = &self.passage_text[span.sent];
        let toks = tokenize_with_offsets(raw);
        if toks.len() == self.passage[span.sent].len() && span.end < toks.len() {
            raw[toks[span.start].start..toks[span.end].end].to_string()
        } else {
            self.passage[span.sent][span.start..=span.end].join(" ")
        }
    }

    /// Check structural invariants. With `strict`, at least two answers are required.
    pub fn validate(&self, strict: bool) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::validation(
                None,
                format!("example `{}`: {msg}", self.id),
            ))
        };
        if self.question.is_empty() {
            return bad("empty question".into());
        }
        if self.passage.is_empty() {
            return bad("passage has no sentences".into());
        }
        if let Some(k) = self.passage.iter().position(Vec::is_empty) {
            return bad(format!("sentence {k} has no tokens"));
        }
        for s in &self.answers {
            if s.sent >= self.passage.len() {
                return bad(format!("span {s:?} refers to missing sentence"));
            }
            if s.start > s.end || s.end >= self.passage[s.sent].len() {
                return bad(format!(
                    "span {s:?} out of range for sentence of length {}",
                    self.passage[s.sent].len()
                ));
            }
        }
        let mut ranges: Vec<(usize, usize)> =
            self.answers.iter().map(|s| self.flat_range(s)).collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return bad(format!(
                    "overlapping spans at flat positions {:?} and {:?}",
                    w[0], w[1]
                ));
            }
            if w[1].0 == w[0].1 + 1 {
                return bad(format!(
                    "contiguous spans at flat positions {:?} and {:?}",
                    w[0], w[1]
                ));
            }
        }
        if strict && self.answers.len() < 2 {
            return bad(format!(
                "strict example needs at least 2 answers, has {}",
                self.answers.len()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(answers: Vec<Span>) -> Example {
        Example::from_text(
            "e1",
            "How to remove rusted screws?",
            &[
                "Soak the screw.".into(),
                "Apply cola to it.".into(),
                "Hit it.".into(),
            ],
            answers,
        )
        .unwrap()
    }

    #[test]
    fn geometry() {
        let ex = sample(vec![Span::new(0, 0, 2), Span::new(2, 0, 1)]);
        assert_eq!(ex.sentence_lengths(), vec![4, 5, 3]);
        assert_eq!(ex.sentence_offsets(), vec![0, 4, 9]);
        assert_eq!(ex.num_tokens(), 12);
        assert_eq!(ex.flat_range(&ex.answers[1]), (9, 10));
        assert_eq!(ex.answer_sentences(), vec![0, 2]);
        assert_eq!(ex.question_sentence_lengths(), vec![6]);
        assert_eq!(ex.span_text(&ex.answers[0]), "Soak the screw");
        ex.validate(true).unwrap();
    }

    #[test]
    fn validation_failures() {
        assert!(sample(vec![Span::new(0, 0, 4)]).validate(false).is_err());
        assert!(sample(vec![Span::new(3, 0, 0)]).validate(false).is_err());
        assert!(sample(vec![Span::new(1, 0, 2), Span::new(1, 2, 3)])
            .validate(false)
            .is_err());
        // last token of sentence 0 touches first token of sentence 1
        assert!(sample(vec![Span::new(0, 2, 3), Span::new(1, 0, 1)])
            .validate(false)
            .is_err());
        assert!(sample(vec![Span::new(0, 0, 1)]).validate(true).is_err());
        sample(vec![Span::new(0, 0, 1)]).validate(false).unwrap();
    }

    #[test]
    fn running_text_split() {
        let ex = Example::from_running_text("p", "why?", "One two. Three four!");
        assert_eq!(ex.passage_text, vec!["One two.", "Three four!"]);
        assert_eq!(ex.passage[1], vec!["three", "four", "!"]);
    }
}
