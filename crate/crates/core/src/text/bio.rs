use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

/// BIO tag. The discriminant is the class index used by the span head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    B = 0,
    I = 1,
    O = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::B, Tag::I, Tag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }
}

/// Gold targets: one tag per flattened passage token and one binary label
/// per sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioLabels {
    pub tags: Vec<Tag>,
    pub sentence_labels: Vec<bool>,
}

impl BioLabels {
    pub fn tag_indices(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }

    pub fn sentence_indices(&self) -> Vec<usize> {
        self.sentence_labels
            .iter()
            .map(|&b| usize::from(b))
            .collect()
    }
}

/// Tag each span's first token `B` and the rest `I`; everything else is `O`.
pub fn spans_to_bio(example: &Example) -> Result<BioLabels> {
    let n = example.num_tokens();
    let mut tags = vec![Tag::O; n];
    let mut sentence_labels = vec![false; example.num_sentences()];
    let offsets = example.sentence_offsets();
    for s in &example.answers {
        if s.sent >= offsets.len() || s.start > s.end || s.end >= example.passage[s.sent].len() {
            return Err(Error::validation(None, format!("span {s:?} out of range")));
        }
        let (a, b) = (offsets[s.sent] + s.start, offsets[s.sent] + s.end);
        if tags[a..=b].iter().any(|&t| t != Tag::O) {
            return Err(Error::validation(None, format!("overlapping span {s:?}")));
        }
        tags[a] = Tag::B;
        tags[a + 1..=b].iter_mut().for_each(|t| *t = Tag::I);
        sentence_labels[s.sent] = true;
    }
    Ok(BioLabels {
        tags,
        sentence_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Span;
    use Tag::*;

    fn five(answers: Vec<Span>) -> Example {
        Example::from_text("t", "q", &["a b c d e".into()], answers).unwrap()
    }

    #[test]
    fn definitional_cases() {
        assert_eq!(
            spans_to_bio(&five(vec![Span::new(0, 1, 2)])).unwrap().tags,
            vec![O, B, I, O, O]
        );
        let two = spans_to_bio(&five(vec![Span::new(0, 0, 0), Span::new(0, 3, 4)])).unwrap();
        assert_eq!(two.tags, vec![B, O, O, B, I]);
        assert_eq!(two.sentence_labels, vec![true]);
    }

    #[test]
    fn overlap_is_validation_error() {
        let err = spans_to_bio(&five(vec![Span::new(0, 0, 2), Span::new(0, 2, 3)])).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn sentence_labels_follow_spans() {
        let ex = Example::from_text(
            "t",
            "q",
            &["a b".into(), "c".into(), "d e".into()],
            vec![Span::new(2, 1, 1)],
        )
        .unwrap();
        let l = spans_to_bio(&ex).unwrap();
        assert_eq!(l.sentence_labels, vec![false, false, true]);
        assert_eq!(l.tags.len(), 5);
    }
}
