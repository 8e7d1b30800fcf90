use serde::Serialize;

use super::Example;

/// Summary counts over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub mean_sentences: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub mean_passage_tokens: f64,
    pub mean_question_tokens: f64,
    /// Mean gold spans per question.
    pub mean_answer_spans: f64,
    /// Mean distinct sentences holding a gold span, per question.
    pub mean_answer_sentences: f64,
    pub min_answer_spans: usize,
}

pub fn corpus_stats(examples: &[Example]) -> CorpusStats {
    let n = examples.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Example) -> usize| examples.iter().map(f).sum::<usize>() as f64 / n;
    CorpusStats {
        examples: examples.len(),
        mean_sentences: mean(&|e| e.num_sentences()),
        min_sentences: examples
            .iter()
            .map(Example::num_sentences)
            .min()
            .unwrap_or(0),
        max_sentences: examples
            .iter()
            .map(Example::num_sentences)
            .max()
            .unwrap_or(0),
        mean_passage_tokens: mean(&|e| e.num_tokens()),
        mean_question_tokens: mean(&|e| e.question.len()),
        mean_answer_spans: mean(&|e| e.answers.len()),
        mean_answer_sentences: mean(&|e| e.answer_sentences().len()),
        min_answer_spans: examples.iter().map(|e| e.answers.len()).min().unwrap_or(0),
    }
}
