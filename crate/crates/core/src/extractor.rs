//! Output heads, the joint loss, BIO decoding and F1 metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{linear, Init};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{BioLabels, Example, Span, Tag};

/// Probability above which a sentence counts as an answer sentence.
pub const SENTENCE_THRESHOLD: f64 = 0.5;

pub fn init_heads<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) -> Result<()> {
    init.linear(&crate::layers::join(prefix, "span"), d, 3)?;
    init.linear(&crate::layers::join(prefix, "sent"), d, 2)
}

/// Per-token softmax over `B, I, O`: `[n × 3]`.
pub fn span_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h_p: Var,
) -> Result<Var> {
    let logits = linear(g, store, &crate::layers::join(prefix, "span"), h_p)?;
    g.softmax_last_axis(logits)
}

/// Per-sentence 2-way softmax; column 1 is the answer probability. `[l_P × 2]`.
pub fn sentence_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    s_p: Var,
) -> Result<Var> {
    let logits = linear(g, store, &crate::layers::join(prefix, "sent"), s_p)?;
    g.softmax_last_axis(logits)
}

/// Scalar loss nodes of one example.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Mean token cross-entropy.
    pub span: Var,
    /// Mean sentence cross-entropy.
    pub sent: Var,
    /// `span + λ·sent`.
    pub total: Var,
}

/// `L = L_w + λ·L_s` with both terms mean negative log-likelihoods.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    tags: Var,
    sents: Var,
    gold: &BioLabels,
    lambda: T,
) -> Result<LossParts> {
    let (n, l) = (g.value(tags).rows(), g.value(sents).rows());
    if n != gold.tags.len() || l != gold.sentence_labels.len() {
        return Err(Error::contract(format!(
            "joint_loss: predictions cover {n} tokens / {l} sentences, gold has {} / {}",
            gold.tags.len(),
            gold.sentence_labels.len()
        )));
    }
    let span = g.nll(tags, &gold.tag_indices())?;
    let sent = g.nll(sents, &gold.sentence_indices())?;
    let weighted = g.scale(sent, lambda);
    let total = g.add(span, weighted)?;
    Ok(LossParts { span, sent, total })
}

/// Per-token `[B, I, O]` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TagDistribution {
    pub probs: Vec<[f64; 3]>,
}

impl TagDistribution {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if c != 3 {
            return Err(Error::dim("TagDistribution", t.shape(), &[r, 3]));
        }
        let probs = (0..r)
            .map(|i| {
                let row = t.row(i);
                [
                    row[0].to_f64_lossy(),
                    row[1].to_f64_lossy(),
                    row[2].to_f64_lossy(),
                ]
            })
            .collect();
        Ok(TagDistribution { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Argmax per token, ties going to B, then I, then O.
    pub fn argmax(&self) -> Vec<Tag> {
        self.probs
            .iter()
            .map(|p| {
                let mut best = Tag::B;
                for t in [Tag::I, Tag::O] {
                    if p[t.index()] > p[best.index()] {
                        best = t;
                    }
                }
                best
            })
            .collect()
    }
}

/// Per-sentence answer probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceScores {
    pub probs: Vec<f64>,
}

impl SentenceScores {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if c != 2 {
            return Err(Error::dim("SentenceScores", t.shape(), &[r, 2]));
        }
        Ok(SentenceScores {
            probs: (0..r).map(|i| t.at(i, 1).to_f64_lossy()).collect(),
        })
    }

    /// Indices with probability strictly above the threshold.
    pub fn selected(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > SENTENCE_THRESHOLD)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Decode a flat tag sequence into sentence-local spans. Within each sentence:
/// `B` opens a span, `I` extends the open span or opens one, `O` closes.
/// Sentence ends close any open span.
pub fn decode_tags(tags: &[Tag], sentence_lengths: &[usize]) -> Result<Vec<Span>> {
    let total: usize = sentence_lengths.iter().sum();
    if total != tags.len() {
        return Err(Error::contract(format!(
            "decode: {} tags for sentences totalling {total} tokens",
            tags.len()
        )));
    }
    let mut spans = Vec::new();
    let mut at = 0;
    for (sent, &len) in sentence_lengths.iter().enumerate() {
        let mut open: Option<usize> = None;
        for i in 0..len {
            match tags[at + i] {
                Tag::B => {
                    if let Some(s) = open.take() {
                        spans.push(Span::new(sent, s, i - 1));
                    }
                    open = Some(i);
                }
                Tag::I => {
                    open.get_or_insert(i);
                }
                Tag::O => {
                    if let Some(s) = open.take() {
                        spans.push(Span::new(sent, s, i - 1));
                    }
                }
            }
        }
        if let Some(s) = open {
            spans.push(Span::new(sent, s, len - 1));
        }
        at += len;
    }
    Ok(spans)
}

pub fn decode_bio(tags: &TagDistribution, sentence_lengths: &[usize]) -> Result<Vec<Span>> {
    decode_tags(&tags.argmax(), sentence_lengths)
}

/// One extracted span with its source text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Decoded prediction for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerList {
    pub spans: Vec<AnswerSpan>,
    pub answer_sentences: Vec<usize>,
}

impl AnswerList {
    pub fn new(example: &Example, spans: &[Span], answer_sentences: Vec<usize>) -> Self {
        AnswerList {
            spans: spans
                .iter()
                .map(|s| AnswerSpan {
                    sent: s.sent,
                    start: s.start,
                    end: s.end,
                    text: example.span_text(s),
                })
                .collect(),
            answer_sentences,
        }
    }

    /// Gold answers of an example, as a prediction would report them.
    pub fn gold(example: &Example) -> Self {
        Self::new(example, &example.answers, example.answer_sentences())
    }

    pub fn as_spans(&self) -> Vec<Span> {
        self.spans
            .iter()
            .map(|s| Span::new(s.sent, s.start, s.end))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty() && self.answer_sentences.is_empty()
    }

    /// Flat passage positions covered by the spans.
    pub fn token_positions(&self, example: &Example) -> BTreeSet<usize> {
        self.as_spans()
            .iter()
            .flat_map(|s| {
                let (a, b) = example.flat_range(s);
                a..=b
            })
            .collect()
    }
}

/// F1 of two index sets. Both empty scores 1; exactly one empty scores 0.
pub fn set_f1(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = pred.intersection(gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / pred.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Token-overlap F1 between predicted spans and the gold spans of `example`.
pub fn span_f1(pred: &AnswerList, example: &Example) -> f64 {
    let gold: BTreeSet<usize> = example.answer_token_positions().into_iter().collect();
    set_f1(&pred.token_positions(example), &gold)
}

/// Set F1 between predicted and gold answer-sentence indices.
pub fn sentence_f1(pred: &[usize], gold: &[usize]) -> f64 {
    set_f1(
        &pred.iter().copied().collect(),
        &gold.iter().copied().collect(),
    )
}

/// One line of prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub spans: Vec<AnswerSpan>,
    pub answer_sentences: Vec<usize>,
    pub span_f1: Option<f64>,
    pub sent_f1: Option<f64>,
}

impl PredictionRecord {
    /// Record for `answers`, scored against the example's gold when it has any.
    pub fn new(example: &Example, answers: AnswerList, score: bool) -> Self {
        let (span, sent) = if score {
            (
                Some(span_f1(&answers, example)),
                Some(sentence_f1(
                    &answers.answer_sentences,
                    &example.answer_sentences(),
                )),
            )
        } else {
            (None, None)
        };
        PredictionRecord {
            id: example.id.clone(),
            spans: answers.spans,
            answer_sentences: answers.answer_sentences,
            span_f1: span,
            sent_f1: sent,
        }
    }
}
