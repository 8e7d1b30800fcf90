//! Tokenization, vocabulary, QA examples, TF-IDF, BIO labels, the JSONL
//! dataset format and the synthetic corpus generator.

mod bio;
mod example;
mod jsonl;
mod stats;
mod synth;
mod tfidf;
mod tokenize;
mod vocab;

pub use bio::{spans_to_bio, BioLabels, Tag};
pub use example::{Example, Span};
pub use jsonl::{
    examples_to_jsonl, load_jsonl, parse_jsonl, write_jsonl, AnswerRecord, ExampleRecord,
    LoadOptions,
};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{generate_synthetic, SynthConfig, SynthMode};
pub use tfidf::{compute_tfidf, TfIdf};
pub use tokenize::{split_sentences, tokenize, tokenize_with_offsets, RawSentence, Token};
pub use vocab::{build_vocab, Vocab, CLS, CLS_ID, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};
