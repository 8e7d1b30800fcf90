//! Deterministic synthetic corpus for list-form extraction.
//!
//! Every passage is a handful of short sentences built from pseudo-words. In
//! keyword mode each answer sentence contains a content word of the question.
//! In relational mode only some answers do; the rest are tied to one of those
//! by a private bridge word and share nothing with the question. Optionally,
//! distractor sentences are tied in pairs the same way, so a shared word by
//! itself is not evidence of an answer.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Span};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Keyword,
    Relational,
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyword" => Ok(SynthMode::Keyword),
            "relational" => Ok(SynthMode::Relational),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected keyword|relational)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub count: usize,
    /// Size of the pseudo-word pool content words are drawn from.
    pub vocab_size: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_answers: usize,
    pub max_answers: usize,
    /// Content tokens per sentence before keyword/bridge insertion.
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Probability of a trailing `, filler filler` clause outside the span.
    pub clause_prob: f64,
    /// Probability of a `the` inside the content part.
    pub article_prob: f64,
    /// Relational mode: join distractor sentences in pairs by a private word.
    pub paired_distractors: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: SynthMode::Keyword,
            count: 100,
            vocab_size: 100,
            min_sentences: 6,
            max_sentences: 8,
            min_answers: 2,
            max_answers: 3,
            min_sentence_len: 3,
            max_sentence_len: 5,
            clause_prob: 0.2,
            article_prob: 0.3,
            paired_distractors: false,
        }
    }
}

impl SynthConfig {
    pub fn new(mode: SynthMode, count: usize) -> Self {
        SynthConfig {
            mode,
            count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return err("count must be at least 1".into());
        }
        if self.min_answers < 2 {
            return err(format!(
                "min_answers must be at least 2, got {}",
                self.min_answers
            ));
        }
        for (name, lo, hi) in [
            ("sentences", self.min_sentences, self.max_sentences),
            ("answers", self.min_answers, self.max_answers),
            ("sentence_len", self.min_sentence_len, self.max_sentence_len),
        ] {
            if lo > hi || lo == 0 {
                return err(format!("invalid {name} range {lo}..={hi}"));
            }
        }
        if self.min_answers > self.min_sentences {
            return err(format!(
                "{} answers cannot fit in passages of {} sentences",
                self.min_answers, self.min_sentences
            ));
        }
        let needed = self.max_sentences * (self.max_sentence_len + 1) + 2;
        if self.vocab_size < needed {
            return err(format!(
                "vocab_size {} too small, need at least {needed}",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.clause_prob) || !(0.0..=1.0).contains(&self.article_prob) {
            return err("probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLERS: &[&str] = &["then", "again", "gently", "slowly", "later", "twice"];

/// Pseudo-word for pool index `i`: at least two consonant-vowel syllables.
fn pseudo_word(mut i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = Vec::new();
    loop {
        let s = i % base;
        syllables.push([CONSONANTS[s / VOWELS.len()], VOWELS[s % VOWELS.len()]]);
        i /= base;
        if i == 0 && syllables.len() >= 2 {
            break;
        }
    }
    syllables
        .iter()
        .rev()
        .flat_map(|s| s.iter().map(|&b| b as char))
        .collect()
}

struct Draft {
    content: Vec<String>,
    clause: Vec<String>,
}

impl Draft {
    fn insert(&mut self, rng: &mut ChaCha8Rng, word: &str) {
        let at = rng.gen_range(0..=self.content.len());
        self.content.insert(at, word.to_string());
    }

    fn text(&self) -> String {
        let mut toks: Vec<&str> = self.content.iter().map(String::as_str).collect();
        toks.extend(self.clause.iter().map(String::as_str));
        toks.push(".");
        toks.join(" ")
    }
}

fn one_example(cfg: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Result<Example> {
    let l = rng.gen_range(cfg.min_sentences..=cfg.max_sentences);
    let t = rng.gen_range(cfg.min_answers..=cfg.max_answers.min(l));
    let mut pool: Vec<usize> = (0..cfg.vocab_size).collect();
    pool.shuffle(rng);
    let mut fresh = pool.into_iter().map(pseudo_word);
    let mut next_word = || fresh.next().expect("pool size checked by validate");

    let q_words: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| next_word()).collect();
    let question = format!("how to {} ?", q_words.join(" "));

    let mut drafts: Vec<Draft> = (0..l)
        .map(|_| {
            let len = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
            let mut d = Draft {
                content: (0..len).map(|_| next_word()).collect(),
                clause: Vec::new(),
            };
            if rng.gen_bool(cfg.clause_prob) {
                d.clause.push(",".into());
                for _ in 0..2 {
                    d.clause.push(FILLERS.choose(rng).unwrap().to_string());
                }
            }
            d
        })
        .collect();

    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(rng);
    let (answers, distractors) = order.split_at(t);

    match cfg.mode {
        SynthMode::Keyword => {
            for &k in answers {
                let w = q_words.choose(rng).unwrap().clone();
                drafts[k].insert(rng, &w);
            }
        }
        SynthMode::Relational => {
            let bridged = t / 2;
            let (bridges, direct) = answers.split_at(bridged);
            for &k in direct {
                let w = q_words.choose(rng).unwrap().clone();
                drafts[k].insert(rng, &w);
            }
            for (i, &k) in bridges.iter().enumerate() {
                let link = next_word();
                let partner = direct[i % direct.len()];
                drafts[k].insert(rng, &link);
                drafts[partner].insert(rng, &link);
            }
            let pairs = if cfg.paired_distractors {
                distractors
            } else {
                &[]
            };
            for pair in pairs.chunks_exact(2) {
                let link = next_word();
                drafts[pair[0]].insert(rng, &link);
                drafts[pair[1]].insert(rng, &link);
            }
        }
    }
    for d in &mut drafts {
        if rng.gen_bool(cfg.article_prob) {
            d.insert(rng, "the");
        }
    }

    let mut spans: Vec<Span> = answers
        .iter()
        .map(|&k| Span::new(k, 0, drafts[k].content.len() - 1))
        .collect();
    spans.sort();
    let sentences: Vec<String> = drafts.iter().map(Draft::text).collect();
    Example::from_text(&id, &question, &sentences, spans)
}

/// Generate `config.count` examples; identical output for identical inputs.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match config.mode {
        SynthMode::Keyword => "kw",
        SynthMode::Relational => "rel",
    };
    (0..config.count)
        .map(|i| {
            let ex = one_example(config, &mut rng, format!("{tag}-{seed}-{i:05}"))?;
            ex.validate(true)?;
            Ok(ex)
        })
        .collect()
}
