use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Sentence × word-type TF-IDF weights for one passage.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdf {
    /// Distinct passage words in lexicographic order.
    pub words: Vec<String>,
    /// `weights[k][w]`, zero iff sentence `k` lacks word `w`.
    pub weights: Vec<Vec<f64>>,
}

impl TfIdf {
    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    /// Weight of `word` in sentence `sent` (zero when absent).
    pub fn weight(&self, sent: usize, word: &str) -> f64 {
        self.word_index(word).map_or(0.0, |w| self.weights[sent][w])
    }
}

/// `tf(w, k) · idf(w)` with `tf = count / sentence length` and smoothed
/// `idf = ln((1 + l) / (1 + df)) + 1`, where `l` is the sentence count.
pub fn compute_tfidf(passage: &[Vec<String>]) -> Result<TfIdf> {
    if passage.is_empty() {
        return Err(Error::contract("tf-idf needs at least one sentence"));
    }
    if let Some(k) = passage.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("tf-idf: sentence {k} is empty")));
    }
    let words: Vec<String> = passage
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut df = vec![0usize; words.len()];
    let mut counts = vec![vec![0usize; words.len()]; passage.len()];
    for (k, sent) in passage.iter().enumerate() {
        for t in sent {
            counts[k][index[t.as_str()]] += 1;
        }
        for (w, &c) in counts[k].iter().enumerate() {
            if c > 0 {
                df[w] += 1;
            }
        }
    }
    let l = passage.len() as f64;
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| ((1.0 + l) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let weights = counts
        .iter()
        .zip(passage)
        .map(|(row, sent)| {
            let c = sent.len() as f64;
            row.iter()
                .zip(&idf)
                .map(|(&n, &i)| n as f64 / c * i)
                .collect()
        })
        .collect();
    Ok(TfIdf { words, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &[&[&str]]) -> Vec<Vec<String>> {
        s.iter()
            .map(|x| x.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn hand_computed_weights() {
        let t = compute_tfidf(&p(&[&["a", "b"], &["a", "c"]])).unwrap();
        assert!((t.weight(0, "a") - 0.5).abs() < 1e-15);
        let want = 0.5 * ((1.5f64).ln() + 1.0);
        assert!((t.weight(0, "b") - want).abs() < 1e-15);
        assert!((t.weight(0, "b") - 0.7027).abs() < 1e-4);
        assert_eq!(t.weight(0, "c"), 0.0);
        assert_eq!(t.weight(1, "b"), 0.0);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(compute_tfidf(&[]).is_err());
        assert!(compute_tfidf(&p(&[&["a"], &[]])).is_err());
    }
}
