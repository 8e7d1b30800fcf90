//! Hierarchical encoder: a small post-LN transformer over the packed
//! `[CLS] question [SEP] passage` sequence, then self-attentive pooling of
//! each sentence's token states into one sentence vector.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, Init};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};
use crate::text::{Example, Vocab, CLS_ID, SEP_ID};

/// Token ids and layout for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    /// `(start, len)` of each question sentence in packed coordinates.
    pub question_sentences: Vec<(usize, usize)>,
    /// `(start, len)` of each passage sentence in packed coordinates.
    pub passage_sentences: Vec<(usize, usize)>,
    /// Question token count `m`.
    pub m: usize,
    /// Passage token count `n`.
    pub n: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// First passage position.
    pub fn passage_start(&self) -> usize {
        self.m + 2
    }
}

/// Record of passage sentences dropped to fit `max_length`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub id: String,
    pub kept_sentences: usize,
    pub dropped_sentences: usize,
    pub dropped_answers: usize,
}

/// Packed length of an example: `m + n + 2`.
pub fn packed_len(example: &Example) -> usize {
    example.question.len() + example.num_tokens() + 2
}

/// Drop whole trailing passage sentences until the example fits. Fails when
/// even the first sentence does not fit, or when `truncate` is off and the
/// example is too long.
pub fn fit_length(
    example: &Example,
    max_length: usize,
    truncate: bool,
) -> Result<(Example, Option<Truncation>)> {
    let total = packed_len(example);
    if total <= max_length {
        return Ok((example.clone(), None));
    }
    if !truncate {
        return Err(Error::validation(
            None,
            format!(
                "example `{}` packs to {total} positions, max_length is {max_length}",
                example.id
            ),
        ));
    }
    let budget = max_length.saturating_sub(example.question.len() + 2);
    let mut used = 0;
    let mut keep = 0;
    for s in &example.passage {
        if used + s.len() > budget {
            break;
        }
        used += s.len();
        keep += 1;
    }
    if keep == 0 {
        return Err(Error::validation(
            None,
            format!(
                "example `{}`: question plus first sentence exceed max_length {max_length}",
                example.id
            ),
        ));
    }
    let mut out = example.clone();
    out.passage.truncate(keep);
    out.passage_text.truncate(keep);
    out.answers.retain(|a| a.sent < keep);
    let record = Truncation {
        id: example.id.clone(),
        kept_sentences: keep,
        dropped_sentences: example.passage.len() - keep,
        dropped_answers: example.answers.len() - out.answers.len(),
    };
    Ok((out, Some(record)))
}

pub fn pack_input(example: &Example, vocab: &Vocab, max_length: usize) -> Result<PackedSequence> {
    let total = packed_len(example);
    if total > max_length {
        return Err(Error::validation(
            None,
            format!(
                "example `{}` packs to {total} positions, max_length is {max_length}",
                example.id
            ),
        ));
    }
    let m = example.question.len();
    let n = example.num_tokens();
    let mut ids = Vec::with_capacity(total);
    ids.push(CLS_ID);
    ids.extend(example.question.iter().map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    ids.extend(example.passage.iter().flatten().map(|t| vocab.id(t)));
    let segments = (0..total).map(|i| usize::from(i >= m + 2)).collect();

    let mut question_sentences = Vec::new();
    let mut at = 1;
    for len in example.question_sentence_lengths() {
        question_sentences.push((at, len));
        at += len;
    }
    let mut passage_sentences = Vec::new();
    let mut at = m + 2;
    for len in example.sentence_lengths() {
        passage_sentences.push((at, len));
        at += len;
    }
    Ok(PackedSequence {
        ids,
        segments,
        positions: (0..total).collect(),
        question_sentences,
        passage_sentences,
        m,
        n,
    })
}

/// Token and sentence states for one example.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[m × d]`
    pub h_q: Var,
    /// `[n × d]`
    pub h_p: Var,
    /// `[l_Q × d]`
    pub s_q: Var,
    /// `[l_P × d]`
    pub s_p: Var,
}

pub fn init_encoder<T: Scalar>(
    init: &mut Init<'_, T>,
    cfg: &ModelConfig,
    vocab_size: usize,
) -> Result<()> {
    let d = cfg.hidden;
    init.weight("embed.token", &[vocab_size, d])?;
    init.weight("embed.position", &[cfg.max_length, d])?;
    init.weight("embed.segment", &[2, d])?;
    init.layer_norm("embed.ln", d)?;
    for l in 0..cfg.encoder_layers {
        for p in ["q", "k", "v", "o"] {
            init.linear(&format!("encoder.{l}.attn.{p}"), d, d)?;
        }
        init.layer_norm(&format!("encoder.{l}.ln1"), d)?;
        init.linear(&format!("encoder.{l}.ff.in"), d, cfg.ff_width())?;
        init.linear(&format!("encoder.{l}.ff.out"), cfg.ff_width(), d)?;
        init.layer_norm(&format!("encoder.{l}.ln2"), d)?;
    }
    init_sent_ext(init, "sentext", d)
}

pub fn init_sent_ext<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, d: usize) -> Result<()> {
    init.weight(&format!("{prefix}.w1"), &[d, d])?;
    init.zeros(&format!("{prefix}.b1"), &[d])?;
    init.weight(&format!("{prefix}.w2"), &[d, 1])?;
    init.zeros(&format!("{prefix}.b2"), &[1])
}

fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let d = g.value(x).cols();
    let dh = d / heads;
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let k = linear(g, store, &format!("{prefix}.k"), x)?;
    let v = linear(g, store, &format!("{prefix}.v"), x)?;
    let kt = g.transpose(k)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_rows(kt, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_last_axis(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, store, &format!("{prefix}.o"), joined)
}

/// Contextual states for every packed position, `[(m+n+2) × d]`.
pub fn transformer_encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    packed: &PackedSequence,
) -> Result<Var> {
    let tok = g.param(store, "embed.token")?;
    let pos = g.param(store, "embed.position")?;
    let seg = g.param(store, "embed.segment")?;
    let e_tok = g.gather_rows(tok, &packed.ids)?;
    let e_pos = g.gather_rows(pos, &packed.positions)?;
    let e_seg = g.gather_rows(seg, &packed.segments)?;
    let x = g.add(e_tok, e_pos)?;
    let x = g.add(x, e_seg)?;
    let x = layer_norm(g, store, "embed.ln", x)?;
    let mut x = g.dropout(x)?;
    for l in 0..cfg.encoder_layers {
        let a = self_attention(g, store, &format!("encoder.{l}.attn"), cfg.heads, x)?;
        let a = g.dropout(a)?;
        let r = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("encoder.{l}.ln1"), r)?;
        let f = linear(g, store, &format!("encoder.{l}.ff.in"), h)?;
        let f = g.gelu(f);
        let f = linear(g, store, &format!("encoder.{l}.ff.out"), f)?;
        let f = g.dropout(f)?;
        let r = g.add(h, f)?;
        x = layer_norm(g, store, &format!("encoder.{l}.ln2"), r)?;
    }
    Ok(x)
}

/// Pool each `(start, len)` block of rows of `h` with self-attentive weights:
/// `a = W2·tanh(W1·h + b1) + b2`, `α = softmax(a)`, output `Σ α_i h_i`.
/// Returns `[blocks × d]`.
pub fn sent_ext<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    blocks: &[(usize, usize)],
) -> Result<Var> {
    Ok(sent_ext_weights(g, store, prefix, h, blocks)?.1)
}

/// As [`sent_ext`], also returning each block's attention weights `[1 × c_k]`.
pub fn sent_ext_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    blocks: &[(usize, usize)],
) -> Result<(Vec<Var>, Var)> {
    if blocks.is_empty() {
        return Err(Error::contract("sent_ext needs at least one sentence"));
    }
    if let Some(&(s, _)) = blocks.iter().find(|b| b.1 == 0) {
        return Err(Error::contract(format!(
            "sent_ext: empty sentence at row {s}"
        )));
    }
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let z = g.matmul(h, w1)?;
    let z = g.add_row(z, b1)?;
    let z = g.tanh(z);
    let a = g.matmul(z, w2)?;
    let a = g.add_row(a, b2)?;
    let a = g.transpose(a)?;
    let mut alphas = Vec::with_capacity(blocks.len());
    let mut rows = Vec::with_capacity(blocks.len());
    for &(start, len) in blocks {
        let ak = g.slice_cols(a, start, len)?;
        let alpha = g.softmax_last_axis(ak)?;
        let hk = g.slice_rows(h, start, len)?;
        rows.push(g.matmul(alpha, hk)?);
        alphas.push(alpha);
    }
    let pooled = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)?
    };
    Ok((alphas, pooled))
}

/// Full hierarchical encoding of one packed example.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    packed: &PackedSequence,
) -> Result<EncoderOutput> {
    let x = transformer_encode(g, store, cfg, packed)?;
    let h_q = g.slice_rows(x, 1, packed.m)?;
    let h_p = g.slice_rows(x, packed.passage_start(), packed.n)?;
    let q_blocks: Vec<_> = packed
        .question_sentences
        .iter()
        .map(|&(s, l)| (s - 1, l))
        .collect();
    let p_start = packed.passage_start();
    let p_blocks: Vec<_> = packed
        .passage_sentences
        .iter()
        .map(|&(s, l)| (s - p_start, l))
        .collect();
    let s_q = sent_ext(g, store, "sentext", h_q, &q_blocks)?;
    let s_p = sent_ext(g, store, "sentext", h_p, &p_blocks)?;
    Ok(EncoderOutput { h_q, h_p, s_q, s_p })
}
