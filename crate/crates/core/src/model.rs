//! The assembled reader: encoder, interaction stack and heads, plus
//! prediction, layer traces and checkpoint round-trips.

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig};
use crate::encoder::{encode, fit_length, init_encoder, pack_input, PackedSequence, Truncation};
use crate::error::{Error, Result};
use crate::extractor::{
    decode_bio, init_heads, joint_loss, sentence_head, span_head, AnswerList, SentenceScores,
    TagDistribution,
};
use crate::interaction::{init_interaction, interaction_stack, HeteroGraph, InteractionState};
use crate::layers::Init;
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Checkpoint, Graph, ParamStore, Var};
use crate::text::{spans_to_bio, BioLabels, Example, Vocab};

const FORMAT: &str = "listreader";

/// One example made ready for the model: length-fitted, packed, with its
/// passage graph and (when labelled) BIO targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: Example,
    pub packed: PackedSequence,
    pub graph: HeteroGraph,
    pub gold: BioLabels,
    pub truncation: Option<Truncation>,
}

/// Parameter scopes and their roles. The full model has one tower; the
/// separate-train ablation has a span tower and a sentence tower that share
/// nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Towers {
    Joint,
    Split,
}

const SPAN_TOWER: &str = "span_tower.";
const SENT_TOWER: &str = "sent_tower.";

/// Forward-pass outputs.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[n × 3]` tag probabilities.
    pub tags: Var,
    /// `[l_P × 2]` sentence probabilities.
    pub sents: Var,
    /// Sentence probabilities after each interaction sublayer, `A1, G1, …`.
    pub trace: Vec<(String, Var)>,
}

/// Scalar loss nodes; `objective` is what training minimizes. `tags` and
/// `sents` are the probabilities a prediction would use.
#[derive(Clone, Copy, Debug)]
pub struct ModelLoss {
    pub span: Var,
    pub sent: Var,
    pub objective: Var,
    pub tags: Var,
    pub sents: Var,
}

/// Decoded prediction with the probabilities it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answers: AnswerList,
    pub tags: TagDistribution,
    pub sentences: SentenceScores,
}

/// Sentence probabilities per interaction sublayer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerTrace {
    pub rows: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: String,
    config: ModelConfig,
    ablation: Ablation,
    vocab: Vec<String>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ListReader<T> {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ListReader<T> {
    pub fn new(config: ModelConfig, ablation: Ablation, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let scopes: &[&str] = match towers(ablation) {
            Towers::Joint => &[""],
            Towers::Split => &[SPAN_TOWER, SENT_TOWER],
        };
        for scope in scopes {
            let mut init = Init::scoped(&mut params, seed, scope);
            init_encoder(&mut init, &config, vocab.len())?;
            init_interaction(
                &mut init,
                config.interaction_layers,
                config.hidden,
                ablation,
            )?;
            init_heads(&mut init, "head", config.hidden)?;
        }
        Ok(ListReader {
            config,
            ablation,
            vocab,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn prepare(&self, example: &Example) -> Result<Prepared> {
        let (example, truncation) =
            fit_length(example, self.config.max_length, self.config.truncate)?;
        let packed = pack_input(&example, &self.vocab, self.config.max_length)?;
        let graph = HeteroGraph::build(&example)?;
        let gold = spans_to_bio(&example)?;
        Ok(Prepared {
            example,
            packed,
            graph,
            gold,
            truncation,
        })
    }

    fn tower(
        &self,
        g: &mut Graph<T>,
        scope: &str,
        prep: &Prepared,
    ) -> Result<(Var, Var, Vec<(String, Var)>)> {
        let saved = g.set_scope(scope);
        let result = (|| {
            let enc = encode(g, &self.params, &self.config, &prep.packed)?;
            let (st, trace) = interaction_stack(
                g,
                &self.params,
                InteractionState::from(enc),
                &prep.graph,
                self.config.interaction_layers,
                self.ablation,
            )?;
            let tags = span_head(g, &self.params, "head", st.h_p)?;
            let sents = sentence_head(g, &self.params, "head", st.s_p)?;
            let mut rows = Vec::with_capacity(trace.rows.len());
            for (name, s_p) in trace.rows {
                let probs = if s_p == st.s_p {
                    sents
                } else {
                    sentence_head(g, &self.params, "head", s_p)?
                };
                rows.push((name, probs));
            }
            Ok((tags, sents, rows))
        })();
        g.set_scope(saved);
        result
    }

    pub fn forward(&self, g: &mut Graph<T>, prep: &Prepared) -> Result<Forward> {
        match towers(self.ablation) {
            Towers::Joint => {
                let (tags, sents, trace) = self.tower(g, "", prep)?;
                Ok(Forward { tags, sents, trace })
            }
            Towers::Split => {
                let (tags, _, _) = self.tower(g, SPAN_TOWER, prep)?;
                let (_, sents, trace) = self.tower(g, SENT_TOWER, prep)?;
                Ok(Forward { tags, sents, trace })
            }
        }
    }

    /// Training objective of one example. The full model minimizes
    /// `L_w + λ·L_s`; the separate-train ablation minimizes `L_w` on its span
    /// tower plus `L_s` on its sentence tower, which share no parameters.
    pub fn loss(&self, g: &mut Graph<T>, prep: &Prepared, lambda: f64) -> Result<ModelLoss> {
        match towers(self.ablation) {
            Towers::Joint => {
                let f = self.forward(g, prep)?;
                let parts = joint_loss(g, f.tags, f.sents, &prep.gold, T::lit(lambda))?;
                Ok(ModelLoss {
                    span: parts.span,
                    sent: parts.sent,
                    objective: parts.total,
                    tags: f.tags,
                    sents: f.sents,
                })
            }
            Towers::Split => {
                let (tags_a, sents_a, _) = self.tower(g, SPAN_TOWER, prep)?;
                let (tags_b, sents_b, _) = self.tower(g, SENT_TOWER, prep)?;
                let a = joint_loss(g, tags_a, sents_a, &prep.gold, T::zero())?;
                let b = joint_loss(g, tags_b, sents_b, &prep.gold, T::one())?;
                let objective = g.add(a.span, b.sent)?;
                Ok(ModelLoss {
                    span: a.span,
                    sent: b.sent,
                    objective,
                    tags: tags_a,
                    sents: sents_b,
                })
            }
        }
    }

    pub fn predict_prepared(&self, prep: &Prepared) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, prep)?;
        self.decode(&g, prep, f.tags, f.sents)
    }

    /// Objective value and prediction from a single forward pass.
    pub fn loss_and_predict(&self, prep: &Prepared, lambda: f64) -> Result<(f64, Prediction)> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, prep, lambda)?;
        let value = g.value(l.objective).item().to_f64_lossy();
        Ok((value, self.decode(&g, prep, l.tags, l.sents)?))
    }

    fn decode(&self, g: &Graph<T>, prep: &Prepared, tags: Var, sents: Var) -> Result<Prediction> {
        let tags = TagDistribution::from_tensor(g.value(tags))?;
        let sentences = SentenceScores::from_tensor(g.value(sents))?;
        let spans = decode_bio(&tags, &prep.example.sentence_lengths())?;
        let answers = AnswerList::new(&prep.example, &spans, sentences.selected());
        Ok(Prediction {
            answers,
            tags,
            sentences,
        })
    }

    pub fn predict(&self, example: &Example) -> Result<Prediction> {
        self.predict_prepared(&self.prepare(example)?)
    }

    /// Sentence probabilities from the trained sentence head applied to the
    /// passage sentence states after every interaction sublayer.
    pub fn trace(&self, example: &Example) -> Result<LayerTrace> {
        let prep = self.prepare(example)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &prep)?;
        let rows = f
            .trace
            .iter()
            .map(|(name, v)| {
                let s = SentenceScores::from_tensor(g.value(*v))?;
                Ok((name.clone(), s.probs))
            })
            .collect::<Result<_>>()?;
        Ok(LayerTrace { rows })
    }

    /// Checkpoint carrying config, ablation, vocabulary and `extra` metadata.
    pub fn to_checkpoint(
        &self,
        adam: Option<AdamState<T>>,
        extra: serde_json::Value,
    ) -> Checkpoint<T> {
        let meta = Meta {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            ablation: self.ablation,
            vocab: self.vocab.content_tokens().to_vec(),
            extra,
        };
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            let mut t = t.clone();
            t.clear_grad();
            params.insert(name, t).expect("names unique");
        }
        Checkpoint {
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            params,
            adam,
        }
    }

    /// Rebuild a model from a checkpoint. Every parameter the architecture
    /// expects must be present with the right shape, and nothing else.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<(Self, serde_json::Value)> {
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata does not describe a model: {e}")))?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format `{}`",
                meta.format
            )));
        }
        let vocab = Vocab::from_tokens(meta.vocab);
        let mut model = Self::new(meta.config, meta.ablation, vocab, 0)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        for (name, t) in ckpt.params.iter() {
            let slot = model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        if let Some(missing) = model.params.names().find(|n| !ckpt.params.contains(n)) {
            return Err(Error::Checkpoint(format!("missing parameter `{missing}`")));
        }
        Ok((model, meta.extra))
    }
}

fn towers(ablation: Ablation) -> Towers {
    if ablation == Ablation::SeparateTrain {
        Towers::Split
    } else {
        Towers::Joint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{build_vocab, Span};

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            encoder_layers: 1,
            heads: 2,
            ff_dim: Some(16),
            max_length: 40,
            interaction_layers: 2,
            truncate: false,
            dropout: 0.0,
        }
    }

    fn example() -> Example {
        Example::from_text(
            "m",
            "how to plant trees ?",
            &[
                "Dig a hole.".into(),
                "Water daily.".into(),
                "Plant the tree.".into(),
            ],
            vec![Span::new(0, 0, 2), Span::new(2, 0, 2)],
        )
        .unwrap()
    }

    fn model(ablation: Ablation) -> ListReader<f64> {
        let ex = example();
        ListReader::new(cfg(), ablation, build_vocab(&[ex], 1), 5).unwrap()
    }

    #[test]
    fn prediction_is_well_formed() {
        let m = model(Ablation::None);
        let p = m.predict(&example()).unwrap();
        assert_eq!(p.tags.len(), 11);
        assert_eq!(p.sentences.probs.len(), 3);
        for s in &p.answers.spans {
            assert!(example().passage_text[s.sent].contains(&s.text));
        }
    }

    #[test]
    fn trace_final_row_is_prediction() {
        for ablation in Ablation::ALL {
            let m = model(ablation);
            let t = m.trace(&example()).unwrap();
            assert_eq!(t.rows.len(), 4);
            let p = m.predict(&example()).unwrap();
            assert_eq!(t.rows.last().unwrap().1, p.sentences.probs);
            assert!(t
                .rows
                .iter()
                .flat_map(|r| &r.1)
                .all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn separate_towers_share_nothing() {
        let m = model(Ablation::SeparateTrain);
        let joint = model(Ablation::None);
        assert_eq!(m.params.len(), 2 * joint.params.len());
        let prep = m.prepare(&example()).unwrap();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &prep, 2.0).unwrap();
        let grads = g.backward(l.span).unwrap();
        for (name, &v) in g.bound_params() {
            if name.starts_with(SENT_TOWER) {
                assert!(
                    grads.get(v).is_none_or(|d| d.iter().all(|&x| x == 0.0)),
                    "{name}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(Ablation::NoGraph);
        let ck = m.to_checkpoint(None, serde_json::json!({"epoch": 3}));
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        let (m2, extra) = ListReader::from_checkpoint(&back).unwrap();
        assert_eq!(m2, m);
        assert_eq!(extra["epoch"], 3);
        assert_eq!(
            m2.predict(&example()).unwrap(),
            m.predict(&example()).unwrap()
        );
    }

    #[test]
    fn checkpoint_mismatches_fail() {
        let m = model(Ablation::None);
        let mut ck = m.to_checkpoint(None, serde_json::Value::Null);
        ck.params
            .insert("bogus", crate::tensor::Tensor::zeros(&[1]))
            .unwrap();
        let err = ListReader::from_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let mut ck = m.to_checkpoint(None, serde_json::Value::Null);
        ck.meta["config"]["hidden"] = serde_json::json!(16);
        ck.meta["config"]["heads"] = serde_json::json!(4);
        let err = ListReader::from_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");

        let mut ck = m.to_checkpoint(None, serde_json::Value::Null);
        ck.meta["config"]["interaction_layers"] = serde_json::json!(3);
        let err = ListReader::from_checkpoint(&ck).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }

    #[test]
    fn over_length_input_is_rejected_or_truncated() {
        let mut c = cfg();
        c.max_length = 12;
        let ex = example();
        let m = ListReader::<f64>::new(
            c.clone(),
            Ablation::None,
            build_vocab(std::slice::from_ref(&ex), 1),
            0,
        )
        .unwrap();
        assert!(matches!(m.prepare(&ex), Err(Error::Validation { .. })));
        c.truncate = true;
        let m = ListReader::<f64>::new(
            c,
            Ablation::None,
            build_vocab(std::slice::from_ref(&ex), 1),
            0,
        )
        .unwrap();
        let prep = m.prepare(&ex).unwrap();
        assert_eq!(prep.truncation.unwrap().kept_sentences, 1);
    }

    #[test]
    fn f32_model_runs() {
        let ex = example();
        let m = ListReader::<f32>::new(
            cfg(),
            Ablation::None,
            build_vocab(std::slice::from_ref(&ex), 1),
            1,
        )
        .unwrap();
        let p = m.predict(&ex).unwrap();
        assert_eq!(p.tags.len(), 11);
    }
}
