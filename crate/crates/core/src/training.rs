//! Mini-batch training with Adam and early stopping, corpus evaluation, and
//! the ablation suite.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, TrainConfig};
use crate::encoder::Truncation;
use crate::error::{Error, Result};
use crate::extractor::{AnswerList, PredictionRecord};
use crate::model::{ListReader, Prepared};
use crate::scalar::Scalar;
use crate::tensor::{derive_seed, AdamConfig, AdamState, Checkpoint, Graph};
use crate::text::{build_vocab, Example};

/// File name of the best checkpoint inside a run directory.
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_span_loss: f64,
    pub train_sent_loss: f64,
    pub val_loss: f64,
    pub val_span_f1: f64,
    pub val_sent_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub ablation: Ablation,
    pub config: TrainConfig,
    pub num_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_span_f1: f64,
    pub best_val_sent_f1: f64,
    pub stopped_early: bool,
    pub best_checkpoint: Option<PathBuf>,
    pub truncations: Vec<Truncation>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// `epoch,train_loss,val_loss,val_span_f1,val_sent_f1` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,steps,train_loss,train_span_loss,train_sent_loss,val_loss,val_span_f1,val_sent_f1\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.steps,
                e.train_loss,
                e.train_span_loss,
                e.train_sent_loss,
                e.val_loss,
                e.val_span_f1,
                e.val_sent_f1
            );
        }
        s
    }
}

/// Loss values of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub span_loss: f64,
    pub sent_loss: f64,
}

/// Model, optimizer and prepared training data.
pub struct Trainer<T> {
    pub model: ListReader<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub data: Vec<Prepared>,
    pub truncations: Vec<Truncation>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Build the vocabulary from `train`, initialize the model and optimizer.
    pub fn new(config: &TrainConfig, train: &[Example]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::validation(None, "training set is empty"));
        }
        let vocab = build_vocab(train, config.min_count);
        let model = ListReader::new(config.model.clone(), config.ablation, vocab, config.seed)?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        let mut data = Vec::with_capacity(train.len());
        let mut truncations = Vec::new();
        for ex in train {
            let p = model.prepare(ex)?;
            truncations.extend(p.truncation.clone());
            data.push(p);
        }
        Ok(Trainer {
            model,
            adam,
            config: config.clone(),
            data,
            truncations,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle")),
        })
    }

    /// One Adam step on the mean objective of `batch` (indices into the data).
    pub fn step(&mut self, batch: &[usize]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let scale = T::lit(1.0 / batch.len() as f64);
        let mut stats = StepStats {
            loss: 0.0,
            span_loss: 0.0,
            sent_loss: 0.0,
        };
        self.model.params.zero_grad();
        for &i in batch {
            let prep = &self.data[i];
            let mask_seed =
                derive_seed(self.config.seed, &format!("dropout.{}.{i}", self.adam.step));
            let mut g = Graph::with_dropout(self.model.config.dropout, mask_seed);
            let l = self.model.loss(&mut g, prep, self.config.lambda)?;
            let value = g.value(l.objective).item().to_f64_lossy();
            let culprit = g
                .first_non_finite()
                .or_else(|| (!value.is_finite()).then(|| "loss".to_string()));
            if let Some(culprit) = culprit {
                return Err(Error::Divergence(format!(
                    "non-finite loss on example `{}` at step {}; first non-finite tensor: {culprit}",
                    prep.example.id,
                    self.adam.step + 1
                )));
            }
            g.backward_into(l.objective, &mut self.model.params, scale)?;
            stats.loss += value / batch.len() as f64;
            stats.span_loss += g.value(l.span).item().to_f64_lossy() / batch.len() as f64;
            stats.sent_loss += g.value(l.sent).item().to_f64_lossy() / batch.len() as f64;
        }
        self.adam.step(&mut self.model.params)?;
        if let Some(bad) = self.model.params.first_non_finite() {
            return Err(Error::Divergence(format!(
                "{bad} became non-finite at step {}",
                self.adam.step
            )));
        }
        Ok(stats)
    }

    /// One pass over the shuffled training data. Returns per-epoch means.
    pub fn epoch(&mut self) -> Result<StepStats> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepStats {
            loss: 0.0,
            span_loss: 0.0,
            sent_loss: 0.0,
        };
        for batch in order.chunks(self.config.batch_size) {
            let s = self.step(batch)?;
            let w = batch.len() as f64 / order.len() as f64;
            sum.loss += s.loss * w;
            sum.span_loss += s.span_loss * w;
            sum.sent_loss += s.sent_loss * w;
        }
        Ok(sum)
    }
}

/// Per-example and corpus-level scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub span_f1: f64,
    pub sent_f1: f64,
    /// Mean training objective, when computed from a model.
    pub loss: Option<f64>,
    pub examples: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn predictions_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.examples {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Score a list of predictions, one per example, against gold.
pub fn score_predictions(data: &[Example], preds: Vec<AnswerList>) -> Result<EvalReport> {
    if data.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} examples",
            preds.len(),
            data.len()
        )));
    }
    let examples: Vec<PredictionRecord> = data
        .iter()
        .zip(preds)
        .map(|(ex, p)| PredictionRecord::new(ex, p, true))
        .collect();
    let n = examples.len().max(1) as f64;
    Ok(EvalReport {
        span_f1: examples.iter().filter_map(|r| r.span_f1).sum::<f64>() / n,
        sent_f1: examples.iter().filter_map(|r| r.sent_f1).sum::<f64>() / n,
        loss: None,
        examples,
    })
}

/// Gold answers as predictions.
pub fn oracle_predictions(data: &[Example]) -> Vec<AnswerList> {
    data.iter().map(AnswerList::gold).collect()
}

/// Every token tagged `O`, no sentence selected.
pub fn all_o_predictions(data: &[Example]) -> Vec<AnswerList> {
    data.iter()
        .map(|ex| AnswerList::new(ex, &[], Vec::new()))
        .collect()
}

/// Predict every example and score against gold. `lambda` sets the weight of
/// the reported mean loss.
pub fn evaluate<T: Scalar>(
    model: &ListReader<T>,
    data: &[Example],
    lambda: f64,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for ex in data {
        let prep = model.prepare(ex)?;
        let (l, p) = model.loss_and_predict(&prep, lambda)?;
        loss += l;
        preds.push(p.answers);
    }
    let mut report = score_predictions(data, preds)?;
    report.loss = Some(loss / data.len().max(1) as f64);
    Ok(report)
}

/// Answer sentences that share no token with the question, e.g. sentences
/// reachable only through another answer.
pub fn question_disjoint_answer_sentences(example: &Example) -> Vec<usize> {
    let q: BTreeSet<&str> = example.question.iter().map(String::as_str).collect();
    example
        .answer_sentences()
        .into_iter()
        .filter(|&k| {
            example.passage[k]
                .iter()
                .all(|t| !q.contains(t.as_str()) || !t.chars().any(char::is_alphanumeric))
        })
        .collect()
}

/// Fraction of question-disjoint gold answer sentences that a prediction
/// selects, pooled over the corpus. `None` when there are none.
pub fn disjoint_sentence_recall(data: &[Example], report: &EvalReport) -> Option<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (ex, rec) in data.iter().zip(&report.examples) {
        let picked: BTreeSet<usize> = rec.answer_sentences.iter().copied().collect();
        for k in question_disjoint_answer_sentences(ex) {
            total += 1;
            hit += usize::from(picked.contains(&k));
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Where and how verbosely a run reports.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `best.ckpt`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Finished run: the best-validation model and its report.
pub struct TrainOutcome<T> {
    pub model: ListReader<T>,
    pub report: RunReport,
}

/// Train until validation loss stops improving for `early_stop_patience`
/// epochs or `max_epochs` is reached, keeping the best-validation model.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    if val_set.is_empty() {
        return Err(Error::validation(None, "validation set is empty"));
    }
    let mut trainer = Trainer::<T>::new(config, train_set)?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, f64, ListReader<T>, AdamState<T>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let s = trainer.epoch()?;
        let val = evaluate(&trainer.model, val_set, config.lambda)?;
        let val_loss = val.loss.expect("model evaluation reports loss");
        let rec = EpochRecord {
            epoch,
            steps: trainer.adam.step,
            train_loss: s.loss,
            train_span_loss: s.span_loss,
            train_sent_loss: s.sent_loss,
            val_loss,
            val_span_f1: val.span_f1,
            val_sent_f1: val.sent_f1,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&rec);
        }
        epochs.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((
                epoch,
                val_loss,
                val.span_f1,
                val.sent_f1,
                trainer.model.clone(),
                trainer.adam.clone(),
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_span, best_sent, model, adam) =
        best.expect("at least one epoch ran");
    let best_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(BEST_CHECKPOINT);
            let extra = serde_json::json!({"epoch": best_epoch, "seed": config.seed, "lambda": config.lambda});
            model.to_checkpoint(Some(adam), extra).save(&path)?;
            Some(path)
        }
        None => None,
    };
    let report = RunReport {
        seed: config.seed,
        ablation: config.ablation,
        config: config.clone(),
        num_parameters: model.num_parameters(),
        epochs,
        best_epoch,
        best_val_loss,
        best_val_span_f1: best_span,
        best_val_sent_f1: best_sent,
        stopped_early,
        best_checkpoint,
        truncations: trainer.truncations,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, report })
}

/// Load a model checkpoint written by [`train`].
pub fn load_model<T: Scalar>(path: &Path) -> Result<ListReader<T>> {
    let ckpt = Checkpoint::<T>::load(path)?;
    Ok(ListReader::from_checkpoint(&ckpt)?.0)
}

/// Test scores of one variant across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub span_f1: Vec<f64>,
    pub sent_f1: Vec<f64>,
    pub disjoint_recall: Vec<Option<f64>>,
}

fn summary(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

impl AblationRow {
    pub fn mean_span_f1(&self) -> f64 {
        summary(&self.span_f1).0
    }

    pub fn mean_sent_f1(&self) -> f64 {
        summary(&self.sent_f1).0
    }

    /// Mean over seeds that had any question-disjoint answer sentences.
    pub fn mean_disjoint_recall(&self) -> Option<f64> {
        let xs: Vec<f64> = self.disjoint_recall.iter().flatten().copied().collect();
        (!xs.is_empty()).then(|| summary(&xs).0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// `variant | span F1 mean [min, max] | sent F1 mean [min, max]`.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | span F1 | sent F1 |\n|---|---|---|\n");
        for r in &self.rows {
            let (a, b, c) = summary(&r.span_f1);
            let (d, e, f) = summary(&r.sent_f1);
            let _ = writeln!(
                s,
                "| {} | {a:.4} [{b:.4}, {c:.4}] | {d:.4} [{e:.4}, {f:.4}] |",
                r.ablation
            );
        }
        s
    }
}

/// Train each variant with identical data and seeds and score it on `test`.
/// `on_run` sees every finished run.
pub fn run_ablation_suite<T: Scalar>(
    base: &TrainConfig,
    variants: &[Ablation],
    train_set: &[Example],
    val_set: &[Example],
    test_set: &[Example],
    seeds: &[u64],
    mut on_run: impl FnMut(Ablation, u64, &RunReport, &EvalReport),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "ablation suite needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &ablation in variants {
        let mut row = AblationRow {
            ablation,
            seeds: seeds.to_vec(),
            span_f1: Vec::new(),
            sent_f1: Vec::new(),
            disjoint_recall: Vec::new(),
        };
        for &seed in seeds {
            let cfg = TrainConfig {
                ablation,
                seed,
                ..base.clone()
            };
            let out = train::<T>(&cfg, train_set, val_set, TrainOptions::default())?;
            let eval = evaluate(&out.model, test_set, cfg.lambda)?;
            row.span_f1.push(eval.span_f1);
            row.sent_f1.push(eval.sent_f1);
            row.disjoint_recall
                .push(disjoint_sentence_recall(test_set, &eval));
            on_run(ablation, seed, &out.report, &eval);
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::text::{generate_synthetic, Span, SynthConfig, SynthMode};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden: 8,
                encoder_layers: 1,
                heads: 2,
                ff_dim: Some(16),
                max_length: 96,
                interaction_layers: 1,
                truncate: false,
                dropout: 0.0,
            },
            batch_size: 4,
            learning_rate: 1e-2,
            max_epochs: 3,
            early_stop_patience: 2,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<Example> {
        generate_synthetic(&SynthConfig::new(SynthMode::Keyword, n), seed).unwrap()
    }

    #[test]
    fn runs_are_reproducible() {
        let (tr, va) = (data(6, 1), data(3, 2));
        let a = train::<f64>(&tiny(), &tr, &va, TrainOptions::default()).unwrap();
        let b = train::<f64>(&tiny(), &tr, &va, TrainOptions::default()).unwrap();
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.model, b.model);
        let mut c = tiny();
        c.seed = 5;
        let c = train::<f64>(&c, &tr, &va, TrainOptions::default()).unwrap();
        assert_ne!(a.report.epochs, c.report.epochs);
    }

    #[test]
    fn early_stopping_counts_validation_evaluations() {
        let (tr, va) = (data(4, 1), data(2, 2));
        let mut cfg = tiny();
        cfg.learning_rate = 0.5; // overshoots, validation loss climbs
        cfg.max_epochs = 30;
        cfg.early_stop_patience = 3;
        let out = train::<f64>(&cfg, &tr, &va, TrainOptions::default()).unwrap();
        let r = &out.report;
        if r.stopped_early {
            assert_eq!(r.epochs.len(), r.best_epoch + 3);
        } else {
            assert_eq!(r.epochs.len(), 30);
        }
        let min = r
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_loss, min);
        assert_eq!(r.epochs[r.best_epoch - 1].val_span_f1, r.best_val_span_f1);
        assert!(r.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }

    #[test]
    fn oracle_and_all_o_bounds() {
        let d = data(5, 3);
        let oracle = score_predictions(&d, oracle_predictions(&d)).unwrap();
        assert_eq!((oracle.span_f1, oracle.sent_f1), (1.0, 1.0));
        let none = score_predictions(&d, all_o_predictions(&d)).unwrap();
        assert_eq!((none.span_f1, none.sent_f1), (0.0, 0.0));
    }

    #[test]
    fn checkpoint_reproduces_scores() {
        let (tr, va) = (data(4, 1), data(3, 2));
        let dir = tempfile::tempdir().unwrap();
        let out = train::<f64>(
            &tiny(),
            &tr,
            &va,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                on_epoch: None,
            },
        )
        .unwrap();
        let path = out.report.best_checkpoint.clone().unwrap();
        let loaded = load_model::<f64>(&path).unwrap();
        assert_eq!(loaded, out.model);
        let a = evaluate(&out.model, &va, 2.0).unwrap();
        let b = evaluate(&loaded, &va, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_sentences_found() {
        let ex = Example::from_text(
            "d",
            "how to fold ?",
            &[
                "Fold the sheet.".into(),
                "Crease it.".into(),
                "Wait.".into(),
            ],
            vec![Span::new(0, 0, 2), Span::new(1, 0, 1)],
        )
        .unwrap();
        assert_eq!(question_disjoint_answer_sentences(&ex), vec![1]);
    }

    #[test]
    fn ablation_table_has_four_rows() {
        let (tr, va) = (data(3, 1), data(2, 2));
        let mut cfg = tiny();
        cfg.max_epochs = 1;
        let mut runs = Vec::new();
        let t = run_ablation_suite::<f64>(
            &cfg,
            &Ablation::ALL,
            &tr,
            &va,
            &va,
            &[1, 2],
            |a, s, _, _| runs.push((a, s)),
        )
        .unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t
            .rows
            .iter()
            .all(|r| r.seeds == vec![1, 2] && r.span_f1.len() == 2));
        assert_eq!(runs.len(), 8);
        assert_eq!(t.to_markdown().lines().count(), 6);
    }

    #[test]
    fn divergence_names_tensor() {
        let (tr, _) = (data(2, 1), ());
        let mut t = Trainer::<f64>::new(&tiny(), &tr).unwrap();
        t.model.params.get_mut("head.span.b").unwrap().data_mut()[0] = f64::NAN;
        let err = t.step(&[0]).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert!(err.to_string().contains("head.span.b"), "{err}");
    }
}
