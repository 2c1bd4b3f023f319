//! Training loop (Adam on per-batch mean cross-entropy), evaluation metrics
//! and the ablation / hyperparameter sweep harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_vocab, filter_lengths, make_instances, split_news, Corpus, CorpusError, Label,
    NewsExample, SurroundingPolicy, Vocabulary, PAD_ID,
};
use crate::model::{
    class_index, forward_loss, leaf_params, predict_high, prepare_input, round_params_to_f32,
    Model, ModelConfig, ModelInput, HIGH_CLASS,
};
use crate::tensor::check::ParamMap;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {msg}")]
    BadConfig { msg: String },
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty {split} split")]
    EmptySplit { split: &'static str },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Minimum token frequency for vocabulary membership.
    pub min_count: usize,
    /// Train/valid/test fractions over news items.
    pub fractions: [f64; 3],
    /// Stop after this many epochs without a validation-F1 improvement.
    pub patience: Option<usize>,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            min_count: 2,
            fractions: [0.8, 0.1, 0.1],
            patience: None,
            target_f1: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig { msg });
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return bad(format!("learning rate {} outside (0, 1)", self.lr));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.model.perspectives == 0 || self.model.pool_size == 0 {
            return bad("perspectives and pooling size must be positive".into());
        }
        if (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} do not sum to 1", self.fractions));
        }
        Ok(())
    }
}

/// Confusion counts and derived scores; HIGH is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = tp + fp + fn_ + tn;
        let accuracy = if total == 0 { 0.0 } else { (tp + tn) as f64 / total as f64 };
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { tp, fp, fn_, tn, accuracy, precision, recall, f1 }
    }
}

/// Accuracy of always predicting the more frequent class.
pub fn majority_baseline_accuracy(inputs: &[ModelInput]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let high = inputs.iter().filter(|i| i.label == Label::High).count();
    high.max(inputs.len() - high) as f64 / inputs.len() as f64
}

#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub vocab: Vocabulary,
    pub train: Vec<ModelInput>,
    pub valid: Vec<ModelInput>,
    pub test: Vec<ModelInput>,
}

/// Length-filters and splits a corpus at news granularity, so no comment is
/// a target in one split and a surrounding in another.
pub fn split_corpus(
    corpus: Corpus,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<NewsExample>; 3], TrainError> {
    let (corpus, _) = filter_lengths(corpus);
    let idx = split_news(corpus.news.len(), fractions, seed)?;
    Ok(idx.map(|ids| ids.into_iter().map(|i| corpus.news[i].clone()).collect()))
}

/// One model input per comment across the given news items.
pub fn make_inputs(
    news: &[NewsExample],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Vec<ModelInput> {
    let mut out = Vec::new();
    for (ni, item) in news.iter().enumerate() {
        for inst in make_instances(item, ni, config.k, SurroundingPolicy::Nearest) {
            out.push(prepare_input(&inst, vocab, config));
        }
    }
    out
}

/// Splits, builds the vocabulary from the train split only, and encodes
/// every split to model inputs.
pub fn prepare_splits(corpus: Corpus, config: &TrainConfig) -> Result<PreparedSplits, TrainError> {
    let [train_news, valid_news, test_news] =
        split_corpus(corpus, config.fractions, config.seed)?;
    if train_news.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    let vocab = build_vocab(&train_news, config.min_count)?;
    Ok(PreparedSplits {
        train: make_inputs(&train_news, &vocab, &config.model),
        valid: make_inputs(&valid_news, &vocab, &config.model),
        test: make_inputs(&test_news, &vocab, &config.model),
        vocab,
    })
}

/// Adam with bias correction; standard moment decay rates.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
}

pub struct TrainOutcome {
    /// Best-validation-F1 parameters, already rounded through checkpoint
    /// precision so a reload reproduces `best_valid` exactly.
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: Metrics,
}

/// Metrics over a set of inputs at the argmax decision threshold; with
/// `by_type`, additionally one entry per news type.
pub fn evaluate(
    model: &Model,
    inputs: &[ModelInput],
    by_type: bool,
) -> Result<(Metrics, Option<BTreeMap<String, Metrics>>), TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptySplit { split: "evaluation" });
    }
    let mut counts = [0usize; 4]; // tp fp fn tn
    let mut grouped: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for input in inputs {
        let p = predict_high(model, input)?;
        let pred_high = p > 0.5;
        let is_high = class_index(input.label) == HIGH_CLASS;
        let slot = match (pred_high, is_high) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts[slot] += 1;
        if by_type {
            grouped.entry(input.news_type.clone()).or_default()[slot] += 1;
        }
    }
    let overall = Metrics::from_counts(counts[0], counts[1], counts[2], counts[3]);
    let per_type = by_type.then(|| {
        grouped
            .into_iter()
            .map(|(t, c)| (t, Metrics::from_counts(c[0], c[1], c[2], c[3])))
            .collect()
    });
    Ok((overall, per_type))
}

/// Runs the optimization loop on already-prepared splits, starting from the
/// given parameters. The best epoch is chosen by validation F1 (falling back
/// to the train split when the validation split is empty).
pub fn train_prepared(
    mut model: Model,
    splits: &PreparedSplits,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    let eval_inputs: &[ModelInput] =
        if splits.valid.is_empty() { &splits.train } else { &splits.valid };

    let mut adam = Adam::new(config.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xd409));

    let mut log = Vec::new();
    let mut best: Option<(Model, usize, Metrics)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let tape = Tape::new();
                let nodes = leaf_params(&tape, &model.params);
                let loss = forward_loss(
                    &tape,
                    &nodes,
                    &model.config,
                    &splits.train[i],
                    true,
                    &mut dropout_rng,
                )?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(TrainError::Diverged { epoch: epoch + 1 });
                }
                loss_sum += loss_val;
                let grads = tape.backward(loss);
                for (name, node) in &nodes {
                    if let Some(g) = grads.get(*node) {
                        let acc = grad_acc.entry(name.clone()).or_insert_with(|| {
                            Tensor::zeros(g.shape().to_vec())
                        });
                        for (a, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gi * scale;
                        }
                    }
                }
            }
            // the PAD embedding stays fixed at zero
            if let Some(g) = grad_acc.get_mut("embedding") {
                let d = g.cols();
                g.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].fill(0.0);
            }
            adam.step(&mut model.params, &grad_acc);
        }

        // metrics are computed after rounding through checkpoint precision,
        // so the values logged for the saved model are reproducible
        let mut snapshot = model.clone();
        round_params_to_f32(&mut snapshot.params);
        let (valid, _) = evaluate(&snapshot, eval_inputs, false)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / splits.train.len() as f64,
            valid,
        });

        let improved = best.as_ref().map_or(true, |(_, _, m)| valid.f1 > m.f1);
        if improved {
            best = Some((snapshot, epoch + 1, valid));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.target_f1.is_some_and(|t| valid.f1 >= t) {
            break;
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    let (model, best_epoch, best_valid) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, vocab: splits.vocab.clone(), log, best_epoch, best_valid })
}

/// Prepares the corpus and trains a freshly initialized model.
pub fn train(corpus: Corpus, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let splits = prepare_splits(corpus, config)?;
    let model = Model::init(config.model.clone(), splits.vocab.len(), config.seed);
    train_prepared(model, &splits, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AblationMode {
    Full,
    NoTitle,
    NoAbstract,
    NoSurroundings,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] =
        [Self::Full, Self::NoTitle, Self::NoAbstract, Self::NoSurroundings];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoTitle => "noTitle",
            Self::NoAbstract => "noAbstract",
            Self::NoSurroundings => "noSurroundings",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }

    pub fn apply(self, config: &mut ModelConfig) {
        match self {
            Self::Full => {}
            Self::NoTitle => config.no_title = true,
            Self::NoAbstract => config.no_abstract = true,
            Self::NoSurroundings => config.no_surroundings = true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub ablation: String,
    pub k: usize,
    pub ps: usize,
    pub best_epoch: usize,
    pub valid: Metrics,
    pub test: Metrics,
}

/// Trains one model per grid cell (ablation x K x ps), every cell with the
/// same seed, and reports validation and test metrics per row. Rows follow
/// grid order, so the report is deterministic given seed and corpus.
pub fn ablation_sweep(
    corpus: &Corpus,
    base: &TrainConfig,
    ablations: &[AblationMode],
    ks: &[usize],
    pss: &[usize],
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(ablations.len() * ks.len() * pss.len());
    for &ablation in ablations {
        for &k in ks {
            for &ps in pss {
                let mut config = base.clone();
                config.model.k = k;
                config.model.pool_size = ps;
                ablation.apply(&mut config.model);
                let splits = prepare_splits(corpus.clone(), &config)?;
                let model = Model::init(config.model.clone(), splits.vocab.len(), config.seed);
                let outcome = train_prepared(model, &splits, &config)?;
                let test_inputs: &[ModelInput] =
                    if splits.test.is_empty() { &splits.valid } else { &splits.test };
                let (test, _) = evaluate(
                    &outcome.model,
                    if test_inputs.is_empty() { &splits.train } else { test_inputs },
                    false,
                )?;
                rows.push(SweepRow {
                    ablation: ablation.name().into(),
                    k,
                    ps,
                    best_epoch: outcome.best_epoch,
                    valid: outcome.best_valid,
                    test,
                });
            }
        }
    }
    Ok(rows)
}

/// The K and ps row sets of the published sweep tables.
pub const PAPER_KS: [usize; 4] = [0, 1, 3, 5];
pub const PAPER_PSS: [usize; 4] = [1, 2, 3, 4];
