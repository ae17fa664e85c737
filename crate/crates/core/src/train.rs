//! Training loop, evaluation and the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::data::{encode_item, EncodedItem, McqItem, SimpleTokenizer, Tokenizer, TruncationCaps, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::heads::{loss_scales, multitask_loss, LossBreakdown, Strategy, TaskMode, DEFAULT_MAX_LEN};
use crate::metrics::{generation_metrics, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{build_context, CorpusIndex, RetrievalMode, DEFAULT_CONTEXT_K};
use crate::tensor::Matrix;

/// Every knob of a training run. Deserializes from a flat `key = value`
/// file; missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub context_cap: usize,
    pub question_cap: usize,
    pub option_cap: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: TaskMode,
    pub viwordformer: bool,
    pub phrasal_per_layer: bool,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub init_std: f64,
    pub retrieval_k: usize,
    /// Share of the training file held out for early stopping when no dev
    /// file is given.
    pub dev_fraction: f64,
    /// Token budget for explanations generated at evaluation time.
    pub max_explanation_len: usize,
    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub index_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let caps = TruncationCaps::default();
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            context_cap: caps.context,
            question_cap: caps.question,
            option_cap: caps.option,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            mode: TaskMode::Multitask,
            viwordformer: model.viwordformer,
            phrasal_per_layer: model.phrasal_per_layer,
            d_model: model.d_model,
            layers: model.layers,
            heads: model.heads,
            decoder_layers: model.decoder_layers,
            init_std: model.init_std,
            retrieval_k: DEFAULT_CONTEXT_K,
            dev_fraction: 0.1,
            max_explanation_len: DEFAULT_MAX_LEN,
            train_file: None,
            dev_file: None,
            test_file: None,
            index_file: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_file, &mut cfg.dev_file, &mut cfg.test_file, &mut cfg.index_file, &mut cfg.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Invalid("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Invalid("max_epochs must be at least 1".into()));
        }
        if self.retrieval_k < 1 {
            return Err(Error::Invalid("retrieval_k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Invalid("dev_fraction must be in [0, 1)".into()));
        }
        self.caps().validate()?;
        self.model_config().validate()
    }

    pub fn caps(&self) -> TruncationCaps {
        TruncationCaps { context: self.context_cap, question: self.question_cap, option: self.option_cap }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            decoder_layers: self.decoder_layers,
            viwordformer: self.viwordformer,
            phrasal_per_layer: self.phrasal_per_layer,
            init_std: self.init_std,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in
                p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the best metric is `patience` epochs old.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Gives every item without a context one built from the top-`k` units of
/// its subject (hybrid retrieval). Items that end up with no context are an
/// error naming the item.
pub fn attach_contexts(items: &[McqItem], index: Option<&CorpusIndex>, k: usize, cap: usize) -> Result<Vec<McqItem>> {
    items
        .iter()
        .map(|it| {
            if it.context.as_deref().is_some_and(|c| !c.trim().is_empty()) {
                return Ok(it.clone());
            }
            let index = index.ok_or_else(|| Error::Invalid(format!("item {} has no context and no index was given", it.id)))?;
            let ranked = index.retrieve(&it.id, &it.question, &it.options, it.subject, k, RetrievalMode::Rrf)?;
            let (context, empty) = build_context(&ranked, index.units(), k, cap)?;
            if empty {
                return Err(Error::Invalid(format!("item {}: retrieval produced no context", it.id)));
            }
            Ok(McqItem { context: Some(context), ..it.clone() })
        })
        .collect()
}

/// Holds out `fraction` of `items` (at least one) by seeded shuffle.
pub fn split_dev(items: &[McqItem], fraction: f64, seed: u64) -> (Vec<McqItem>, Vec<McqItem>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de75));
    let dev_n = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().saturating_sub(1).max(1));
    let mut dev_idx: Vec<usize> = order[..dev_n].to_vec();
    dev_idx.sort_unstable();
    let dev_set: std::collections::HashSet<usize> = dev_idx.iter().copied().collect();
    let train = (0..items.len()).filter(|i| !dev_set.contains(i)).map(|i| items[i].clone()).collect();
    let dev = dev_idx.into_iter().map(|i| items[i].clone()).collect();
    (train, dev)
}

pub fn encode_items(items: &[McqItem], vocab: &Vocabulary, caps: &TruncationCaps) -> Vec<EncodedItem> {
    items.iter().map(|it| encode_item(it, vocab, &SimpleTokenizer, caps)).collect()
}

/// Share of non-reserved tokens that map to UNK.
pub fn unknown_rate(items: &[EncodedItem]) -> f64 {
    let mut total = 0usize;
    let mut unknown = 0usize;
    for it in items {
        let seqs = std::iter::once(&it.question).chain(&it.options).chain(std::iter::once(&it.context));
        for s in seqs {
            total += s.len();
            unknown += s.ids.iter().filter(|&&id| id == UNK).count();
        }
    }
    if total == 0 {
        0.0
    } else {
        unknown as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev_accuracy: f64,
    pub dev_f1: f64,
    pub improved: bool,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>3}  L_MC {:.6}  L_E {:.6}  dev_acc {:.4}  dev_f1 {:.4}{}",
            self.epoch,
            self.loss.mc,
            self.loss.explanation,
            self.dev_accuracy,
            self.dev_f1,
            if self.improved { "  *" } else { "" }
        )
    }
}

pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
}

/// One optimization step over `batch`; returns the batch loss terms.
pub fn train_batch(model: &mut Model, adam: &mut Adam, batch: &[&EncodedItem], mode: TaskMode) -> Result<Vec<crate::heads::ItemLoss>> {
    let with_expl = match mode {
        TaskMode::Single => 0,
        TaskMode::Multitask => batch.iter().filter(|it| it.explanation.is_some()).count(),
    };
    let (mc_scale, e_scale) = loss_scales(batch.len(), with_expl);
    let results: Vec<Result<_>> = batch.par_iter().map(|it| model.item_gradients(it, mode, mc_scale, e_scale)).collect();
    let mut total = Gradients::zeros_like(&model.store);
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (loss, grads) = r?;
        total.accumulate(&grads);
        losses.push(loss);
    }
    adam.step(&mut model.store, &total);
    Ok(losses)
}

/// Predicted answer indices, in item order.
pub fn predict_answers(model: &Model, items: &[EncodedItem]) -> Result<Vec<usize>> {
    items.par_iter().map(|it| model.predict(it, None).map(|p| p.answer)).collect()
}

/// Trains with Adam and early stopping on dev F1-macro. `log` sees every
/// epoch as it finishes.
pub fn train(
    config: &TrainConfig,
    train_items: &[McqItem],
    dev_items: Option<&[McqItem]>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_raw, dev_raw) = match dev_items {
        Some(dev) => (train_items.to_vec(), dev.to_vec()),
        None => split_dev(train_items, config.dev_fraction, config.seed),
    };
    if train_raw.is_empty() || dev_raw.is_empty() {
        return Err(Error::Invalid("training needs at least one train and one dev item".into()));
    }
    let vocab = Vocabulary::from_items(&SimpleTokenizer, &train_raw);
    let caps = config.caps();
    let train_enc = encode_items(&train_raw, &vocab, &caps);
    let dev_enc = encode_items(&dev_raw, &vocab, &caps);
    let dev_gold: Vec<usize> = dev_enc.iter().map(|it| it.answer).collect();
    let mut model = Model::new(config.model_config(), vocab, config.seed)?;
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_store = model.store.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedItem> = chunk.iter().map(|&i| &train_enc[i]).collect();
            let batch_losses = match train_batch(&mut model, &mut adam, &batch, config.mode) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, batch: b }),
                other => other?,
            };
            if !model.store.iter().all(|(_, _, m)| m.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            losses.extend(batch_losses);
        }
        let loss = multitask_loss(&losses, config.mode);
        let pred = predict_answers(&model, &dev_enc)?;
        let (dev_accuracy, dev_f1) = crate::metrics::classification_metrics(&dev_gold, &pred)?;
        let decision = stopper.observe(epoch, dev_f1);
        if decision == StopDecision::Improved {
            best_store = model.store.clone();
        }
        let entry = EpochLog { epoch, loss, dev_accuracy, dev_f1, improved: decision == StopDecision::Improved };
        log(&entry);
        history.push(entry);
        if decision == StopDecision::Stop {
            break;
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        model,
        best_epoch: stopper.best_epoch,
        best_dev_f1: stopper.best.unwrap_or(0.0),
        epochs_run: history.len(),
        history,
    })
}

/// One line of the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: char,
    pub probabilities: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Scores `items` (contexts attached) and, when `explain` is set, generates
/// and scores explanations. Fails when most test tokens are unknown to the
/// model's vocabulary.
pub fn evaluate(model: &Model, items: &[McqItem], caps: &TruncationCaps, explain: Option<(usize, Strategy)>) -> Result<Evaluation> {
    let encoded = encode_items(items, &model.vocab, caps);
    let unk = unknown_rate(&encoded);
    if unk > 0.5 {
        return Err(Error::Invalid(format!(
            "vocabulary mismatch: {:.0}% of test tokens are unknown to the checkpoint",
            unk * 100.0
        )));
    }
    let preds: Vec<_> = encoded.par_iter().map(|it| model.predict(it, explain)).collect::<Result<_>>()?;
    let gold: Vec<usize> = encoded.iter().map(|it| it.answer).collect();
    let answers: Vec<usize> = preds.iter().map(|p| p.answer).collect();
    let subjects: Vec<String> = items.iter().map(|it| it.subject.to_string()).collect();
    let grades: Vec<String> = items.iter().map(|it| it.grade.to_string()).collect();
    let mut report = MetricReport::build(&gold, &answers, &subjects, &grades)?;
    let texts: Vec<Option<String>> =
        preds.iter().map(|p| p.explanation.as_ref().map(|ids| model.vocab.decode(ids))).collect();
    if explain.is_some() {
        let hyps: Vec<Vec<String>> = texts.iter().map(|t| SimpleTokenizer.split(t.as_deref().unwrap_or(""))).collect();
        let refs: Vec<Vec<String>> = items.iter().map(|it| SimpleTokenizer.split(it.explanation.as_deref().unwrap_or(""))).collect();
        report.generation = Some(generation_metrics(&hyps, &refs)?);
    }
    let predictions = items
        .iter()
        .zip(preds)
        .zip(texts)
        .map(|((it, p), text)| PredictionRecord {
            id: it.id.clone(),
            predicted: crate::data::answer_letter(p.answer),
            probabilities: p.probabilities,
            explanation: text,
        })
        .collect();
    Ok(Evaluation { report, predictions })
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.patience), (5e-5, 32, 10));
        assert_eq!((c.context_cap, c.question_cap, c.option_cap), (400, 80, 20));
        assert_eq!(c.max_epochs, 200);
    }

    #[test]
    fn config_file_overrides_and_rejects_typos() {
        let c = TrainConfig::parse("learning_rate = 0.001\nmode = \"single\"\nviwordformer = false\n").unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.mode, TaskMode::Single);
        assert!(!c.viwordformer);
        assert_eq!(c.batch_size, 32);
        assert!(TrainConfig::parse("learnin_rate = 1.0").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("learning_rate = -1.0").is_err());
    }

    #[test]
    fn patience_one_stops_after_one_stale_epoch() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.5), StopDecision::Stop);
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn stops_exactly_when_best_is_patience_epochs_old() {
        let mut s = EarlyStopping::new(3);
        let metrics = [0.1, 0.3, 0.2, 0.3, 0.25];
        let decisions: Vec<_> = metrics.iter().enumerate().map(|(i, &m)| s.observe(i + 1, m)).collect();
        use StopDecision::*;
        assert_eq!(decisions, [Improved, Improved, Continue, Continue, Stop]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, 0.1);
        let mut g = Gradients::zeros_like(&store);
        g.set(id, Matrix::row_vector(&[3.0, -0.001, 0.0]));
        adam.step(&mut store, &g);
        let w = store.get(id).row(0).to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - -1.9).abs() < 1e-4);
        assert_eq!(w[2], 0.5);
        let none = Gradients::zeros_like(&store);
        adam.step(&mut store, &none);
        assert_eq!(store.get(id).row(0), w.as_slice());
    }

    #[test]
    fn dev_split_is_seeded_and_disjoint() {
        let items = crate::synth::synth_items(&crate::synth::SynthConfig { items: 50, seed: 2, ..Default::default() }).unwrap();
        let (a, b) = split_dev(&items, 0.1, 4);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(split_dev(&items, 0.1, 4).1, b);
        assert!(b.iter().all(|d| !a.iter().any(|t| t.id == d.id)));
    }
}
