//! The full reader: shared encoder, option comparison, answer scorer and
//! explanation decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::data::{EncodedItem, Vocabulary, NUM_OPTIONS};
use crate::encoder::{normal_param, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{
    decoder_memory, designated_option, option_probabilities, option_scores, select_option, Decoder, ItemLoss, MemoryMode,
    Strategy, TaskMode,
};
use crate::inference::{infer_options, InferenceParams, OptionFeatures};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub decoder_layers: usize,
    pub viwordformer: bool,
    pub phrasal_per_layer: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, layers: 2, decoder_layers: 2, viwordformer: true, phrasal_per_layer: false, init_std: 0.02 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Invalid("decoder_layers must be at least 1".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Invalid("init_std must be non-negative".into()));
        }
        Ok(())
    }

    fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(vocab_size, self.d_model, self.heads, self.layers);
        cfg.viwordformer = self.viwordformer;
        cfg.phrasal_per_layer = self.phrasal_per_layer;
        cfg.init_std = self.init_std;
        cfg
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub inference: InferenceParams,
    pub scorer: ParamId,
    pub decoder: Decoder,
}

/// Every node of one item's forward pass.
pub struct ItemForward {
    pub question: Var,
    pub options: [Var; NUM_OPTIONS],
    pub context: Var,
    pub features: OptionFeatures,
    pub scores: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: usize,
    pub probabilities: [f64; NUM_OPTIONS],
    pub explanation: Option<Vec<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", config.encoder_config(vocab.len()), &mut rng)?;
        let inference = InferenceParams::new(&mut store, "inference", config.d_model, config.init_std, &mut rng);
        let scorer = normal_param(&mut store, "heads.w_s".into(), config.d_model, 1, config.init_std, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "heads.decoder",
            encoder.embedding,
            config.heads,
            config.decoder_layers,
            2 * config.d_model,
            config.init_std,
            &mut rng,
        )?;
        Ok(Self { config, vocab, store, encoder, inference, scorer, decoder })
    }

    /// Parameters belonging to one module: `viwordformer` (the encoder),
    /// `option_inference`, or `heads`.
    pub fn module_params(&self, module: &str) -> Result<Vec<ParamId>> {
        let prefix = match module {
            "viwordformer" | "encoder" => "encoder.",
            "option_inference" | "inference" => "inference.",
            "heads" => "heads.",
            other => return Err(Error::Invalid(format!("unknown module {other:?}"))),
        };
        Ok(self.store.iter().filter(|(_, name, _)| name.starts_with(prefix)).map(|(id, _, _)| id).collect())
    }

    fn check_item(&self, item: &EncodedItem) -> Result<()> {
        self.vocab.check_ids(&item.question.ids)?;
        for o in &item.options {
            self.vocab.check_ids(&o.ids)?;
        }
        self.vocab.check_ids(&item.context.ids)?;
        if let Some(e) = &item.explanation {
            self.vocab.check_ids(&e.ids)?;
        }
        if item.context.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, item: &EncodedItem) -> Result<ItemForward> {
        self.check_item(item)?;
        let encode = |g: &mut Graph<'_>, ids: &[usize]| self.encoder.forward(g, ids, ids.len());
        let question = encode(g, &item.question.ids)?;
        let mut options = Vec::with_capacity(NUM_OPTIONS);
        for o in &item.options {
            options.push(encode(g, &o.ids)?);
        }
        let options: [Var; NUM_OPTIONS] = options.try_into().expect("four options");
        let context = encode(g, &item.context.ids)?;
        let features = infer_options(g, &self.inference, question, &options, context)?;
        let scores = option_scores(g, &features.final_features(), self.scorer)?;
        Ok(ItemForward { question, options, context, features, scores })
    }

    /// Decoder memory for option `k`, including its slot embedding.
    pub fn memory(&self, g: &mut Graph<'_>, fwd: &ItemForward, k: usize) -> Result<Var> {
        let slot = self.decoder.slot(g, k);
        decoder_memory(g, fwd.question, fwd.context, fwd.features.finals[k].output, Some(slot))
    }

    /// One item's loss terms and the gradient of `mc_scale · L_MC,i +
    /// e_scale · L_E,i`.
    pub fn item_gradients(&self, item: &EncodedItem, mode: TaskMode, mc_scale: f64, e_scale: f64) -> Result<(ItemLoss, Gradients)> {
        let mut g = Graph::new(&self.store);
        let (loss, objective) = self.item_objective(&mut g, item, mode, mc_scale, e_scale)?;
        Ok((loss, g.backward(objective).into_params()))
    }

    /// The scaled per-item objective as a graph node, plus its unscaled terms.
    pub fn item_objective(
        &self,
        g: &mut Graph<'_>,
        item: &EncodedItem,
        mode: TaskMode,
        mc_scale: f64,
        e_scale: f64,
    ) -> Result<(ItemLoss, Var)> {
        let fwd = self.forward(g, item)?;
        let mc = g.cross_entropy(fwd.scores, &[item.answer]);
        let mc_value = g.value(mc)[(0, 0)];
        let mut objective = g.scale(mc, mc_scale);
        let mut explanation = None;
        if let (TaskMode::Multitask, Some(expl)) = (mode, &item.explanation) {
            let k = designated_option(MemoryMode::Gold, item.answer, item.answer);
            let memory = self.memory(g, &fwd, k)?;
            let nll = self.decoder.explanation_nll(g, memory, &expl.ids)?;
            explanation = Some(g.value(nll)[(0, 0)]);
            let scaled = g.scale(nll, e_scale);
            objective = g.add(objective, scaled);
        }
        if !g.value(objective).is_finite() {
            return Err(Error::NonFinite(format!("loss of item {}", item.id)));
        }
        Ok((ItemLoss { mc: mc_value, explanation }, objective))
    }

    /// Answer probabilities, the selected option, and optionally a generated
    /// explanation conditioned on the selected option.
    pub fn predict(&self, item: &EncodedItem, explain: Option<(usize, Strategy)>) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, item)?;
        let s = g.value(fwd.scores).row(0);
        let probabilities = option_probabilities(&[s[0], s[1], s[2], s[3]]);
        let answer = select_option(&probabilities);
        let explanation = match explain {
            Some((max_len, strategy)) => {
                let k = designated_option(MemoryMode::Predicted, item.answer, answer);
                let memory = self.memory(&mut g, &fwd, k)?;
                let memory: Matrix = g.value(memory).clone();
                Some(self.decoder.decode(&self.store, &memory, max_len, strategy)?)
            }
            None => None,
        };
        Ok(Prediction { answer, probabilities, explanation })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_item, Grade, McqItem, SimpleTokenizer, Subject, TruncationCaps};

    fn item() -> McqItem {
        McqItem {
            id: "x1".into(),
            subject: Subject::History,
            grade: Grade::Ten,
            question: "who won the battle".into(),
            options: ["ngo quyen".into(), "ly bi".into(), "le loi".into(), "tran hung dao".into()],
            answer: 0,
            explanation: Some("answer A because ngo quyen".into()),
            context: Some("ngo quyen won the battle of bach dang in 938".into()),
        }
    }

    fn model(viwordformer: bool) -> (Model, EncodedItem) {
        let it = item();
        let vocab = Vocabulary::from_items(&SimpleTokenizer, std::slice::from_ref(&it));
        let enc = encode_item(&it, &vocab, &SimpleTokenizer, &TruncationCaps::default());
        let cfg = ModelConfig { d_model: 8, heads: 2, layers: 1, decoder_layers: 1, viwordformer, ..ModelConfig::default() };
        (Model::new(cfg, vocab, 3).unwrap(), enc)
    }

    #[test]
    fn forward_produces_four_scores_and_a_prediction() {
        for vwf in [true, false] {
            let (m, it) = model(vwf);
            let p = m.predict(&it, Some((5, Strategy::Greedy))).unwrap();
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.explanation.unwrap().len() <= 5);
        }
    }

    #[test]
    fn multitask_adds_the_explanation_term() {
        let (m, it) = model(true);
        let (single, _) = m.item_gradients(&it, TaskMode::Single, 1.0, 1.0).unwrap();
        let (multi, grads) = m.item_gradients(&it, TaskMode::Multitask, 1.0, 1.0).unwrap();
        assert_eq!(single.mc, multi.mc);
        assert!(single.explanation.is_none() && multi.explanation.unwrap() > 0.0);
        assert!(grads.get(m.decoder.output.weight).is_some());
    }

    #[test]
    fn module_selectors_partition_the_store() {
        let (m, _) = model(true);
        let total: usize = ["viwordformer", "option_inference", "heads"].iter().map(|n| m.module_params(n).unwrap().len()).sum();
        assert_eq!(total, m.store.len());
        assert!(m.module_params("nope").is_err());
    }

    #[test]
    fn missing_context_is_reported() {
        let (m, mut it) = model(true);
        it.context = it.context.truncated(0);
        assert!(matches!(m.predict(&it, None), Err(Error::EmptyContext)));
    }
}
