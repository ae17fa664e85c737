//! Answer selection and explanation generation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, AttnMask, Graph, ParamId, ParamStore, Var};
use crate::data::{BOS, EOS, NUM_OPTIONS};
use crate::encoder::{normal_param, FeedForward, Linear, MultiHeadAttention, Norm};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Whether the explanation loss is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Single,
    Multitask,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Single => "single",
            TaskMode::Multitask => "multitask",
        })
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" => Ok(TaskMode::Single),
            "multitask" | "multi" => Ok(TaskMode::Multitask),
            other => Err(Error::Parse(format!("unknown mode {other:?} (expected single or multitask)"))),
        }
    }
}

/// `s_k = W_sᵀ maxpool(f_k)`, returned as a `1 × 4` row.
pub fn option_scores(g: &mut Graph<'_>, finals: &[Var; NUM_OPTIONS], w_s: ParamId) -> Result<Var> {
    let w = g.param(w_s);
    let mut scores = Vec::with_capacity(NUM_OPTIONS);
    for (k, &f) in finals.iter().enumerate() {
        if g.value(f).rows() == 0 {
            return Err(Error::Invalid(format!("option {k} has no tokens to pool")));
        }
        let pooled = g.col_max(f);
        scores.push(g.matmul(pooled, w));
    }
    Ok(g.concat_cols(&scores))
}

pub fn option_probabilities(scores: &[f64; NUM_OPTIONS]) -> [f64; NUM_OPTIONS] {
    let mut p = *scores;
    softmax_in_place(&mut p, |_| true);
    p
}

/// Argmax with ties going to the lowest index.
pub fn select_option(probs: &[f64; NUM_OPTIONS]) -> usize {
    let mut best = 0;
    for k in 1..NUM_OPTIONS {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Gold,
    Predicted,
}

/// The option whose features go into the decoder memory.
pub fn designated_option(mode: MemoryMode, gold: usize, predicted: usize) -> usize {
    match mode {
        MemoryMode::Gold => gold,
        MemoryMode::Predicted => predicted,
    }
}

/// `[f_Q ; f_P ; f_k]` along the sequence axis. `slot` (a `1 × d` row) is
/// added to every row of `f_k` so the decoder can tell which option it is
/// explaining.
pub fn decoder_memory(g: &mut Graph<'_>, fq: Var, fp: Var, fk: Var, slot: Option<Var>) -> Result<Var> {
    if g.value(fp).rows() == 0 {
        return Err(Error::EmptyContext);
    }
    let d = g.value(fp).cols();
    if g.value(fq).cols() != d || g.value(fk).cols() != d {
        return Err(Error::Shape("decoder memory parts differ in width".into()));
    }
    let fk = match slot {
        Some(s) => g.add_row(fk, s),
        None => fk,
    };
    let parts: Vec<Var> = [fq, fp, fk].into_iter().filter(|&v| g.value(v).rows() > 0).collect();
    Ok(g.concat_rows(&parts))
}

/// Sinusoidal position encodings for positions `0..n`.
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: MultiHeadAttention,
    pub norm2: Norm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: Norm,
    pub ffn: FeedForward,
}

/// Pre-norm transformer decoder over a token embedding table shared with the
/// encoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    pub option_slots: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Norm,
    pub output: Linear,
    pub d_model: usize,
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

pub const DEFAULT_MAX_LEN: usize = 300;

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        embedding: ParamId,
        heads: usize,
        layers: usize,
        ffn_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Invalid("the decoder needs at least one layer".into()));
        }
        let (vocab, d) = store.get(embedding).shape();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("d_model {d} not divisible by heads {heads}")));
        }
        let option_slots = normal_param(store, format!("{prefix}.option_slots"), NUM_OPTIONS, d, 1.0, rng);
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                DecoderLayer {
                    norm1: Norm::new(store, &format!("{p}.norm1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, std, rng),
                    norm2: Norm::new(store, &format!("{p}.norm2"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, heads, std, rng),
                    norm3: Norm::new(store, &format!("{p}.norm3"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_dim, std, rng),
                }
            })
            .collect();
        Ok(Self {
            embedding,
            option_slots,
            layers,
            final_norm: Norm::new(store, &format!("{prefix}.final_norm"), d),
            output: Linear::new(store, &format!("{prefix}.output"), d, vocab, std, rng),
            d_model: d,
        })
    }

    /// The `1 × d` slot row for option `k`.
    pub fn slot(&self, g: &mut Graph<'_>, k: usize) -> Var {
        let table = g.param(self.option_slots);
        g.gather(table, &[k])
    }

    /// Next-token logits for every position of `inputs` (`T × |V|`).
    pub fn logits(&self, g: &mut Graph<'_>, memory: Var, inputs: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        let vocab = g.value(table).rows();
        if let Some(&id) = inputs.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, size: vocab });
        }
        let emb = g.gather(table, inputs);
        let pe = g.input(positional_encoding(inputs.len(), self.d_model));
        let mut x = g.add(emb, pe);
        let causal = AttnMask::causal();
        let open = AttnMask::none();
        for layer in &self.layers {
            let h = layer.norm1.apply(g, x);
            let (a, _) = layer.self_attn.forward(g, h, h, &causal);
            x = g.add(x, a);
            let h = layer.norm2.apply(g, x);
            let (c, _) = layer.cross_attn.forward(g, h, memory, &open);
            x = g.add(x, c);
            let h = layer.norm3.apply(g, x);
            let f = layer.ffn.apply(g, h);
            x = g.add(x, f);
        }
        let h = self.final_norm.apply(g, x);
        Ok(self.output.apply(g, h))
    }

    /// Summed teacher-forced negative log-likelihood of `tokens` followed by
    /// EOS, as a `1 × 1` node.
    pub fn explanation_nll(&self, g: &mut Graph<'_>, memory: Var, tokens: &[usize]) -> Result<Var> {
        let (inputs, targets) = teacher_forcing_pair(tokens);
        let logits = self.logits(g, memory, &inputs)?;
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Log-probabilities of the next token after `prefix` (which excludes BOS).
    pub fn next_log_probs(&self, store: &ParamStore, memory: &Matrix, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let mem = g.input(memory.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let logits = self.logits(&mut g, mem, &inputs)?;
        let last = g.value(logits).row(inputs.len() - 1);
        let lse = log_sum_exp(last);
        Ok(last.iter().map(|v| v - lse).collect())
    }

    /// Generates an explanation (without EOS) from `memory`.
    pub fn decode(&self, store: &ParamStore, memory: &Matrix, max_len: usize, strategy: Strategy) -> Result<Vec<usize>> {
        if max_len < 1 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        match strategy {
            Strategy::Greedy => self.greedy(store, memory, max_len),
            Strategy::Beam(width) => self.beam(store, memory, max_len, width),
        }
    }

    fn greedy(&self, store: &ParamStore, memory: &Matrix, max_len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_log_probs(store, memory, &out)?;
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    fn beam(&self, store: &ParamStore, memory: &Matrix, max_len: usize, width: usize) -> Result<Vec<usize>> {
        if width == 0 {
            return Err(Error::Invalid("beam width must be at least 1".into()));
        }
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            done: bool,
        }
        let mut beams = vec![Hyp { tokens: Vec::new(), score: 0.0, done: false }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next = Vec::new();
            for b in beams {
                if b.done {
                    next.push(b);
                    continue;
                }
                let lp = self.next_log_probs(store, memory, &b.tokens)?;
                for tok in top_indices(&lp, width) {
                    let mut tokens = b.tokens.clone();
                    let done = tok == EOS;
                    if !done {
                        tokens.push(tok);
                    }
                    next.push(Hyp { tokens, score: b.score + lp[tok], done });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
            next.truncate(width);
            beams = next;
        }
        Ok(beams.into_iter().next().map(|b| b.tokens).unwrap_or_default())
    }
}

/// Decoder inputs `[BOS, w_1..w_T]` and targets `[w_1..w_T, EOS]`.
pub fn teacher_forcing_pair(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(tokens.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    (inputs, targets)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-item loss terms: the answer cross-entropy and, when the item has an
/// explanation and the mode trains one, its summed token NLL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemLoss {
    pub mc: f64,
    pub explanation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mc: f64,
    pub explanation: f64,
    pub total: f64,
    /// Items without an explanation in multitask mode.
    pub missing_explanations: usize,
}

/// Weights applied to each item's terms so that summing per-item gradients
/// gives the gradient of the batch loss: `(1/N, 1/N_E)`.
pub fn loss_scales(items: usize, with_explanation: usize) -> (f64, f64) {
    let n = items.max(1) as f64;
    let ne = with_explanation.max(1) as f64;
    (1.0 / n, 1.0 / ne)
}

/// `L_MC = −(1/N) Σ ln p(k*)`, `L_E` = mean over explained items of the
/// summed token NLL, `L = L_MC + L_E`.
pub fn multitask_loss(items: &[ItemLoss], mode: TaskMode) -> LossBreakdown {
    let mc = items.iter().map(|i| i.mc).sum::<f64>() / items.len().max(1) as f64;
    let (explanation, missing) = match mode {
        TaskMode::Single => (0.0, 0),
        TaskMode::Multitask => {
            let present: Vec<f64> = items.iter().filter_map(|i| i.explanation).collect();
            let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
            (mean, items.len() - present.len())
        }
    };
    LossBreakdown { mc, explanation, total: mc + explanation, missing_explanations: missing }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_scorer_gives_zero_scores() {
        let mut store = ParamStore::new();
        let ws = store.add("w_s", Matrix::zeros(3, 1));
        let mut g = Graph::new(&store);
        let finals = [0, 1, 2, 3].map(|s| g.input(Matrix::random_normal(2, 3, 1.0, &mut rng(s))));
        let s = option_scores(&mut g, &finals, ws).unwrap();
        assert_eq!(g.value(s), &Matrix::zeros(1, 4));
    }

    #[test]
    fn scores_match_a_column_max_loop() {
        let mut store = ParamStore::new();
        let wm = Matrix::random_normal(3, 1, 1.0, &mut rng(9));
        let ws = store.add("w_s", wm.clone());
        let mut g = Graph::new(&store);
        let mats: Vec<Matrix> = (0..4).map(|s| Matrix::random_normal(5, 3, 1.0, &mut rng(s))).collect();
        let finals = [0, 1, 2, 3].map(|k| g.input(mats[k].clone()));
        let s = option_scores(&mut g, &finals, ws).unwrap();
        for (k, m) in mats.iter().enumerate() {
            let mut want = 0.0;
            for c in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for r in 0..5 {
                    best = best.max(m[(r, c)]);
                }
                want += best * wm[(c, 0)];
            }
            assert!((g.value(s)[(0, k)] - want).abs() < 1e-12);
        }
        let empty = g.input(Matrix::zeros(0, 3));
        assert!(option_scores(&mut g, &[finals[0], empty, finals[2], finals[3]], ws).is_err());
    }

    #[test]
    fn probabilities_and_selection() {
        assert_eq!(option_probabilities(&[0.0; 4]), [0.25; 4]);
        let p = option_probabilities(&[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        for (a, b) in p.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(select_option(&p), 3);
        assert_eq!(select_option(&[0.25; 4]), 0);
        let shifted = option_probabilities(&[1.0 + 7.5, 2.0 + 7.5, -1.0 + 7.5, 0.5 + 7.5]);
        let base = option_probabilities(&[1.0, 2.0, -1.0, 0.5]);
        for (a, b) in shifted.iter().zip(base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_stacks_question_context_option() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fq = g.input(Matrix::filled(3, 2, 1.0));
        let fp = g.input(Matrix::filled(5, 2, 2.0));
        let fk = g.input(Matrix::filled(4, 2, 3.0));
        let m = decoder_memory(&mut g, fq, fp, fk, None).unwrap();
        assert_eq!(g.value(m).rows(), 12);
        assert_eq!(g.value(m)[(0, 0)], 1.0);
        assert_eq!(g.value(m)[(3, 0)], 2.0);
        assert_eq!(g.value(m)[(8, 0)], 3.0);
        let none = g.input(Matrix::zeros(0, 2));
        assert!(matches!(decoder_memory(&mut g, fq, none, fk, None), Err(Error::EmptyContext)));
        assert_eq!(designated_option(MemoryMode::Gold, 2, 2), designated_option(MemoryMode::Predicted, 2, 2));
    }

    #[test]
    fn loss_oracles() {
        let uniform = ItemLoss { mc: -(0.25f64.ln()), explanation: Some(3.0 * 8f64.ln()) };
        let lb = multitask_loss(&[uniform], TaskMode::Multitask);
        assert!((lb.mc - 1.386294).abs() < 1e-6);
        assert!((lb.explanation - 6.238325).abs() < 1e-6);
        assert_eq!(lb.total, lb.mc + lb.explanation);
        assert_eq!(multitask_loss(&[uniform], TaskMode::Single).explanation, 0.0);
        let missing = multitask_loss(&[uniform, ItemLoss { mc: 0.0, explanation: None }], TaskMode::Multitask);
        assert_eq!(missing.missing_explanations, 1);
        assert!((missing.explanation - 3.0 * 8f64.ln()).abs() < 1e-12);
    }

    fn decoder(vocab: usize, d: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let emb = store.add("emb", Matrix::random_normal(vocab, d, 1.0, &mut rng(1)));
        let dec = Decoder::new(&mut store, "dec", emb, 2, 2, 2 * d, 0.3, &mut rng(2)).unwrap();
        (store, dec)
    }

    #[test]
    fn eos_biased_decoder_is_silent() {
        let (mut store, dec) = decoder(8, 4);
        let mut bias = Matrix::zeros(1, 8);
        bias[(0, EOS)] = 1e3;
        store.set(dec.output.bias, bias);
        let mem = Matrix::random_normal(3, 4, 1.0, &mut rng(3));
        assert!(dec.decode(&store, &mem, 10, Strategy::Greedy).unwrap().is_empty());
        assert!(dec.decode(&store, &mem, 0, Strategy::Greedy).is_err());
    }

    #[test]
    fn greedy_is_beam_of_one_and_stepwise_argmax() {
        let (store, dec) = decoder(12, 4);
        let mem = Matrix::random_normal(5, 4, 1.0, &mut rng(4));
        let greedy = dec.decode(&store, &mem, 6, Strategy::Greedy).unwrap();
        assert_eq!(greedy, dec.decode(&store, &mem, 6, Strategy::Beam(1)).unwrap());
        for t in 0..greedy.len() {
            let lp = dec.next_log_probs(&store, &mem, &greedy[..t]).unwrap();
            assert!(lp.iter().all(|&v| v <= lp[greedy[t]]));
        }
        let beam = dec.decode(&store, &mem, 6, Strategy::Beam(3)).unwrap();
        assert!(beam.len() <= 6);
    }

    #[test]
    fn explanation_nll_matches_stepwise_log_probs() {
        let (store, dec) = decoder(10, 4);
        let mem_m = Matrix::random_normal(4, 4, 1.0, &mut rng(5));
        let tokens = [5, 7, 4];
        let mut g = Graph::new(&store);
        let mem = g.input(mem_m.clone());
        let nll = dec.explanation_nll(&mut g, mem, &tokens).unwrap();
        let mut want = 0.0;
        let (_, targets) = teacher_forcing_pair(&tokens);
        for (t, &tok) in targets.iter().enumerate() {
            want -= dec.next_log_probs(&store, &mem_m, &tokens[..t]).unwrap()[tok];
        }
        assert!((g.value(nll)[(0, 0)] - want).abs() < 1e-10);
    }

    #[test]
    fn uniform_decoder_costs_log_vocab_per_token() {
        let (mut store, dec) = decoder(8, 4);
        store.set(dec.output.weight, Matrix::zeros(4, 8));
        let mut g = Graph::new(&store);
        let mem = g.input(Matrix::random_normal(2, 4, 1.0, &mut rng(6)));
        // Two words plus EOS: three predicted tokens.
        let nll = dec.explanation_nll(&mut g, mem, &[4, 5]).unwrap();
        assert!((g.value(nll)[(0, 0)] - 3.0 * 8f64.ln()).abs() < 1e-12);
    }
}
