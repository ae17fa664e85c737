//! Token encoder with phrasal-score-modulated self-attention.
//!
//! Each token `k` scores its right neighbor with a bilinear form
//! `r_k = f_kᵀ W_b f_{k+1}`. A token softmaxes over the scores of its (one or
//! two) neighbors, and the link strength between `k` and `k+1` is the
//! geometric mean of the two directed probabilities,
//! `P_k = sqrt(pr_{k,k+1} · pr_{k+1,k})`. The probability that a whole span
//! `i..=j` forms one phrase is the product of its links, computed in log
//! space as `P_ij = exp(Σ_{k=i}^{j−1} ln P_k)`. Attention weights are then
//! multiplied elementwise by `P`, so attention between tokens that are
//! unlikely to share a phrase is damped. Rows are not renormalized.
//!
//! The phrasal block sits between the embedding table and a stack of
//! ordinary pre-norm encoder layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_link_values, phrasal_from_log_links, AttnMask, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Apply the phrasal block after the embeddings.
    pub viwordformer: bool,
    /// Also apply a (separately parameterized) phrasal block before every
    /// encoder layer.
    pub phrasal_per_layer: bool,
    /// Layer-normalize the phrasal block's residual output.
    pub phrasal_norm: bool,
    pub init_std: f64,
    pub embed_std: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, d_model: usize, heads: usize, layers: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            heads,
            layers,
            ffn_dim: 2 * d_model,
            viwordformer: true,
            phrasal_per_layer: false,
            phrasal_norm: true,
            init_std: 0.02,
            embed_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }
}

pub(crate) fn normal_param<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
    store.add(name, Matrix::random_normal(rows, cols, std, rng))
}

/// Learned layer-norm gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, d)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_param(store, format!("{prefix}.weight"), input, output, std, rng),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, output)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// The phrasal attention block: bilinear link scorer plus Q/K/V maps.
#[derive(Debug, Clone, Copy)]
pub struct PhrasalBlock {
    pub w_b: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm: Option<Norm>,
    pub heads: usize,
}

impl PhrasalBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            w_b: store.add(format!("{prefix}.w_b"), Matrix::zeros(d, d)),
            w_q: normal_param(store, format!("{prefix}.w_q"), d, d, cfg.init_std, rng),
            w_k: normal_param(store, format!("{prefix}.w_k"), d, d, cfg.init_std, rng),
            w_v: normal_param(store, format!("{prefix}.w_v"), d, d, cfg.init_std, rng),
            norm: cfg.phrasal_norm.then(|| Norm::new(store, &format!("{prefix}.norm"), d)),
            heads: cfg.heads,
        }
    }

    /// `LN(f + (A ⊙ P)(f W_v))`, returning the output and the phrasal matrix.
    pub fn forward(&self, g: &mut Graph<'_>, f: Var, valid: usize) -> Result<(Var, Var)> {
        let w_b = g.param(self.w_b);
        let p = phrasal_scores(g, f, w_b, valid);
        let attended = phrasal_attention(g, f, self, p, valid)?.output;
        let residual = g.add(f, attended);
        let out = match self.norm {
            Some(norm) => norm.apply(g, residual),
            None => residual,
        };
        Ok((out, p))
    }
}

/// Bilinear neighbor scores `r_k = f_kᵀ W_b f_{k+1}` as an `(n−1) × 1` column.
pub fn link_scores(g: &mut Graph<'_>, f: Var, w_b: Var) -> Var {
    let n = g.value(f).rows();
    assert!(n >= 2, "link scores need two tokens");
    let fw = g.matmul(f, w_b);
    let left = g.slice_rows(fw, 0, n - 1);
    let right = g.slice_rows(f, 1, n - 1);
    g.row_dot(left, right)
}

/// The `n × n` phrasal score matrix of `f`. Only the first `valid` rows are
/// tokens; PAD entries are 1.
pub fn phrasal_scores(g: &mut Graph<'_>, f: Var, w_b: Var, valid: usize) -> Var {
    let n = g.value(f).rows();
    let valid = valid.min(n);
    if valid < 2 {
        return g.input(Matrix::filled(n, n, 1.0));
    }
    // Links are scored among real tokens only, so the last real token never
    // sees a PAD neighbor.
    let real = if valid < n { g.slice_rows(f, 0, valid) } else { f };
    let r = link_scores(g, real, w_b);
    let mut ll = g.log_links(r);
    if valid < n {
        let pad = g.input(Matrix::zeros(n - valid, 1));
        ll = g.concat_rows(&[ll, pad]);
    }
    g.phrasal_matrix(ll, valid)
}

/// Outputs of [`phrasal_attention`], with the per-head matrices kept for
/// inspection.
pub struct AttentionTrace {
    pub output: Var,
    /// Row-stochastic attention per head, before modulation.
    pub raw: Vec<Var>,
    /// `A ⊙ P` per head.
    pub modulated: Vec<Var>,
}

/// Multi-head self-attention whose weights are multiplied by `p`, shared
/// across heads. Scores use `1/√d`.
pub fn phrasal_attention(g: &mut Graph<'_>, f: Var, block: &PhrasalBlock, p: Var, valid: usize) -> Result<AttentionTrace> {
    if !g.value(f).is_finite() {
        return Err(Error::NonFinite("phrasal attention input".into()));
    }
    if !g.value(p).is_finite() {
        return Err(Error::NonFinite("phrasal score matrix".into()));
    }
    let (n, d) = g.value(f).shape();
    let dh = d / block.heads;
    let (wq, wk, wv) = (g.param(block.w_q), g.param(block.w_k), g.param(block.w_v));
    let q = g.matmul(f, wq);
    let k = g.matmul(f, wk);
    let v = g.matmul(f, wv);
    let mask = key_mask(n, valid);
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(block.heads);
    let mut raw = Vec::with_capacity(block.heads);
    let mut modulated = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores, mask.clone());
        let a_mod = g.mul(a, p);
        outs.push(g.matmul(a_mod, vh));
        raw.push(a);
        modulated.push(a_mod);
    }
    let output = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(AttentionTrace { output, raw, modulated })
}

fn key_mask(n: usize, valid: usize) -> AttnMask {
    if valid >= n {
        AttnMask::none()
    } else {
        AttnMask::keys((0..n).map(|j| j < valid).collect())
    }
}

/// Standard multi-head attention with an output projection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_q: normal_param(store, format!("{prefix}.w_q"), d, d, std, rng),
            w_k: normal_param(store, format!("{prefix}.w_k"), d, d, std, rng),
            w_v: normal_param(store, format!("{prefix}.w_v"), d, d, std, rng),
            w_o: normal_param(store, format!("{prefix}.w_o"), d, d, std, rng),
            heads,
        }
    }

    /// Attention from `queries` over `memory`, scaled by `1/√d_head`.
    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, memory: Var, mask: &AttnMask) -> (Var, Vec<Var>) {
        let d = g.value(queries).cols();
        let dh = d / self.heads;
        let (wq, wk, wv, wo) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o));
        let q = g.matmul(queries, wq);
        let k = g.matmul(memory, wk);
        let v = g.matmul(memory, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores, mask.clone());
            outs.push(g.matmul(a, vh));
            attns.push(a);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (g.matmul(joined, wo), attns)
    }
}

/// Two-layer ReLU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{prefix}.up"), d, hidden, std, rng),
            down: Linear::new(store, &format!("{prefix}.down"), hidden, d, std, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.apply(g, x);
        let h = g.relu(h);
        self.down.apply(g, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub phrasal: Option<PhrasalBlock>,
    pub norm1: Norm,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

/// Parameter handles for the full encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub phrasal: Option<PhrasalBlock>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<Norm>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embedding = normal_param(store, format!("{prefix}.embedding"), config.vocab_size, d, config.embed_std, rng);
        Self::with_embedding(store, prefix, config, embedding, rng)
    }

    /// Builds the encoder around an existing embedding table.
    pub fn with_embedding<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        embedding: ParamId,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let phrasal = config.viwordformer.then(|| PhrasalBlock::new(store, &format!("{prefix}.phrasal"), &config, rng));
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                EncoderLayer {
                    phrasal: (config.viwordformer && config.phrasal_per_layer)
                        .then(|| PhrasalBlock::new(store, &format!("{p}.phrasal"), &config, rng)),
                    norm1: Norm::new(store, &format!("{p}.norm1"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, config.heads, config.init_std, rng),
                    norm2: Norm::new(store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, config.ffn_dim, config.init_std, rng),
                }
            })
            .collect();
        let final_norm = (config.layers > 0).then(|| Norm::new(store, &format!("{prefix}.final_norm"), d));
        Ok(Self { config, embedding, phrasal, layers, final_norm })
    }

    /// Embedding lookup. Every id must be inside the vocabulary.
    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        let size = g.value(table).rows();
        if let Some(&id) = ids.iter().find(|&&id| id >= size) {
            return Err(Error::TokenOutOfRange { id, size });
        }
        Ok(g.gather(table, ids))
    }

    /// Encodes a token sequence whose first `valid` positions are real.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize], valid: usize) -> Result<Var> {
        Ok(self.forward_traced(g, ids, valid)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph<'_>, ids: &[usize], valid: usize) -> Result<EncoderTrace> {
        let mut x = self.embed(g, ids)?;
        let mut phrasal = Vec::new();
        if ids.is_empty() {
            return Ok(EncoderTrace { output: x, phrasal });
        }
        if let Some(block) = &self.phrasal {
            let (out, p) = block.forward(g, x, valid)?;
            x = out;
            phrasal.push(p);
        }
        let mask = key_mask(ids.len(), valid);
        for layer in &self.layers {
            if let Some(block) = &layer.phrasal {
                let (out, p) = block.forward(g, x, valid)?;
                x = out;
                phrasal.push(p);
            }
            let h = layer.norm1.apply(g, x);
            let (a, _) = layer.attn.forward(g, h, h, &mask);
            x = g.add(x, a);
            let h = layer.norm2.apply(g, x);
            let f = layer.ffn.apply(g, h);
            x = g.add(x, f);
        }
        if let Some(norm) = &self.final_norm {
            x = norm.apply(g, x);
        }
        Ok(EncoderTrace { output: x, phrasal })
    }
}

pub struct EncoderTrace {
    pub output: Var,
    /// Phrasal matrices in application order.
    pub phrasal: Vec<Var>,
}

/// Per-token neighbor probabilities `(pr_{k,k−1}, pr_{k,k+1})`. A missing
/// neighbor has probability 0; a token with a single neighbor gives it 1.
pub fn neighbor_probabilities(f: &Matrix, w_b: &Matrix) -> Vec<(f64, f64)> {
    let n = f.rows();
    let fw = f.matmul(w_b);
    let r: Vec<f64> = (0..n.saturating_sub(1)).map(|k| crate::tensor::dot(fw.row(k), f.row(k + 1))).collect();
    (0..n)
        .map(|k| match (k > 0, k + 1 < n) {
            (false, false) => (0.0, 0.0),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (true, true) => {
                let right = crate::autodiff::sigmoid(r[k] - r[k - 1]);
                (1.0 - right, right)
            }
        })
        .collect()
}

/// Link strengths `P_1..P_{n−1}` of a feature matrix, each in `(0, 1]`.
pub fn link_probabilities(f: &Matrix, w_b: &Matrix) -> Vec<f64> {
    if f.rows() < 2 {
        return Vec::new();
    }
    let fw = f.matmul(w_b);
    let r: Vec<f64> = (0..f.rows() - 1).map(|k| crate::tensor::dot(fw.row(k), f.row(k + 1))).collect();
    log_link_values(&r).into_iter().map(f64::exp).collect()
}

/// The phrasal score matrix from link strengths, via log-space sums.
pub fn phrasal_matrix(links: &[f64]) -> Result<Matrix> {
    if let Some(bad) = links.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Invalid(format!("link strength {bad} is not positive")));
    }
    if let Some(bad) = links.iter().find(|&&p| p > 1.0) {
        return Err(Error::Invalid(format!("link strength {bad} exceeds 1")));
    }
    let logs: Vec<f64> = links.iter().map(|p| p.ln()).collect();
    Ok(phrasal_from_log_links(&logs, links.len() + 1))
}
