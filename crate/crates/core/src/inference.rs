//! Option comparison: every option is read together with the question,
//! compared against the other three options, gated, and matched against the
//! retrieved context.
//!
//! All functions work on unpadded per-item feature matrices held in a
//! [`Graph`]. Trilinear attention call sites each own a separate `1 × 3d`
//! weight row.

use rand::Rng;

use crate::autodiff::{AttnMask, Graph, ParamId, ParamStore, Var};
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const NUM_OPTIONS: usize = crate::data::NUM_OPTIONS;

/// The trilinear weights of every attention site plus the dense maps.
#[derive(Debug, Clone, Copy)]
pub struct InferenceParams {
    pub pairwise: ParamId,
    pub option_to_context: ParamId,
    pub context_to_option: ParamId,
    pub self_attention: ParamId,
    /// `4d → d`, over `[f ; mean diff ; mean product ; mean attended]`.
    pub w_c: Linear,
    /// `2d → 1` per-token gate.
    pub w_g: Linear,
    /// `3d → d`, over `[f^O ; f̂]`.
    pub w_p: Linear,
    /// `4d → d`.
    pub w_o: Linear,
}

/// A trilinear weight row `[w_a ; w_b ; w_ab]`. The product block starts
/// at `1/√d` plus noise, so at initialization the attention behaves like
/// scaled dot-product attention between the two sides.
pub fn trilinear_weights<R: Rng>(store: &mut ParamStore, name: String, d: usize, std: f64, rng: &mut R) -> ParamId {
    let mut w = Matrix::random_normal(1, 3 * d, std, rng);
    let base = 1.0 / (d as f64).sqrt();
    for v in &mut w.row_mut(0)[2 * d..] {
        *v += base;
    }
    store.add(name, w)
}

impl InferenceParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut R) -> Self {
        let tri = |store: &mut ParamStore, site: &str, rng: &mut R| trilinear_weights(store, format!("{prefix}.{site}.w_a"), d, std, rng);
        let pairwise = tri(store, "pairwise", rng);
        let option_to_context = tri(store, "option_to_context", rng);
        let context_to_option = tri(store, "context_to_option", rng);
        let self_attention = tri(store, "self_attention", rng);
        Self {
            pairwise,
            option_to_context,
            context_to_option,
            self_attention,
            w_c: Linear::new(store, &format!("{prefix}.w_c"), 4 * d, d, std, rng),
            w_g: Linear::new(store, &format!("{prefix}.w_g"), 2 * d, 1, std, rng),
            w_p: Linear::new(store, &format!("{prefix}.w_p"), 3 * d, d, std, rng),
            w_o: Linear::new(store, &format!("{prefix}.w_o"), 4 * d, d, std, rng),
        }
    }

    /// Every parameter of the module, for selective gradient checks.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.pairwise, self.option_to_context, self.context_to_option, self.self_attention];
        for l in [self.w_c, self.w_g, self.w_p, self.w_o] {
            out.extend([l.weight, l.bias]);
        }
        out
    }
}

fn same_width(g: &Graph<'_>, a: Var, b: Var, what: &str) -> Result<()> {
    let (wa, wb) = (g.value(a).cols(), g.value(b).cols());
    if wa != wb {
        return Err(Error::Shape(format!("{what}: widths {wa} and {wb}")));
    }
    Ok(())
}

fn same_shape(g: &Graph<'_>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Question rows followed by option rows.
pub fn fuse_question_option(g: &mut Graph<'_>, question: Var, option: Var) -> Result<Var> {
    same_width(g, question, option, "question/option fusion")?;
    if g.value(question).rows() == 0 {
        return Ok(option);
    }
    Ok(g.concat_rows(&[question, option]))
}

/// Row-softmaxed trilinear scores of `a` against `b`. `valid_cols` masks
/// trailing PAD columns of `b`.
pub fn trilinear_attention(g: &mut Graph<'_>, a: Var, b: Var, w: Var, valid_cols: Option<usize>) -> Result<Var> {
    same_width(g, a, b, "trilinear attention")?;
    let s = g.trilinear(a, b, w);
    if !g.value(s).is_finite() {
        return Err(Error::NonFinite("trilinear attention scores".into()));
    }
    let n = g.value(b).rows();
    let mask = match valid_cols {
        Some(v) if v < n => AttnMask::keys((0..n).map(|j| j < v).collect()),
        _ => AttnMask::none(),
    };
    Ok(g.softmax_rows(s, mask))
}

/// `[f − f' ; f ⊙ f']`.
pub fn keep_eliminate(g: &mut Graph<'_>, f: Var, attended: Var) -> Result<Var> {
    same_shape(g, f, attended, "keep-eliminate")?;
    let diff = g.sub(f, attended);
    let prod = g.mul(f, attended);
    Ok(g.concat_cols(&[diff, prod]))
}

/// One option's view of another: the keep-eliminate features and the
/// attended representation they were built from.
#[derive(Debug, Clone, Copy)]
pub struct Comparison {
    pub features: Var,
    pub attended: Var,
    pub attention: Var,
}

/// Compares option `f` (already question-fused) against `other`.
pub fn compare(g: &mut Graph<'_>, f: Var, other: Var, w_a: Var) -> Result<Comparison> {
    let attention = trilinear_attention(g, f, other, w_a, None)?;
    let attended = g.matmul(attention, other);
    let features = keep_eliminate(g, f, attended)?;
    Ok(Comparison { features, attended, attention })
}

/// `tanh([f ; mean diff ; mean product ; mean attended] W_C + b_C)`. The
/// means are order-independent, so permuting partners gives bit-identical
/// output.
pub fn aggregate_comparisons(g: &mut Graph<'_>, f: Var, partners: &[Comparison], w_c: &Linear) -> Result<Var> {
    if partners.len() < NUM_OPTIONS - 1 {
        return Err(Error::Invalid(format!("{} comparison partners, need {}", partners.len(), NUM_OPTIONS - 1)));
    }
    for p in partners {
        let (n, d) = g.value(f).shape();
        if g.value(p.features).shape() != (n, 2 * d) || g.value(p.attended).shape() != (n, d) {
            return Err(Error::Shape("comparison features do not match the option".into()));
        }
    }
    let features: Vec<Var> = partners.iter().map(|p| p.features).collect();
    let attended: Vec<Var> = partners.iter().map(|p| p.attended).collect();
    let mean_features = g.symmetric_mean(&features);
    let mean_attended = g.symmetric_mean(&attended);
    let joined = g.concat_cols(&[f, mean_features, mean_attended]);
    let out = w_c.apply(g, joined);
    Ok(g.tanh(out))
}

/// `g ⊙ f + (1 − g) ⊙ f̄` with a per-token scalar gate
/// `g = σ([f ; f̄] W_g + b_g)`.
pub fn gated_fusion(g: &mut Graph<'_>, f: Var, fbar: Var, w_g: &Linear) -> Result<Var> {
    same_shape(g, f, fbar, "gated fusion")?;
    let joined = g.concat_cols(&[f, fbar]);
    let logit = w_g.apply(g, joined);
    let gate = g.sigmoid(logit);
    let keep = g.mul_col(f, gate);
    let rest = g.affine(gate, -1.0, 1.0);
    let take = g.mul_col(fbar, rest);
    Ok(g.add(keep, take))
}

/// Co-attention result with both attention maps kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct CoAttention {
    pub output: Var,
    pub option_to_context: Var,
    pub context_to_option: Var,
}

/// `f̂ = A^O [f_P ; A^P f^O]`, an `n_Qk × 2d` matrix.
pub fn context_coattention(g: &mut Graph<'_>, fo: Var, fp: Var, w_oc: Var, w_co: Var) -> Result<CoAttention> {
    if g.value(fp).rows() == 0 {
        return Err(Error::EmptyContext);
    }
    let option_to_context = trilinear_attention(g, fo, fp, w_oc, None)?;
    let context_to_option = trilinear_attention(g, fp, fo, w_co, None)?;
    let back = g.matmul(context_to_option, fo);
    let inner = g.concat_cols(&[fp, back]);
    let output = g.matmul(option_to_context, inner);
    Ok(CoAttention { output, option_to_context, context_to_option })
}

#[derive(Debug, Clone, Copy)]
pub struct FinalRepresentation {
    pub output: Var,
    pub self_attention: Var,
}

/// `f̃ = ReLU([f^O ; f̂] W_P + b_P)`, `f̄ = Attn(f̃, f̃) f̃`,
/// `f_k = ReLU([f̃ ; f̄ ; f̃ − f̄ ; f̃ ⊙ f̄] W_O + b_O)`.
pub fn final_option_representation(
    g: &mut Graph<'_>,
    fo: Var,
    fhat: Var,
    w_p: &Linear,
    w_self: Var,
    w_o: &Linear,
) -> Result<FinalRepresentation> {
    let (n, d) = g.value(fo).shape();
    if g.value(fhat).shape() != (n, 2 * d) {
        return Err(Error::Shape(format!("co-attention output {:?}, expected ({n}, {})", g.value(fhat).shape(), 2 * d)));
    }
    let joined = g.concat_cols(&[fo, fhat]);
    let ft = w_p.apply(g, joined);
    let ft = g.relu(ft);
    let self_attention = trilinear_attention(g, ft, ft, w_self, None)?;
    let fbar = g.matmul(self_attention, ft);
    let diff = g.sub(ft, fbar);
    let prod = g.mul(ft, fbar);
    let joined = g.concat_cols(&[ft, fbar, diff, prod]);
    let out = w_o.apply(g, joined);
    Ok(FinalRepresentation { output: g.relu(out), self_attention })
}

/// Every intermediate of one forward pass, by option.
#[derive(Debug, Clone)]
pub struct OptionFeatures {
    pub fused: [Var; NUM_OPTIONS],
    /// `comparisons[k]` holds option `k`'s view of each other option, in
    /// increasing partner index.
    pub comparisons: [Vec<(usize, Comparison)>; NUM_OPTIONS],
    pub aggregated: [Var; NUM_OPTIONS],
    pub gated: [Var; NUM_OPTIONS],
    pub coattention: [CoAttention; NUM_OPTIONS],
    pub finals: [FinalRepresentation; NUM_OPTIONS],
}

impl OptionFeatures {
    pub fn final_features(&self) -> [Var; NUM_OPTIONS] {
        self.finals.map(|f| f.output)
    }

    /// Named attention matrices for inspection: `pairwise`, `option_context`,
    /// `context_option`, `self`.
    pub fn attention(&self, stage: &str, option: usize) -> Option<Vec<(String, Var)>> {
        if option >= NUM_OPTIONS {
            return None;
        }
        let out = match stage {
            "pairwise" => self.comparisons[option].iter().map(|(l, c)| (format!("option {option} -> {l}"), c.attention)).collect(),
            "option_context" => vec![(format!("option {option} -> context"), self.coattention[option].option_to_context)],
            "context_option" => vec![(format!("context -> option {option}"), self.coattention[option].context_to_option)],
            "self" => vec![(format!("option {option} self"), self.finals[option].self_attention)],
            _ => return None,
        };
        Some(out)
    }
}

pub const ATTENTION_STAGES: [&str; 4] = ["pairwise", "option_context", "context_option", "self"];

/// Full option-comparison stack for one item.
pub fn infer_options(
    g: &mut Graph<'_>,
    params: &InferenceParams,
    question: Var,
    options: &[Var; NUM_OPTIONS],
    context: Var,
) -> Result<OptionFeatures> {
    if g.value(context).rows() == 0 {
        return Err(Error::EmptyContext);
    }
    let mut fused = Vec::with_capacity(NUM_OPTIONS);
    for &o in options {
        fused.push(fuse_question_option(g, question, o)?);
    }
    let fused: [Var; NUM_OPTIONS] = fused.try_into().expect("four options");
    let w_pair = g.param(params.pairwise);
    let mut comparisons: [Vec<(usize, Comparison)>; NUM_OPTIONS] = Default::default();
    for k in 0..NUM_OPTIONS {
        for l in (0..NUM_OPTIONS).filter(|&l| l != k) {
            let c = compare(g, fused[k], fused[l], w_pair)?;
            comparisons[k].push((l, c));
        }
    }
    let w_oc = g.param(params.option_to_context);
    let w_co = g.param(params.context_to_option);
    let w_self = g.param(params.self_attention);
    let mut aggregated = Vec::with_capacity(NUM_OPTIONS);
    let mut gated = Vec::with_capacity(NUM_OPTIONS);
    let mut coattention = Vec::with_capacity(NUM_OPTIONS);
    let mut finals = Vec::with_capacity(NUM_OPTIONS);
    for k in 0..NUM_OPTIONS {
        let partners: Vec<Comparison> = comparisons[k].iter().map(|(_, c)| *c).collect();
        let agg = aggregate_comparisons(g, fused[k], &partners, &params.w_c)?;
        let fo = gated_fusion(g, fused[k], agg, &params.w_g)?;
        let co = context_coattention(g, fo, context, w_oc, w_co)?;
        let fin = final_option_representation(g, fo, co.output, &params.w_p, w_self, &params.w_o)?;
        aggregated.push(agg);
        gated.push(fo);
        coattention.push(co);
        finals.push(fin);
    }
    Ok(OptionFeatures {
        fused,
        comparisons,
        aggregated: aggregated.try_into().expect("four options"),
        gated: gated.try_into().expect("four options"),
        coattention: coattention.try_into().expect("four options"),
        finals: finals.try_into().expect("four options"),
    })
}
