//! Randomized property suites over the phrasal matrix, every attention map
//! in the model, and option-order equivariance.
//!
//! Each suite returns a [`SuiteReport`] listing the cases it ran and a
//! description of every violation, so the same checks back the integration
//! tests and the acceptance runner.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::data::{EncodedItem, PAD};
use crate::encoder::{link_probabilities, phrasal_attention, phrasal_matrix, phrasal_scores};
use crate::error::Result;
use crate::gradcheck::{fixture, GradcheckOptions};
use crate::inference::ATTENTION_STAGES;
use crate::model::Model;
use crate::tensor::{softmax_in_place, Matrix};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub cases: usize,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} cases, {} checks, {} failures", self.cases, self.checks, self.failures.len())?;
        for fail in self.failures.iter().take(5) {
            write!(f, "\n  {fail}")?;
        }
        Ok(())
    }
}

/// All 24 orderings of four options.
pub fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in (0..4).filter(|&b| b != a) {
            for c in (0..4).filter(|&c| c != a && c != b) {
                let d = 6 - a - b - c;
                out.push([a, b, c, d]);
            }
        }
    }
    out
}

/// Symmetry, unit diagonal, (0, 1] range, monotone decay along each row,
/// log-space against direct products, and agreement between the plain and
/// taped constructions, over `draws` random `(n ≤ 16, d ≤ 16)` inputs.
pub fn phrasal_suite(draws: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::default();
    for case in 0..draws {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=16);
        let scale = rng.gen_range(0.0..2.0) / (d as f64).sqrt();
        let f = Matrix::random_normal(n, d, 1.0, &mut rng);
        let w_b = Matrix::random_normal(d, d, scale, &mut rng);
        let links = link_probabilities(&f, &w_b);
        rep.cases += 1;
        rep.check(links.len() == n.saturating_sub(1), || format!("case {case}: {} links for n={n}", links.len()));
        let p = match phrasal_matrix(&links) {
            Ok(p) => p,
            Err(e) => {
                rep.check(false, || format!("case {case}: {e}"));
                continue;
            }
        };
        for i in 0..n {
            rep.check(p[(i, i)] == 1.0, || format!("case {case}: P[{i}][{i}] = {}", p[(i, i)]));
            let mut product = 1.0;
            for j in i..n {
                let v = p[(i, j)];
                rep.check(v == p[(j, i)], || format!("case {case}: P[{i}][{j}] != P[{j}][{i}]"));
                rep.check(v > 0.0 && v <= 1.0, || format!("case {case}: P[{i}][{j}] = {v} outside (0, 1]"));
                if j > i {
                    product *= links[j - 1];
                    rep.check(v <= p[(i, j - 1)], || format!("case {case}: P[{i}][{j}] > P[{i}][{}]", j - 1));
                    rep.check((v - product).abs() <= 1e-9, || format!("case {case}: P[{i}][{j}] = {v} but product = {product}"));
                }
            }
        }
        let store = crate::autodiff::ParamStore::new();
        let mut g = Graph::new(&store);
        let fv = g.input(f.clone());
        let wv = g.input(w_b.clone());
        let taped = phrasal_scores(&mut g, fv, wv, n);
        let diff = g.value(taped).zip_map(&p, |a, b| (a - b).abs()).max_abs();
        rep.check(diff <= 1e-12, || format!("case {case}: taped and plain matrices differ by {diff:e}"));
    }
    rep
}

fn check_stochastic(rep: &mut SuiteReport, what: &str, a: &Matrix, mask: &AttnMask, rows: usize) {
    for i in 0..rows.min(a.rows()) {
        let mut sum = 0.0;
        let mut leaked = 0.0f64;
        for j in 0..a.cols() {
            if mask.allows(i, j) {
                sum += a[(i, j)];
            } else {
                leaked = leaked.max(a[(i, j)].abs());
            }
        }
        rep.check((sum - 1.0).abs() <= 1e-9, || format!("{what}: row {i} sums to {sum}"));
        rep.check(leaked == 0.0, || format!("{what}: row {i} puts {leaked:e} on a masked column"));
    }
}

fn pad_mask(n: usize, valid: usize) -> AttnMask {
    if valid >= n {
        AttnMask::none()
    } else {
        AttnMask::keys((0..n).map(|j| j < valid).collect())
    }
}

/// Plain multi-head scaled dot-product attention of the phrasal block,
/// computed without the tape and without any modulation.
fn plain_phrasal_attention(model: &Model, f: &Matrix, valid: usize) -> Option<Matrix> {
    let block = model.encoder.phrasal.as_ref()?;
    let store = &model.store;
    let (n, d) = f.shape();
    let dh = d / block.heads;
    let (q, k, v) = (f.matmul(store.get(block.w_q)), f.matmul(store.get(block.w_k)), f.matmul(store.get(block.w_v)));
    let mut heads = Vec::new();
    for h in 0..block.heads {
        let mut s = q.slice_cols(h * dh, dh).matmul_t(&k.slice_cols(h * dh, dh)).scale(1.0 / (d as f64).sqrt());
        for r in 0..n {
            softmax_in_place(s.row_mut(r), |j| j < valid);
        }
        heads.push(s.matmul(&v.slice_cols(h * dh, dh)));
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    Some(if refs.len() == 1 { heads[0].clone() } else { Matrix::concat_cols(&refs) })
}

fn attention_case(rep: &mut SuiteReport, model: &Model, item: &EncodedItem, pad: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut g = Graph::new(&model.store);
    let valid = item.context.len();
    let mut ids = item.context.ids.clone();
    ids.extend(std::iter::repeat_n(PAD, pad));
    let n = ids.len();
    let mask = pad_mask(n, valid);
    let f = model.encoder.embed(&mut g, &ids)?;

    if let Some(block) = &model.encoder.phrasal {
        let w_b = g.param(block.w_b);
        let p = phrasal_scores(&mut g, f, w_b, valid);
        let trace = phrasal_attention(&mut g, f, block, p, valid)?;
        for (h, (&a, &m)) in trace.raw.iter().zip(&trace.modulated).enumerate() {
            check_stochastic(rep, &format!("{}: phrasal head {h}", item.id), g.value(a), &mask, valid);
            let (a, m) = (g.value(a), g.value(m));
            let worst = m.zip_map(a, |m, a| m - a).as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rep.check(worst <= 0.0, || format!("{}: phrasal head {h}: A' exceeds A by {worst:e}", item.id));
        }
        let ones = g.input(Matrix::filled(n, n, 1.0));
        let unmodulated = phrasal_attention(&mut g, f, block, ones, valid)?;
        let plain = plain_phrasal_attention(model, g.value(f), valid).expect("phrasal block present");
        rep.check(g.value(unmodulated.output) == &plain, || format!("{}: P = 1 differs from plain attention", item.id));
    }

    let mut x = f;
    for (l, layer) in model.encoder.layers.iter().enumerate() {
        let h = layer.norm1.apply(&mut g, x);
        let (out, attns) = layer.attn.forward(&mut g, h, h, &mask);
        for (hd, &a) in attns.iter().enumerate() {
            check_stochastic(rep, &format!("{}: encoder layer {l} head {hd}", item.id), g.value(a), &mask, valid);
        }
        x = g.add(x, out);
    }

    let fwd = model.forward(&mut g, item)?;
    for stage in ATTENTION_STAGES {
        for k in 0..crate::data::NUM_OPTIONS {
            for (title, a) in fwd.features.attention(stage, k).expect("known stage") {
                check_stochastic(rep, &format!("{}: {title}", item.id), g.value(a), &AttnMask::none(), usize::MAX);
            }
        }
    }

    let memory = model.memory(&mut g, &fwd, rng.gen_range(0..crate::data::NUM_OPTIONS))?;
    let steps = rng.gen_range(1..=6);
    let d = model.config.d_model;
    let mut y: Var = g.input(Matrix::random_normal(steps, d, 1.0, rng));
    for (l, layer) in model.decoder.layers.iter().enumerate() {
        let h = layer.norm1.apply(&mut g, y);
        let (s, self_attns) = layer.self_attn.forward(&mut g, h, h, &AttnMask::causal());
        for (hd, &a) in self_attns.iter().enumerate() {
            check_stochastic(rep, &format!("{}: decoder layer {l} self head {hd}", item.id), g.value(a), &AttnMask::causal(), usize::MAX);
        }
        y = g.add(y, s);
        let h = layer.norm2.apply(&mut g, y);
        let (c, cross) = layer.cross_attn.forward(&mut g, h, memory, &AttnMask::none());
        for (hd, &a) in cross.iter().enumerate() {
            check_stochastic(rep, &format!("{}: decoder layer {l} cross head {hd}", item.id), g.value(a), &AttnMask::none(), usize::MAX);
        }
        y = g.add(y, c);
    }
    Ok(())
}

/// Row-stochasticity over non-PAD columns for every attention map (phrasal
/// block, encoder layers, the four inference stages, decoder self and cross
/// attention), `A' ≤ A` after modulation, and bit-exact plain attention when
/// `P ≡ 1`.
pub fn attention_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::default();
    for case in 0..cases {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(case as u64);
        let (model, item) = fixture(case_seed, &GradcheckOptions::default())?;
        let pad = rng.gen_range(0..=3);
        rep.cases += 1;
        attention_case(&mut rep, &model, &item, pad, &mut rng)?;
    }
    Ok(rep)
}

fn permuted(item: &EncodedItem, order: &[usize; 4]) -> EncodedItem {
    let mut out = item.clone();
    out.options = order.map(|k| item.options[k].clone());
    out
}

/// Over `instances` random models and items and all 24 option orders:
/// feeding options in order `σ` yields, at position `k`, exactly the final
/// features and score that option `σ(k)` had in the original order.
pub fn equivariance_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    let perms = permutations4();
    for case in 0..instances {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(case as u64);
        let (model, item) = fixture(case_seed, &GradcheckOptions::default())?;
        let mut g = Graph::new(&model.store);
        let base = model.forward(&mut g, &item)?;
        let base_feats: Vec<Matrix> = base.features.final_features().iter().map(|&v| g.value(v).clone()).collect();
        let base_scores = g.value(base.scores).row(0).to_vec();
        rep.cases += 1;
        for order in &perms {
            let mut h = Graph::new(&model.store);
            let fwd = model.forward(&mut h, &permuted(&item, order))?;
            let scores = h.value(fwd.scores).row(0).to_vec();
            for (k, &src) in order.iter().enumerate() {
                let feat = h.value(fwd.features.final_features()[k]);
                rep.check(feat == &base_feats[src], || format!("instance {case}, order {order:?}: features of slot {k} differ"));
                rep.check(scores[k].to_bits() == base_scores[src].to_bits(), || {
                    format!("instance {case}, order {order:?}: score {k} is {} not {}", scores[k], base_scores[src])
                });
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_distinct() {
        let p = permutations4();
        let set: std::collections::HashSet<_> = p.iter().collect();
        assert_eq!((p.len(), set.len()), (24, 24));
    }

    #[test]
    fn suites_pass_on_a_few_cases() {
        assert!(phrasal_suite(50, 1).passed());
        let a = attention_suite(3, 2).unwrap();
        assert!(a.passed(), "{a}");
        let e = equivariance_suite(2, 3).unwrap();
        assert!(e.passed(), "{e}");
    }
}
