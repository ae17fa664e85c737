//! Finite-difference verification of the analytic gradients.
//!
//! The objective is the full multitask loss of one small random item, so
//! every parameter of every module is reached. Each scalar of the selected
//! parameters is nudged by `±step` and the central difference is compared to
//! the backward pass.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, ParamId};
use crate::data::{encode_item, EncodedItem, Grade, McqItem, SimpleTokenizer, Subject, TruncationCaps, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::TaskMode;
use crate::model::{Model, ModelConfig};

pub const MODULES: [&str; 3] = ["viwordformer", "option_inference", "heads"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub d_model: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding do not blow up the ratio.
    pub floor: f64,
    /// Initialization scale of the checked model. Larger than the training
    /// default so that every path carries a visible gradient.
    pub init_std: f64,
    /// Zero the analytic gradient of this parameter before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { d_model: 8, step: 1e-5, tolerance: 1e-3, floor: 1e-6, init_std: 0.3, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub module: String,
    pub seed: u64,
    pub checked: usize,
    /// Scalars whose one-sided differences disagree by more than the
    /// tolerance, meaning the step straddles a ReLU or max-pool switch. They
    /// are not compared.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
    pub non_finite: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.non_finite.is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {}: {} ({} scalars, {} kinks skipped, max rel error {:.3e})",
            self.module,
            self.seed,
            if self.passed() { "pass" } else { "FAIL" },
            self.checked,
            self.kinks,
            self.max_rel_error
        )?;
        for name in &self.non_finite {
            write!(f, "\n  non-finite gradient in {name}")?;
        }
        for m in self.failures.iter().take(5) {
            write!(f, "\n  {}[{}]: analytic {:.6e} numeric {:.6e} (rel {:.3e})", m.param, m.index, m.analytic, m.numeric, m.rel_error)?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n  ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

/// A random item over a twelve-word vocabulary with a five-token context.
pub fn fixture(seed: u64, options: &GradcheckOptions) -> Result<(Model, EncodedItem)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let mut pick = |n: usize| words.choose_multiple(&mut rng, n).cloned().collect::<Vec<_>>().join(" ");
    let item = McqItem {
        id: format!("gc-{seed}"),
        subject: Subject::History,
        grade: Grade::Ten,
        question: pick(3),
        options: [pick(2), pick(2), pick(3), pick(2)],
        answer: (seed % 4) as usize,
        explanation: Some(pick(3)),
        context: Some(pick(5)),
    };
    let vocab = Vocabulary::build(&SimpleTokenizer, words.iter().map(String::as_str));
    let config = ModelConfig {
        d_model: options.d_model,
        heads: 2,
        layers: 1,
        decoder_layers: 1,
        init_std: options.init_std,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, vocab, seed)?;
    // The link scorer starts at zero; give it a random value so the phrasal
    // path is exercised away from its symmetric starting point.
    if let Some(block) = &model.encoder.phrasal {
        let (r, c) = model.store.get(block.w_b).shape();
        let m = crate::tensor::Matrix::random_normal(r, c, 0.5, &mut rng);
        model.store.set(block.w_b, m);
    }
    let encoded = encode_item(&item, &model.vocab, &SimpleTokenizer, &TruncationCaps::default());
    Ok((model, encoded))
}

fn objective(model: &Model, item: &EncodedItem) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let (_, obj) = model.item_objective(&mut g, item, TaskMode::Multitask, 1.0, 1.0)?;
    Ok(g.value(obj)[(0, 0)])
}

fn analytic(model: &Model, item: &EncodedItem) -> Result<Gradients> {
    model.item_gradients(item, TaskMode::Multitask, 1.0, 1.0).map(|(_, g)| g)
}

/// Checks every scalar of `params` against central differences.
pub fn check_params(model: &mut Model, item: &EncodedItem, params: &[ParamId], module: &str, seed: u64, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut grads = analytic(model, item)?;
    if let Some(name) = &options.corrupt {
        let id = model.store.id(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        let shape = model.store.get(id).shape();
        grads.set(id, crate::tensor::Matrix::zeros(shape.0, shape.1));
    }
    let base = objective(model, item)?;
    let h = options.step;
    let mut report = GradcheckReport {
        module: module.to_string(),
        seed,
        checked: 0,
        kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        non_finite: Vec::new(),
    };
    for &id in params {
        let name = model.store.name(id).to_string();
        let len = model.store.get(id).len();
        let grad: Vec<f64> = match grads.get(id) {
            Some(g) => g.as_slice().to_vec(),
            None => vec![0.0; len],
        };
        if grad.iter().any(|v| !v.is_finite()) {
            report.non_finite.push(name);
            continue;
        }
        for (i, &a) in grad.iter().enumerate() {
            let orig = model.store.get(id).as_slice()[i];
            model.store.get_mut(id).as_mut_slice()[i] = orig + h;
            let plus = objective(model, item)?;
            model.store.get_mut(id).as_mut_slice()[i] = orig - h;
            let minus = objective(model, item)?;
            model.store.get_mut(id).as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            if rel > options.tolerance {
                let forward = (plus - base) / h;
                let backward = (base - minus) / h;
                let spread = (forward - backward).abs() / forward.abs().max(backward.abs()).max(options.floor);
                // On a smooth stretch the one-sided slopes differ by about
                // h·f'', far below the tolerance. A wider spread means a
                // switch lies inside the step and the central difference
                // says nothing about the derivative.
                if spread > options.tolerance {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            let mismatch = Mismatch { param: name.clone(), index: i, analytic: a, numeric, rel_error: rel };
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(mismatch.clone());
            }
            if rel > options.tolerance {
                report.failures.push(mismatch);
            }
        }
    }
    Ok(report)
}

/// Runs the check for one module (`viwordformer`, `option_inference`,
/// `heads`, or `all`) on the fixture drawn from `seed`.
pub fn gradcheck(module: &str, seed: u64, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let (mut model, item) = fixture(seed, options)?;
    let params = if module == "all" {
        model.store.ids().collect()
    } else {
        model.module_params(module)?
    };
    check_params(&mut model, &item, &params, module, seed, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes_on_one_seed() {
        for module in MODULES {
            let r = gradcheck(module, 1, &GradcheckOptions::default()).unwrap();
            assert!(r.passed(), "{r}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn a_zeroed_gradient_is_named() {
        let opts = GradcheckOptions { corrupt: Some("inference.w_g.weight".into()), ..GradcheckOptions::default() };
        let r = gradcheck("option_inference", 2, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.failures.iter().all(|m| m.param == "inference.w_g.weight"), "{r}");
    }

    #[test]
    fn unknown_module_is_an_error() {
        assert!(gradcheck("decoder", 0, &GradcheckOptions::default()).is_err());
    }
}
