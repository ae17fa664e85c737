//! Hand-computed values, reproduced through the public API.

#![allow(clippy::approx_constant)]

use mcrc::autodiff::Graph;
use mcrc::data::{encode_item, Grade, McqItem, SimpleTokenizer, Subject, TruncationCaps, Vocabulary};
use mcrc::heads::{multitask_loss, TaskMode};
use mcrc::metrics::{classification_metrics, generation_metrics};
use mcrc::model::{Model, ModelConfig};
use mcrc::retrieval::{rrf_fuse, Bm25Params, RankedList, SentenceUnit, SparseIndex};
use mcrc::tensor::Matrix;

const TOL: f64 = 1e-6;

fn unit(id: u64, text: &str) -> SentenceUnit {
    SentenceUnit { id, subject: Subject::History, text: text.into() }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn bm25_two_unit_case_is_ln_two() {
    let index = SparseIndex::build(&[unit(1, "a b"), unit(2, "c d")], Bm25Params::default());
    let score = index.score(&["a".to_string()], 1).unwrap();
    assert!((score - 0.693147).abs() < TOL, "{score}");
    assert_eq!(index.score(&["a".to_string()], 2).unwrap(), 0.0);
}

#[test]
fn rrf_fractions() {
    let a = RankedList::from_scores(vec![(7, 0.9), (8, 0.5)]).unwrap();
    let b = RankedList::from_scores(vec![(7, 3.0), (9, 1.0)]).unwrap();
    let fused = rrf_fuse(&[a, b], 60).unwrap();
    let score = |id: u64| fused.entries().iter().find(|e| e.0 == id).unwrap().1;
    assert!((score(7) - 0.0327869).abs() < TOL);
    assert!((score(8) - 0.0161290).abs() < TOL);
    assert!((score(9) - 0.0161290).abs() < TOL);
}

#[test]
fn f1_macro_all_zero_predictions() {
    let (acc, f1) = classification_metrics(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap();
    assert!((acc - 0.25).abs() < TOL);
    assert!((f1 - 0.1).abs() < TOL);
}

#[test]
fn bleu_and_rouge_short_hypothesis() {
    let s = generation_metrics(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
    assert!((s.bleu4 - 0.778801).abs() < TOL, "{}", s.bleu4);
    assert!((s.rouge_l - 0.888889).abs() < TOL, "{}", s.rouge_l);
}

/// A model whose scorer and decoder output are zeroed predicts uniformly:
/// four options give ln 4, and an eight-entry vocabulary gives ln 8 per
/// predicted token.
#[test]
fn uniform_model_losses() {
    let vocab = Vocabulary::from(toks("a b c d"));
    assert_eq!(vocab.len(), 8);
    let item = McqItem {
        id: "u".into(),
        subject: Subject::Geography,
        grade: Grade::Eleven,
        question: "a b".into(),
        options: ["a".into(), "b".into(), "c".into(), "d".into()],
        answer: 2,
        // Two words plus the end marker: three predicted tokens.
        explanation: Some("c d".into()),
        context: Some("a b c d".into()),
    };
    let enc = encode_item(&item, &vocab, &SimpleTokenizer, &TruncationCaps::default());
    let cfg = ModelConfig { d_model: 8, heads: 2, layers: 1, decoder_layers: 1, init_std: 0.3, ..ModelConfig::default() };
    let mut model = Model::new(cfg, vocab, 11).unwrap();
    model.store.set(model.scorer, Matrix::zeros(8, 1));
    model.store.set(model.decoder.output.weight, Matrix::zeros(8, 8));
    model.store.set(model.decoder.output.bias, Matrix::zeros(1, 8));

    let (loss, _) = model.item_gradients(&enc, TaskMode::Multitask, 1.0, 1.0).unwrap();
    let breakdown = multitask_loss(&[loss], TaskMode::Multitask);
    assert!((breakdown.mc - 1.386294).abs() < TOL, "{}", breakdown.mc);
    assert!((breakdown.explanation - 6.238325).abs() < TOL, "{}", breakdown.explanation);
    assert_eq!(breakdown.total, breakdown.mc + breakdown.explanation);

    let mut g = Graph::new(&model.store);
    let fwd = model.forward(&mut g, &enc).unwrap();
    assert_eq!(g.value(fwd.scores).as_slice(), &[0.0; 4]);
}
