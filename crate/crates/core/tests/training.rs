use mcrc::checkpoint::Checkpoint;
use mcrc::data::McqItem;
use mcrc::heads::{Strategy, TaskMode};
use mcrc::synth::{synth_items, SynthConfig};
use mcrc::train::{evaluate, train, EpochLog, TrainConfig, TrainOutcome};
use mcrc::Error;

fn small_config() -> TrainConfig {
    TrainConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        decoder_layers: 1,
        batch_size: 8,
        max_explanation_len: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn items(n: usize) -> Vec<McqItem> {
    synth_items(&SynthConfig { items: n, seed: 3, vocab_size: 60, context_words: 12, question_words: 4 }).unwrap()
}

fn run(config: &TrainConfig, train_items: &[McqItem], dev: Option<&[McqItem]>) -> TrainOutcome {
    train(config, train_items, dev, &mut |_: &EpochLog| {}).unwrap()
}

#[test]
fn first_epoch_loss_is_reproducible() {
    let data = items(40);
    let config = TrainConfig { max_epochs: 1, ..small_config() };
    let a = run(&config, &data, None);
    let b = run(&config, &data, None);
    assert!((a.history[0].loss.total - b.history[0].loss.total).abs() <= 1e-12);
    assert_eq!(a.model.store.iter().count(), b.model.store.iter().count());
    for ((_, _, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn ten_items_are_memorized() {
    let data = items(10);
    let config = TrainConfig { learning_rate: 1e-3, max_epochs: 50, patience: 50, ..small_config() };
    let out = run(&config, &data, Some(&data));
    assert_eq!(out.epochs_run, 50);
    let first = &out.history[0].loss;
    let last = &out.history[49].loss;
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
    assert!(last.mc < first.mc);
    // The explanation loss falls epoch over epoch at the start.
    for w in out.history[..5].windows(2) {
        assert!(w[1].loss.explanation < w[0].loss.explanation);
    }
}

#[test]
fn single_task_mode_ignores_explanations() {
    let data = items(10);
    let config = TrainConfig { mode: TaskMode::Single, max_epochs: 2, ..small_config() };
    let out = run(&config, &data, Some(&data));
    for log in &out.history {
        assert_eq!(log.loss.explanation, 0.0);
        assert_eq!(log.loss.total, log.loss.mc);
    }
}

#[test]
fn stops_once_patience_runs_out() {
    let data = items(30);
    for patience in [1, 2] {
        let config = TrainConfig { patience, max_epochs: 40, ..small_config() };
        let out = run(&config, &data, None);
        assert!(out.best_epoch >= 1);
        if out.epochs_run < 40 {
            assert_eq!(out.epochs_run - out.best_epoch, patience);
        }
        let improved: Vec<usize> = out.history.iter().filter(|h| h.improved).map(|h| h.epoch).collect();
        assert_eq!(improved.last(), Some(&out.best_epoch));
        let best = out.history[out.best_epoch - 1].dev_f1;
        assert_eq!(best, out.best_dev_f1);
        assert!(out.history.iter().all(|h| h.dev_f1 <= best));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = items(24);
    let config = TrainConfig { max_epochs: 2, ..small_config() };
    let out = run(&config, &data, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::from_outcome(&out, &config).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().to_model().unwrap();

    let explain = Some((8, Strategy::Greedy));
    let before = evaluate(&out.model, &data, &config.caps(), explain).unwrap();
    let after = evaluate(&restored, &data, &config.caps(), explain).unwrap();
    assert_eq!(before.report, after.report);
    assert_eq!(before.predictions.len(), after.predictions.len());
    for (x, y) in before.predictions.iter().zip(&after.predictions) {
        assert_eq!(x.predicted, y.predicted);
        assert_eq!(x.explanation, y.explanation);
        for k in 0..4 {
            assert_eq!(x.probabilities[k].to_bits(), y.probabilities[k].to_bits());
        }
    }
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let data = items(16);
    let config = TrainConfig { learning_rate: 1e300, max_epochs: 3, ..small_config() };
    match train(&config, &data, None, &mut |_: &EpochLog| {}) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.epochs_run)),
    }
}

#[test]
fn evaluation_rejects_a_foreign_vocabulary() {
    let data = items(16);
    let config = TrainConfig { max_epochs: 1, ..small_config() };
    let out = run(&config, &data, None);
    let mut foreign = data.clone();
    for item in &mut foreign {
        item.question = "zzq yyq xxq".into();
        item.options = ["zzq".into(), "yyq".into(), "xxq".into(), "wwq".into()];
        item.context = Some("zzq yyq".into());
    }
    assert!(evaluate(&out.model, &foreign, &config.caps(), None).is_err());
}
