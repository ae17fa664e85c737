//! The {ViWordFormer on/off} × {single/multitask} grid.

use std::fmt;

use serde::Serialize;

use crate::data::McqItem;
use crate::error::{Error, Result};
use crate::heads::{Strategy, TaskMode};
use crate::train::{evaluate, split_dev, train, EpochLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub viwordformer: bool,
    pub mode: TaskMode,
}

impl Variant {
    pub const GRID: [Variant; 4] = [
        Variant { viwordformer: true, mode: TaskMode::Multitask },
        Variant { viwordformer: true, mode: TaskMode::Single },
        Variant { viwordformer: false, mode: TaskMode::Multitask },
        Variant { viwordformer: false, mode: TaskMode::Single },
    ];

    pub fn label(&self) -> String {
        format!("{} / {}", if self.viwordformer { "viwordformer" } else { "no viwordformer" }, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn mean_accuracy(&self, variant: Variant) -> Option<f64> {
        mean(self.runs_of(variant).map(|r| r.accuracy))
    }

    /// Mean accuracy over every run with the given task mode.
    pub fn mode_accuracy(&self, mode: TaskMode) -> Option<f64> {
        mean(self.runs.iter().filter(|r| r.variant.mode == mode).map(|r| r.accuracy))
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>5} {:>9} {:>9} {:>8} {:>8}", "configuration", "seeds", "accuracy", "f1_macro", "BLEU-4", "ROUGE-L")?;
        for v in Variant::GRID {
            let runs: Vec<&AblationRun> = self.runs_of(v).collect();
            if runs.is_empty() {
                continue;
            }
            let opt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{:.4}", x));
            writeln!(
                f,
                "{:<32} {:>5} {:>9.4} {:>9.4} {:>8} {:>8}",
                v.label(),
                runs.len(),
                mean(runs.iter().map(|r| r.accuracy)).unwrap_or(0.0),
                mean(runs.iter().map(|r| r.f1_macro)).unwrap_or(0.0),
                opt(mean(runs.iter().filter_map(|r| r.bleu4))),
                opt(mean(runs.iter().filter_map(|r| r.rouge_l))),
            )?;
        }
        Ok(())
    }
}

/// Trains every variant for every seed. `items` is split once into train
/// and test parts (`test_fraction`, fixed split seed 0); each run then holds
/// out its own dev part of the training items.
pub fn run_grid(
    base: &TrainConfig,
    items: &[McqItem],
    seeds: &[u64],
    test_fraction: f64,
    log: &mut dyn FnMut(&AblationRun),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid("the ablation grid needs at least one seed".into()));
    }
    let (train_items, test_items) = split_dev(items, test_fraction, 0);
    if test_items.is_empty() {
        return Err(Error::Invalid("the test split is empty".into()));
    }
    let mut runs = Vec::new();
    for variant in Variant::GRID {
        for &seed in seeds {
            let config = TrainConfig { seed, viwordformer: variant.viwordformer, mode: variant.mode, ..base.clone() };
            let outcome = train(&config, &train_items, None, &mut |_: &EpochLog| {})?;
            let explain = match variant.mode {
                TaskMode::Multitask => Some((config.max_explanation_len, Strategy::Greedy)),
                TaskMode::Single => None,
            };
            let eval = evaluate(&outcome.model, &test_items, &config.caps(), explain)?;
            let run = AblationRun {
                variant,
                seed,
                epochs: outcome.epochs_run,
                accuracy: eval.report.overall.accuracy,
                f1_macro: eval.report.overall.f1_macro,
                bleu4: eval.report.generation.map(|g| g.bleu4),
                rouge_l: eval.report.generation.map(|g| g.rouge_l),
            };
            log(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_items, SynthConfig};

    #[test]
    fn grid_covers_all_four_configurations() {
        let items = synth_items(&SynthConfig { items: 40, ..SynthConfig::default() }).unwrap();
        let base = TrainConfig { d_model: 8, heads: 2, layers: 1, decoder_layers: 1, max_epochs: 1, max_explanation_len: 4, ..TrainConfig::default() };
        let mut seen = 0;
        let report = run_grid(&base, &items, &[1], 0.25, &mut |_| seen += 1).unwrap();
        assert_eq!((report.runs.len(), seen), (4, 4));
        for v in Variant::GRID {
            assert_eq!(report.runs_of(v).count(), 1);
            let run = report.runs_of(v).next().unwrap();
            assert_eq!(run.bleu4.is_some(), v.mode == TaskMode::Multitask);
        }
        let table = report.to_string();
        assert_eq!(table.lines().count(), 5);
        assert!(run_grid(&base, &items, &[], 0.25, &mut |_| {}).is_err());
    }
}
