use serde::{Deserialize, Serialize};

use crate::criteria::{self, Criterion};
use crate::data::Dataset;
use crate::engine::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{ChannelAnalysis, ModelGraph};
use crate::pruner::{self, PruneMode, PruningSpec};

use super::{build_toy_mlp, gen_blobs, BlobSpec};

/// Offset applied to the experiment seed for the scoring-sample draw, so the
/// scoring set never overlaps the training or test draws.
const SCORING_SEED_OFFSET: u64 = 0x5c0e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExperimentConfig {
    pub seed: u64,
    pub blobs: BlobSpec,
    pub train: TrainConfig,
    /// Fresh samples per class drawn for scoring.
    pub scoring_per_class: usize,
    /// Hidden neurons removed, out of the 3000 prunable ones.
    pub remove: usize,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blobs: BlobSpec::default(),
            train: TrainConfig {
                max_epochs: 8,
                patience: 8,
                ..Default::default()
            },
            scoring_per_class: 100,
            remove: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    /// `original` or a criterion name.
    pub label: String,
    /// Accuracy in percent on the training samples.
    pub accuracy: f64,
    /// Accuracy drop against the original model, in points.
    pub drop: f64,
    /// Accuracy in percent on the held-out test split.
    pub test_accuracy: f64,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<ToyRow>,
}

impl ToyReport {
    pub fn row(&self, label: &str) -> Option<&ToyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn original_accuracy(&self) -> f64 {
        self.rows[0].accuracy
    }

    pub fn drop_of(&self, c: Criterion) -> Option<f64> {
        self.row(c.name()).map(|r| r.drop)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,accuracy,drop,test_accuracy,removed,seed\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{},{}\n",
                r.label, r.accuracy, r.drop, r.test_accuracy, r.removed, self.seed
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("toy experiment (seed {}, {} epochs)\n", self.seed, self.epochs);
        s.push_str(&format!("{:<10} {:>9} {:>8} {:>9} {:>8}\n", "model", "accuracy", "drop", "test", "removed"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>8.2}% {:>8.2} {:>8.2}% {:>8}\n",
                r.label, r.accuracy, r.drop, r.test_accuracy, r.removed
            ));
        }
        s
    }
}

/// Scores and prunes `g` globally by `remove` neurons for one criterion, without fine-tuning.
pub fn prune_toy(g: &ModelGraph, scoring: &Dataset, criterion: Criterion, remove: usize, seed: u64) -> Result<ModelGraph> {
    let analysis = ChannelAnalysis::new(g)?;
    let total = analysis.prunable_channel_count();
    if remove >= total {
        return Err(Error::Config(format!("cannot remove {remove} of {total} neurons")));
    }
    let spec = PruningSpec {
        mode: PruneMode::Global,
        threshold: remove as f64 / total as f64,
        criterion,
        seed,
        ..Default::default()
    };
    let scores = criteria::score(g, &analysis, criterion, &scoring.x, &scoring.y, seed)?;
    let plan = pruner::plan(g, &scores, &spec)?;
    if plan.removed_channels() != remove {
        return Err(Error::Consistency(format!(
            "{criterion} plan removes {} neurons, wanted {remove}",
            plan.removed_channels()
        )));
    }
    pruner::execute(g, &plan)
}

/// Blobs, MLP training, then one global prune per criterion.
///
/// Accuracy is measured on the training samples, with test accuracy alongside.
pub fn toy_experiment(cfg: &ToyExperimentConfig) -> Result<ToyReport> {
    let blobs = BlobSpec {
        seed: cfg.seed,
        ..cfg.blobs.clone()
    };
    let (train_set, test_set) = gen_blobs(&blobs)?;
    let (scoring, _) = gen_blobs(&BlobSpec {
        seed: cfg.seed.wrapping_add(SCORING_SEED_OFFSET),
        per_class: cfg.scoring_per_class,
        test_fraction: 0.0,
        ..blobs.clone()
    })?;
    let g = build_toy_mlp(blobs.classes, cfg.seed)?;
    let outcome = engine::train(
        &g,
        &train_set,
        &TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        },
    )?;
    let trained = outcome.graph;
    let base = 100.0 * engine::accuracy(&trained, &train_set)?;
    let mut rows = vec![ToyRow {
        label: "original".into(),
        accuracy: base,
        drop: 0.0,
        test_accuracy: 100.0 * engine::accuracy(&trained, &test_set)?,
        removed: 0,
    }];
    for c in Criterion::ALL {
        let pruned = prune_toy(&trained, &scoring, c, cfg.remove, cfg.seed)?;
        let acc = 100.0 * engine::accuracy(&pruned, &train_set)?;
        rows.push(ToyRow {
            label: c.name().into(),
            accuracy: acc,
            drop: base - acc,
            test_accuracy: 100.0 * engine::accuracy(&pruned, &test_set)?,
            removed: cfg.remove,
        });
    }
    Ok(ToyReport {
        seed: cfg.seed,
        epochs: outcome.history.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyExperimentConfig {
        ToyExperimentConfig {
            seed: 3,
            blobs: BlobSpec {
                per_class: 20,
                ..Default::default()
            },
            train: TrainConfig {
                max_epochs: 1,
                ..Default::default()
            },
            scoring_per_class: 5,
            remove: 1000,
        }
    }

    #[test]
    fn report_has_original_and_every_criterion() {
        let r = toy_experiment(&tiny()).unwrap();
        let labels: Vec<&str> = r.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["original", "nuclear", "weight", "gradient", "taylor", "lrp"]);
        for row in &r.rows[1..] {
            assert_eq!(row.removed, 1000);
            assert!((row.drop - (r.original_accuracy() - row.accuracy)).abs() < 1e-12);
        }
        assert_eq!(r.to_csv().lines().count(), 7);
        assert_eq!(toy_experiment(&tiny()).unwrap().to_table(), r.to_table());
    }

    #[test]
    fn pruned_mlp_keeps_2000_hidden_neurons() {
        let cfg = tiny();
        let g = build_toy_mlp(4, 0).unwrap();
        let (scoring, _) = gen_blobs(&BlobSpec {
            per_class: cfg.scoring_per_class,
            ..cfg.blobs
        })
        .unwrap();
        let pruned = prune_toy(&g, &scoring, Criterion::Nuclear, 1000, 0).unwrap();
        let widths: usize = ["fc1", "fc2", "fc3"]
            .iter()
            .map(|n| match pruned.node(pruned.find(n).unwrap()).kind {
                crate::graph::LayerKind::Dense { units, .. } => units,
                _ => unreachable!(),
            })
            .sum();
        assert_eq!(widths, 2000);
        assert!(prune_toy(&g, &scoring, Criterion::Nuclear, 3000, 0).is_err());
    }
}
