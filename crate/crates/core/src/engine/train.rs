use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamRole};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{backward, forward, logits_node, Gradients, Mode};

/// Running-statistic momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

const VAL_FRACTION: f64 = 0.1;
const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Config(format!("unknown learning-rate schedule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            max_epochs: 200,
            patience: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a loop can be run as a no-op probe.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = epoch as f64 / self.max_epochs as f64;
                self.lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_acc,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6e}", self.epoch, self.train_loss, self.val_acc, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy.
    pub graph: ModelGraph,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Per-parameter momentum buffers, aligned with node params.
pub type Velocity = Vec<Vec<Vec<f64>>>;

pub fn zero_velocity(g: &ModelGraph) -> Velocity {
    g.nodes()
        .iter()
        .map(|n| n.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
        .collect()
}

/// One SGD step with momentum and L2 weight decay on every trainable parameter.
pub fn sgd_step(g: &mut ModelGraph, grads: &Gradients, velocity: &mut Velocity, lr: f64, momentum: f64, wd: f64) {
    for id in 0..g.len() {
        let node = g.node_mut(id);
        for (k, p) in node.params.iter_mut().enumerate() {
            if !p.role.trainable() {
                continue;
            }
            let gr = grads.params[id][k].data();
            let v = &mut velocity[id][k];
            for ((w, &d), vel) in p.value.data_mut().iter_mut().zip(gr).zip(v.iter_mut()) {
                let step = d + wd * *w;
                *vel = momentum * *vel + step;
                *w -= lr * *vel;
            }
        }
    }
}

/// Folds train-mode batch statistics into the BN running estimates.
pub(crate) fn update_running_stats(g: &mut ModelGraph, stats: &[Option<(Vec<f64>, Vec<f64>)>]) {
    for (id, s) in stats.iter().enumerate() {
        let Some((mean, var)) = s else { continue };
        let node = g.node_mut(id);
        for (role, batch) in [(ParamRole::RunningMean, mean), (ParamRole::RunningVar, var)] {
            if let Some(t) = node.param_mut(role) {
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class predictions, computed in fixed-size chunks.
pub fn predict_classes(g: &ModelGraph, x: &Tensor) -> Result<Vec<usize>> {
    let n = x.dim(0);
    let d = x.len() / n.max(1);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_parts(shape, x.data()[start * d..end * d].to_vec());
        let pass = forward(g, &chunk, Mode::Eval, None, None)?;
        let logits = &pass.outputs[logits_node(g)];
        let k = logits.dim(1);
        out.extend(logits.data().chunks(k).map(argmax));
        start = end;
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy(g: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict_classes(g, &data.x)?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean eval-mode cross-entropy over `data`.
pub fn evaluate_loss(g: &ModelGraph, data: &Dataset) -> Result<f64> {
    let losses = super::per_sample_loss(g, &data.x, &data.y)?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Splits off a seed-determined tenth of the data for validation.
///
/// Datasets too small to spare a validation sample validate on the training set.
pub fn train_val_split(data: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let n = data.len();
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    if n_val == 0 || n_val == n {
        return (data.clone(), data.clone());
    }
    let perm = Rng::derive(seed, 0x7661_6c).permutation(n);
    let (val, train) = perm.split_at(n_val);
    (data.subset(train), data.subset(val))
}

/// Runs one epoch of minibatch SGD over `data`; returns the mean batch loss.
fn run_epoch(
    g: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    velocity: &mut Velocity,
    rng: &mut Rng,
) -> Result<f64> {
    let order = rng.permutation(data.len());
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch = data.subset(chunk);
        let pass = forward(g, &batch.x, Mode::Train, Some(rng), None)?;
        let grads = backward(g, &pass, &batch.y)?;
        if !grads.loss.is_finite() {
            return Err(Error::Numerical(format!("training diverged (loss {})", grads.loss)));
        }
        total += grads.loss;
        batches += 1;
        sgd_step(g, &grads, velocity, lr, cfg.momentum, cfg.weight_decay);
        update_running_stats(g, &pass.bn_stats);
    }
    Ok(total / batches as f64)
}

/// Trains `g` with SGD and returns the best-validation snapshot.
///
/// Stops early once `patience` consecutive epochs fail to strictly improve
/// validation accuracy.
pub fn train(g: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let (train_set, val_set) = train_val_split(data, cfg.seed);
    let mut rng = Rng::derive(cfg.seed, 0x7472_6e);
    let mut current = g.clone();
    let mut velocity = zero_velocity(g);
    let mut history = Vec::new();
    let mut best = (current.clone(), 0, f64::NEG_INFINITY);
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let loss = run_epoch(&mut current, &train_set, cfg, lr, &mut velocity, &mut rng)?;
        let val_acc = accuracy(&current, &val_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss,
            val_acc,
            lr,
        });
        if val_acc > best.2 {
            best = (current.clone(), epoch, val_acc);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        graph: best.0,
        history,
        best_epoch: best.1,
        best_val_acc: best.2,
    })
}
