//! Flat `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments win,
//! so command-line overrides are applied by setting keys after the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use enprune::criteria::{Criterion, Normalization};
use enprune::engine::{Schedule as LrSchedule, TrainConfig};
use enprune::pruner::{Aggregation, PruneMode, PruningSpec, Schedule};
use enprune::toybench::{BlobSpec, PatternSpec, ToyExperimentConfig};
use enprune::{Error, Result};

const LAYER_RATIO_PREFIX: &str = "prune.layer_ratio.";

/// Every recognised key except the `prune.layer_ratio.<layer>` family.
pub const KEYS: &[&str] = &[
    "seed",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.schedule",
    "train.max_epochs",
    "train.patience",
    "train.batch_size",
    "train.seed",
    "prune.mode",
    "prune.ratio",
    "prune.threshold",
    "prune.criterion",
    "prune.aggregation",
    "prune.protected",
    "prune.normalization",
    "prune.schedule",
    "prune.step",
    "prune.seed",
    "data.kind",
    "data.classes",
    "data.per_class",
    "data.test_fraction",
    "data.test_per_class",
    "data.std",
    "data.radius",
    "data.channels",
    "data.size",
    "data.noise",
    "data.max_shift",
    "score.samples",
    "toy.scoring_per_class",
    "toy.remove",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !KEYS.contains(&key) && !key.starts_with(LAYER_RATIO_PREFIX) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Sets `key` only when an override is present.
    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    /// Applies a `key=value` override.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
            })
            .transpose()
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.get("seed")?.unwrap_or(0))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            seed: self.seed()?,
            ..TrainConfig::default()
        };
        macro_rules! field {
            ($f:ident) => {
                if let Some(v) = self.get(concat!("train.", stringify!($f)))? {
                    t.$f = v;
                }
            };
        }
        field!(lr);
        field!(momentum);
        field!(weight_decay);
        field!(max_epochs);
        field!(patience);
        field!(batch_size);
        field!(seed);
        if let Some(s) = self.values.get("train.schedule") {
            t.schedule = s.parse::<LrSchedule>()?;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn pruning(&self) -> Result<PruningSpec> {
        let mut p = PruningSpec {
            seed: self.seed()?,
            ..PruningSpec::default()
        };
        if let Some(v) = self.get("prune.ratio")? {
            p.ratio = v;
        }
        if let Some(v) = self.get("prune.threshold")? {
            p.threshold = v;
        }
        if let Some(v) = self.get("prune.seed")? {
            p.seed = v;
        }
        if let Some(s) = self.values.get("prune.mode") {
            p.mode = s.parse::<PruneMode>()?;
        }
        if let Some(s) = self.values.get("prune.criterion") {
            p.criterion = s.parse::<Criterion>()?;
        }
        if let Some(s) = self.values.get("prune.aggregation") {
            p.aggregation = s.parse::<Aggregation>()?;
        }
        if let Some(s) = self.values.get("prune.normalization") {
            p.normalization = match s.as_str() {
                "auto" => None,
                other => Some(other.parse::<Normalization>()?),
            };
        }
        if let Some(s) = self.values.get("prune.protected") {
            p.protected = s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        for (k, v) in self.values.range(LAYER_RATIO_PREFIX.to_string()..) {
            let Some(layer) = k.strip_prefix(LAYER_RATIO_PREFIX) else { break };
            let r: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for '{k}'")))?;
            p.layer_ratios.insert(layer.to_string(), r);
        }
        let step: Option<f64> = self.get("prune.step")?;
        // A step on its own implies the iterative schedule.
        p.schedule = match self.values.get("prune.schedule").map(String::as_str) {
            None => step.map_or(Schedule::OneShot, |step| Schedule::Iterative { step }),
            Some("one_shot") | Some("one-shot") => Schedule::OneShot,
            Some("iterative") => Schedule::Iterative {
                step: step.ok_or_else(|| Error::Config("iterative schedule needs prune.step".into()))?,
            },
            Some(other) => return Err(Error::Config(format!("unknown pruning schedule '{other}'"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn blobs(&self) -> Result<BlobSpec> {
        let mut b = BlobSpec {
            seed: self.seed()?,
            ..BlobSpec::default()
        };
        macro_rules! field {
            ($f:ident) => {
                if let Some(v) = self.get(concat!("data.", stringify!($f)))? {
                    b.$f = v;
                }
            };
        }
        field!(classes);
        field!(per_class);
        field!(test_fraction);
        field!(std);
        field!(radius);
        Ok(b)
    }

    pub fn patterns(&self) -> Result<PatternSpec> {
        let mut p = PatternSpec {
            seed: self.seed()?,
            ..PatternSpec::default()
        };
        macro_rules! field {
            ($f:ident) => {
                if let Some(v) = self.get(concat!("data.", stringify!($f)))? {
                    p.$f = v;
                }
            };
        }
        field!(classes);
        field!(per_class);
        field!(test_per_class);
        field!(channels);
        field!(size);
        field!(noise);
        field!(max_shift);
        Ok(p)
    }

    pub fn toy(&self) -> Result<ToyExperimentConfig> {
        let mut t = ToyExperimentConfig {
            seed: self.seed()?,
            ..ToyExperimentConfig::default()
        };
        // Only explicitly configured training fields replace the toy defaults.
        let train = self.train()?;
        macro_rules! train_field {
            ($f:ident) => {
                if self.values.contains_key(concat!("train.", stringify!($f))) {
                    t.train.$f = train.$f.clone();
                }
            };
        }
        train_field!(lr);
        train_field!(momentum);
        train_field!(weight_decay);
        train_field!(schedule);
        train_field!(max_epochs);
        train_field!(patience);
        train_field!(batch_size);
        t.blobs = BlobSpec {
            seed: t.seed,
            ..self.blobs()?
        };
        if let Some(v) = self.get("toy.scoring_per_class")? {
            t.scoring_per_class = v;
        }
        if let Some(v) = self.get("toy.remove")? {
            t.remove = v;
        }
        Ok(t)
    }
}
