//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment that runs to the end of
//! the line. Unknown keys, duplicate keys and keys that do not apply to the
//! chosen batch mode are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::calibration::Horizon;
use crate::data::{load_idx, subset_split, synthetic_blobs, Dataset, Split};
use crate::dpsgd::{BatchMode, ClipConfig, TrainConfig};
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "DP_LEDGER_SEED";

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "n_train",
    "n_test",
    "synthetic_dim",
    "synthetic_classes",
    "synthetic_spread",
    "data_seed",
    "hidden",
    "learning_rate",
    "epochs",
    "steps",
    "batch_mode",
    "batch_size",
    "q",
    "clip",
    "sigma",
    "delta",
    "seed",
    "eval_every",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        dim: usize,
        classes: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

/// Parses the raw text into an ordered key → value map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {}: `{key}` has no value", lineno + 1)));
        }
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(pairs)
}

struct Keys {
    pairs: BTreeMap<String, String>,
}

impl Keys {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.pairs.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`"))),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn forbid(&self, key: &str, why: &str) -> Result<()> {
        if self.pairs.contains_key(key) {
            return Err(Error::Config(format!("`{key}` does not apply {why}")));
        }
        Ok(())
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Seed precedence: `seed` key, then `DP_LEDGER_SEED`, then 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = Keys { pairs: parse_pairs(text)? };

        let dataset: String = keys.or("dataset", "synthetic".to_string())?;
        let data = match dataset.as_str() {
            "synthetic" => {
                for k in ["train_images", "train_labels", "test_images", "test_labels"] {
                    keys.forbid(k, "to synthetic data")?;
                }
                DataSource::Synthetic {
                    dim: keys.or("synthetic_dim", 10)?,
                    classes: keys.or("synthetic_classes", 4)?,
                    spread: keys.or("synthetic_spread", 1.5)?,
                }
            }
            "idx" => {
                for k in ["synthetic_dim", "synthetic_classes", "synthetic_spread"] {
                    keys.forbid(k, "to idx data")?;
                }
                DataSource::Idx {
                    train_images: keys.require("train_images")?,
                    train_labels: keys.require("train_labels")?,
                    test_images: keys.require("test_images")?,
                    test_labels: keys.require("test_labels")?,
                }
            }
            other => return Err(Error::Config(format!("dataset must be synthetic or idx, got `{other}`"))),
        };

        let batch_mode: String = keys.require("batch_mode")?;
        let batch = match batch_mode.as_str() {
            "full" => {
                keys.forbid("q", "to full-batch training")?;
                keys.forbid("batch_size", "to full-batch training")?;
                BatchMode::Full
            }
            "fixed" => {
                keys.forbid("q", "to fixed-size batches")?;
                BatchMode::Fixed(keys.require("batch_size")?)
            }
            "poisson" => {
                keys.forbid("batch_size", "to poisson sampling")?;
                BatchMode::Poisson(keys.require("q")?)
            }
            other => {
                return Err(Error::Config(format!(
                    "batch_mode must be full, fixed or poisson, got `{other}`"
                )))
            }
        };

        let horizon = match (keys.take::<u64>("epochs")?, keys.take::<u64>("steps")?) {
            (Some(e), None) => Horizon::Epochs(e),
            (None, Some(s)) => Horizon::Steps(s),
            _ => return Err(Error::Config("exactly one of `epochs` or `steps` is required".into())),
        };

        let clip_raw: String = keys.or("clip", "1.0".to_string())?;
        let clip = if clip_raw == "none" {
            ClipConfig::Unbounded
        } else {
            let c: f64 = clip_raw
                .parse()
                .map_err(|_| Error::Config(format!("`clip` must be a number or `none`, got `{clip_raw}`")))?;
            ClipConfig::bounded(c).map_err(|e| Error::Config(e.to_string()))?
        };

        let seed = match keys.take("seed")? {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };

        let train = TrainConfig {
            hidden: keys.or("hidden", 0)?,
            learning_rate: keys.require("learning_rate")?,
            horizon,
            batch,
            clip,
            sigma: keys.or("sigma", 0.0)?,
            delta: keys.or("delta", 1e-5)?,
            seed,
            eval_every: keys.or("eval_every", 10)?,
        };
        let cfg = RunConfig {
            data,
            n_train: keys.or("n_train", 1000)?,
            n_test: keys.or("n_test", 1000)?,
            data_seed: keys.or("data_seed", 0)?,
            train,
            out_dir: keys.take("out_dir")?,
        };
        debug_assert!(keys.pairs.is_empty(), "unconsumed keys {:?}", keys.pairs);
        Ok(cfg)
    }

    /// Canonical text form; parsing it back yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# dp-noise-ledger v1 resolved configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic { dim, classes, spread } => {
                put("dataset", "synthetic".into());
                put("synthetic_dim", dim.to_string());
                put("synthetic_classes", classes.to_string());
                put("synthetic_spread", spread.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                put("dataset", "idx".into());
                put("train_images", train_images.display().to_string());
                put("train_labels", train_labels.display().to_string());
                put("test_images", test_images.display().to_string());
                put("test_labels", test_labels.display().to_string());
            }
        }
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("data_seed", self.data_seed.to_string());
        let t = &self.train;
        put("hidden", t.hidden.to_string());
        put("learning_rate", t.learning_rate.to_string());
        match t.horizon {
            Horizon::Epochs(e) => put("epochs", e.to_string()),
            Horizon::Steps(s) => put("steps", s.to_string()),
        }
        match t.batch {
            BatchMode::Full => put("batch_mode", "full".into()),
            BatchMode::Fixed(b) => {
                put("batch_mode", "fixed".into());
                put("batch_size", b.to_string());
            }
            BatchMode::Poisson(q) => {
                put("batch_mode", "poisson".into());
                put("q", q.to_string());
            }
        }
        put(
            "clip",
            match t.clip {
                ClipConfig::Bounded(c) => c.to_string(),
                ClipConfig::Unbounded => "none".into(),
            },
        );
        put("sigma", t.sigma.to_string());
        put("delta", t.delta.to_string());
        put("seed", t.seed.to_string());
        put("eval_every", t.eval_every.to_string());
        if let Some(dir) = &self.out_dir {
            put("out_dir", dir.display().to_string());
        }
        out
    }

    /// Materializes the train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic { dim, classes, spread } => {
                let all = synthetic_blobs(self.n_train + self.n_test, *dim, *classes, *spread, self.data_seed)?;
                subset_split(&all, self.n_train, self.n_test, self.data_seed)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train_full = load_idx(train_images, train_labels, Split::Train)?;
                let test_full = load_idx(test_images, test_labels, Split::Test)?;
                let (mut train, _) = subset_split(&train_full, self.n_train, 0, self.data_seed)?;
                let (_, mut test) = subset_split(&test_full, 0, self.n_test, self.data_seed)?;
                let classes = train.num_classes.max(test.num_classes);
                train.num_classes = classes;
                test.num_classes = classes;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}
