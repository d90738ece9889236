//! Run configuration files.
//!
//! A config is a TOML document whose top-level keys are the training
//! settings, plus a `[data]` table naming the input files and split
//! boundaries:
//!
//! ```toml
//! seed = 7
//! hidden_dim = 64
//! ablations = { hmp = true }
//!
//! [data]
//! events = "events.jsonl"
//! taxonomy = "taxonomy.csv"
//! train_end = "2017-01-01"
//! val_end = "2018-01-01"
//! test_end = "2019-01-01"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::time::parse_timestamp;
use crate::corpus::{filter_companies, load_events, load_taxonomy, Dataset, RecencyRule, Splits};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// A split boundary given either as epoch seconds or as a date string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Seconds(f64),
    Text(String),
}

impl TimeSpec {
    pub fn resolve(&self) -> Result<f64> {
        match self {
            TimeSpec::Seconds(s) => Ok(*s),
            TimeSpec::Text(t) => parse_timestamp(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub train_end: Option<TimeSpec>,
    pub val_end: Option<TimeSpec>,
    pub test_end: Option<TimeSpec>,
    /// Reference time for first interactions; defaults to the first event.
    pub origin: Option<TimeSpec>,
    /// Drop companies without enough history or recent activity.
    pub filter: bool,
    pub recency: RecencyRule,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            events: None,
            taxonomy: None,
            train_end: None,
            val_end: None,
            test_end: None,
            origin: None,
            filter: true,
            recency: RecencyRule::All,
        }
    }
}

impl DataConfig {
    pub fn splits(&self) -> Result<Option<Splits>> {
        match (&self.train_end, &self.val_end, &self.test_end) {
            (None, None, None) => Ok(None),
            (Some(a), Some(b), Some(c)) => Ok(Some(Splits::new(a.resolve()?, b.resolve()?, c.resolve()?)?)),
            _ => Err(Error::Config("train_end, val_end and test_end must be given together".into())),
        }
    }

    fn path(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::Config(format!("[data] {field} is not set")))
    }

    /// Loads taxonomy and events, applies the splits and, when enabled and
    /// splits are known, the company filter.
    pub fn load(&self) -> Result<Dataset> {
        let taxonomy = Arc::new(load_taxonomy(self.path("taxonomy", &self.taxonomy)?)?);
        let mut dataset = load_events(self.path("events", &self.events)?, taxonomy)?;
        if let Some(origin) = &self.origin {
            let origin = origin.resolve()?;
            if dataset.events.first().is_some_and(|e| e.timestamp < origin) {
                return Err(Error::Config("origin lies after the first event".into()));
            }
            dataset.origin = origin;
        }
        if let Some(splits) = self.splits()? {
            dataset = dataset.with_splits(splits);
            if self.filter {
                dataset = filter_companies(&dataset, self.recency)?;
            }
        }
        Ok(dataset)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut data: DataConfig = match table.remove("data") {
            Some(v) => v.try_into().map_err(|e| Error::Config(format!("[data]: {e}")))?,
            None => DataConfig::default(),
        };
        let train: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("training settings: {e}")))?;
        for p in [&mut data.events, &mut data.taxonomy].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(RunConfig { data, train })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.train).expect("training settings serialize");
        table.insert("data".into(), toml::Value::try_from(&self.data).expect("data settings serialize"));
        toml::to_string(&table).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::MetricAt;

    #[test]
    fn parses_flat_settings_and_data_table() {
        let text = r#"
seed = 7
hidden_dim = 32
learning_rate = 0.001
selection_metric = "ndcg@20"
ablations = { hmp = true }

[data]
events = "ev.jsonl"
taxonomy = "/abs/tax.csv"
train_end = "2017-01-01"
val_end = 1514764800
test_end = "2019-01-01T00:00:00Z"
recency = "any"
"#;
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.hidden_dim, 32);
        assert!(cfg.train.ablations.hmp && !cfg.train.ablations.mi);
        assert_eq!(cfg.train.selection_metric, "ndcg@20".parse::<MetricAt>().unwrap());
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data.events.as_deref(), Some(Path::new("/base/ev.jsonl")));
        assert_eq!(cfg.data.taxonomy.as_deref(), Some(Path::new("/abs/tax.csv")));
        assert_eq!(cfg.data.recency, RecencyRule::Any);
        let s = cfg.data.splits().unwrap().unwrap();
        assert_eq!(s.train_end, 1_483_228_800.0);
        assert_eq!(s.val_end, 1_514_764_800.0);
        assert_eq!(s.test_end, 1_546_300_800.0);
    }

    #[test]
    fn rejects_unknown_keys_and_partial_splits() {
        assert!(matches!(RunConfig::parse("bogus = 1", Path::new("")), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("[data]\nbogus = 1", Path::new("")),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig::parse("[data]\ntrain_end = 5", Path::new("")).unwrap();
        assert!(matches!(cfg.data.splits(), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed = [", Path::new("")), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 11;
        cfg.train.negatives_per_positive = Some(4);
        cfg.data.events = Some("/x/events.jsonl".into());
        cfg.data.train_end = Some(TimeSpec::Text("2013-01-01".into()));
        cfg.data.val_end = Some(TimeSpec::Seconds(2.0e9));
        let back = RunConfig::parse(&cfg.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }
}
