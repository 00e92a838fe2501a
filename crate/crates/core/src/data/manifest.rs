use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticConfig;
use crate::error::{Error, Result};

pub const HHAR_CLASSES: [&str; 6] = [
    "Biking",
    "Sitting",
    "Standing",
    "Walking",
    "Stairs-Up",
    "Stairs-Down",
];
pub const NOTCH_CLASSES: [&str; 2] = ["fall", "not-fall"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    HharWatch,
    SmartfallNotch,
    Synthetic,
}

/// A column by header name or zero-based position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub timestamp: ColumnRef,
    pub x: ColumnRef,
    pub y: ColumnRef,
    pub z: ColumnRef,
    pub user: ColumnRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<ColumnRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ColumnRef>,
    /// Multiplier converting timestamps to seconds.
    #[serde(default = "one")]
    pub timestamp_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RatePolicy {
    /// Every stream has this rate.
    Fixed { hz: f64 },
    /// Rate looked up by device id.
    PerDevice { devices: BTreeMap<String, f64> },
    /// Rate estimated from the median timestamp step of each stream.
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: DatasetId,
    pub classes: Vec<String>,
    #[serde(default = "default_window_seconds")]
    pub window_seconds: f64,
    /// Common rate every stream is decimated to.
    pub target_hz: f64,
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "yes")]
    pub has_header: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<ColumnMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RatePolicy>,
    /// Raw label text -> class name; labels equal to a class name need no entry.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Directory relative source paths resolve against; set by [`DatasetManifest::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_window_seconds() -> f64 {
    2.0
}

fn default_delimiter() -> char {
    ','
}

fn yes() -> bool {
    true
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::from_toml(&std::fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate class {c:?}")));
            }
        }
        if self.window_seconds <= 0.0 || self.target_hz <= 0.0 {
            return Err(Error::Config(
                "window_seconds and target_hz must be positive".into(),
            ));
        }
        for (raw, class) in &self.labels {
            if !self.classes.contains(class) {
                return Err(Error::Config(format!(
                    "label {raw:?} maps to unknown class {class:?}"
                )));
            }
        }
        match self.dataset_id {
            DatasetId::Synthetic => {
                let s = self.synthetic.as_ref().ok_or_else(|| {
                    Error::Config("synthetic dataset needs a [synthetic] table".into())
                })?;
                if s.num_classes != self.classes.len() {
                    return Err(Error::Config(format!(
                        "synthetic num_classes {} differs from {} listed classes",
                        s.num_classes,
                        self.classes.len()
                    )));
                }
            }
            _ => {
                if self.sources.is_empty() {
                    return Err(Error::Config("no source files listed".into()));
                }
                if self.columns.is_none() {
                    return Err(Error::Config("no column mapping".into()));
                }
            }
        }
        Ok(())
    }

    /// Class index of a raw label, or `None` for unlabeled / unknown text.
    pub fn class_of(&self, raw: &str) -> Option<usize> {
        let name = self.labels.get(raw).map(String::as_str).unwrap_or(raw);
        self.classes.iter().position(|c| c == name)
    }

    /// Manifest for a generated corpus.
    pub fn synthetic(config: SyntheticConfig, target_hz: f64) -> Self {
        Self {
            dataset_id: DatasetId::Synthetic,
            classes: (0..config.num_classes)
                .map(|c| format!("class{c}"))
                .collect(),
            window_seconds: config.window_seconds,
            target_hz,
            sources: Vec::new(),
            delimiter: ',',
            has_header: true,
            columns: None,
            rates: None,
            labels: BTreeMap::new(),
            synthetic: Some(config),
            base_dir: PathBuf::new(),
        }
    }
}
