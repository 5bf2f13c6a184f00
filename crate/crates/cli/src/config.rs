use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xsdc::data::{self, BlobSpec, Dataset, DEFAULT_SPLIT};
use xsdc::trainer::{Mode, TrainConfig};
use xsdc::{Error, Result};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        label_column: Option<usize>,
        #[serde(default)]
        header: bool,
        k: Option<usize>,
    },
    Libsvm {
        path: PathBuf,
    },
    Blobs(BlobSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: DEFAULT_SPLIT.0,
            val: DEFAULT_SPLIT.1,
            seed: 0,
        }
    }
}

fn yes() -> bool {
    true
}

/// One run: where the data comes from, where outputs go, and the trainer
/// settings. `mode` lives at the top level only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub format_version: u32,
    pub mode: Mode,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Split fractions for file datasets; generated blobs carry their own.
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if raw.get("train").and_then(|t| t.get("mode")).is_some() {
            return Err(Error::InvalidInput("`mode` belongs at the top level, not inside `train`".into()));
        }
        let mut cfg: RunConfigFile = serde_json::from_value(raw)?;
        if cfg.format_version != RUN_CONFIG_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported format_version {} (expected {RUN_CONFIG_VERSION})",
                cfg.format_version
            )));
        }
        cfg.train.mode = cfg.mode;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.dataset {
            DatasetSource::Csv { path: p, .. } | DatasetSource::Libsvm { path: p } if p.is_relative() => {
                *p = base.join(&*p);
            }
            _ => {}
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.dataset {
            DatasetSource::Csv {
                path,
                label_column,
                header,
                k,
            } => data::load_csv(path, *label_column, *header, *k)?,
            DatasetSource::Libsvm { path } => data::load_libsvm(path)?,
            DatasetSource::Blobs(spec) => data::make_blobs(spec)?,
        };
        if !matches!(self.dataset, DatasetSource::Blobs(_)) {
            let s = self.split.unwrap_or_default();
            ds.assign_splits(s.train, s.val, s.seed)?;
        } else if self.split.is_some() {
            return Err(Error::InvalidInput("`split` does not apply to generated blobs".into()));
        }
        if self.standardize {
            ds = data::standardize(&ds)?;
        }
        Ok(ds)
    }
}
