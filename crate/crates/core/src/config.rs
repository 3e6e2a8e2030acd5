//! Experiment configuration, stored as TOML.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [trunk]
//! n_layers = 6
//! base_channels = 8
//!
//! [pretrain]
//! epochs = 5
//!
//! [pretrain.anchor]
//! kind = "shapes"
//! classes = 10
//! samples_per_class = 200
//! test_per_class = 20
//!
//! [search]
//! t_max = 150
//! batch_size = 32
//! cell_nodes = 3
//!
//! [[domains]]
//! id = "rotated"
//! source = "synthetic"
//! kind = "rotated-shapes"
//! classes = 5
//! samples_per_class = 150
//! test_per_class = 60
//! palette = 1
//!
//! [[domains]]
//! id = "digits"
//! source = "files"
//! train = { path = "data/digits/train", format = "idx" }
//! test = { path = "data/digits/test", format = "idx" }
//! complexity_rank = 2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::BaselineAdapter;
use crate::data::{generate_domain, load_dataset, DataFormat, GeneratorKind, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::trainer::{DomainData, SearchHyper};
use crate::trunk::PretrainHyper;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkConfig {
    pub n_layers: usize,
    pub base_channels: usize,
    #[serde(default = "default_input_shape")]
    pub input_shape: [usize; 3],
}

fn default_input_shape() -> [usize; 3] {
    [3, 16, 16]
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig { n_layers: 6, base_channels: 8, input_shape: default_input_shape() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    #[serde(flatten)]
    pub hyper: PretrainHyper,
    pub anchor: SyntheticDomainSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hyper: PretrainHyper::default(),
            anchor: SyntheticDomainSpec::new(GeneratorKind::Shapes, 10, 200, 20),
        }
    }
}

/// Adapter structures every strategy plugs in `compare`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareStructures {
    /// The searched structures and mask of each run.
    #[default]
    Searched,
    /// One handcrafted adapter at every location; the searched mask comes
    /// from a plugging search over that adapter.
    BnAdapt,
    Conv1x1Adapt,
    ResAdapt,
}

impl CompareStructures {
    pub fn baseline(self) -> Option<BaselineAdapter> {
        match self {
            CompareStructures::Searched => None,
            CompareStructures::BnAdapt => Some(BaselineAdapter::BnAdapt),
            CompareStructures::Conv1x1Adapt => Some(BaselineAdapter::Conv1x1Adapt),
            CompareStructures::ResAdapt => Some(BaselineAdapter::ResAdapt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Number of random masks per searched run.
    pub random_masks: usize,
    #[serde(default)]
    pub structures: CompareStructures,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { random_masks: 5, structures: CompareStructures::Searched }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSource {
    pub path: PathBuf,
    #[serde(flatten)]
    pub format: DataFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DomainSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticDomainSpec,
        /// Generation seed; derived from the global seed and id if absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    Files {
        train: FileSource,
        test: FileSource,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub id: String,
    /// Defaults to the generator's rank for synthetic domains.
    #[serde(default)]
    pub complexity_rank: Option<u32>,
    #[serde(flatten)]
    pub source: DomainSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Independent search repetitions per domain.
    #[serde(default = "one")]
    pub repeats: usize,
    /// Also train the full-finetune and head-only references.
    #[serde(default)]
    pub baselines: bool,
    #[serde(default)]
    pub trunk: TrunkConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub search: SearchHyper,
    #[serde(default)]
    pub compare: CompareConfig,
    pub domains: Vec<DomainConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // relative data paths resolve against the config file
        if let Some(dir) = path.parent() {
            for d in &mut cfg.domains {
                if let DomainSource::Files { train, test, .. } = &mut d.source {
                    for f in [train, test] {
                        if f.path.is_relative() {
                            f.path = dir.join(&f.path);
                        }
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one [[domains]] entry is required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate domain id {:?}", w[0])));
        }
        for d in &self.domains {
            let valid = !d.id.is_empty() && d.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !valid {
                return Err(Error::Config(format!("domain id {:?} must be non-empty [A-Za-z0-9_-]", d.id)));
            }
            if let DomainSource::Synthetic { spec, .. } = &d.source {
                if spec.image_shape != self.trunk.input_shape {
                    return Err(Error::Config(format!("domain {}: image shape differs from trunk input", d.id)));
                }
            }
        }
        self.search.validate()
    }

    /// Seed of search repetition `r`; repetition 0 uses the global seed.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.seed
        } else {
            derive_seed(self.seed, &format!("repeat/{r}"))
        }
    }

    /// Materializes every domain's data in config order.
    pub fn load_domains(&self) -> Result<Vec<DomainData>> {
        self.domains.iter().map(|d| self.load_domain(d).map_err(|e| e.in_domain(&d.id))).collect()
    }

    fn load_domain(&self, d: &DomainConfig) -> Result<DomainData> {
        match &d.source {
            DomainSource::Synthetic { spec, seed } => {
                let seed = seed.unwrap_or_else(|| derive_seed(self.seed, &format!("data/{}", d.id)));
                let (train, test) = generate_domain(spec, seed)?;
                DomainData::new(&d.id, train, test, Some(d.complexity_rank.unwrap_or(spec.complexity_rank())))
            }
            DomainSource::Files { train, test, num_classes } => {
                let tr = load_dataset(&train.path, train.format, *num_classes)?;
                let te = load_dataset(&test.path, test.format, Some(num_classes.unwrap_or(tr.num_classes())))?;
                if tr.shape() != self.trunk.input_shape {
                    return Err(Error::Data(format!("image shape {:?} differs from trunk input", tr.shape())));
                }
                DomainData::new(&d.id, tr, te, d.complexity_rank)
            }
        }
    }
}
