//! Run configuration, loaded from TOML and overridable field by field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AggregationMode;
use crate::data::{DatasetPaths, SplitFractions, SplitKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_MAX_REGIONS, DEFAULT_TAU_U};
use crate::losses::{LossConfig, LossKind, DEFAULT_BETA, DEFAULT_EPSILON};
use crate::model::ModelSpec;
use crate::types::RelationshipTaxonomy;

/// Where records and pixels come from: an on-disk dataset, or a synthetic
/// one generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory in the standard layout (`annotations.jsonl`,
    /// `manifest.json`, optional `proposals.jsonl`).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub proposals: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Existing split manifest; computed from `fractions` and the run seed
    /// when absent.
    #[serde(default)]
    pub splits: Option<PathBuf>,
    #[serde(default)]
    pub fractions: SplitFractions,
}

impl DataConfig {
    pub fn paths(&self) -> Result<Option<DatasetPaths>> {
        if self.synthetic.is_some() {
            if self.dir.is_some() || self.annotations.is_some() || self.manifest.is_some() {
                return Err(Error::Config("data: set either `synthetic` or file paths, not both".into()));
            }
            return Ok(None);
        }
        let base = self.dir.as_deref().map(DatasetPaths::in_dir);
        let annotations = self.annotations.clone().or_else(|| base.as_ref().map(|b| b.annotations.clone()));
        let manifest = self.manifest.clone().or_else(|| base.as_ref().map(|b| b.manifest.clone()));
        let proposals = match (&self.proposals, &base) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(b)) => b.proposals.clone().filter(|p| p.exists()),
            (None, None) => None,
        };
        match (annotations, manifest) {
            (Some(annotations), Some(manifest)) => Ok(Some(DatasetPaths { annotations, manifest, proposals })),
            _ => Err(Error::Config("data: need `dir`, or `annotations` and `manifest`, or `synthetic`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub kind: LossKind,
    /// Focusing exponent; the loss default when absent.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Inverse-frequency class weights from the training split.
    #[serde(default = "yes")]
    pub alpha_balance: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn yes() -> bool {
    true
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { kind: LossKind::CrossEntropy, gamma: None, alpha_balance: true, beta: DEFAULT_BETA, epsilon: DEFAULT_EPSILON }
    }
}

impl LossSettings {
    pub fn loss_config(&self, alpha: Option<Vec<f64>>) -> LossConfig {
        let mut cfg = LossConfig::new(self.kind);
        if let Some(g) = self.gamma {
            cfg = cfg.with_gamma(g);
        }
        if let Some(a) = alpha {
            cfg = cfg.with_alpha(a);
        }
        cfg.epsilon = self.epsilon;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 32, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub tau_u: f64,
    pub m: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { tau_u: DEFAULT_TAU_U, m: DEFAULT_MAX_REGIONS }
    }
}

/// Length of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub max_epochs: usize,
    /// Stop once the epoch loss has failed to improve by this relative
    /// amount for `patience` consecutive epochs.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { max_epochs: 30, tolerance: 1e-3, patience: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitKind,
    /// Cap on attention overlays written per evaluation; all when absent.
    #[serde(default)]
    pub max_overlays: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: SplitKind::Test, max_overlays: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    /// Threads for data loading and per-sample work; 0 lets rayon decide.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub taxonomy: RelationshipTaxonomy,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_train_split")]
    pub train_split: SplitKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub regions: RegionConfig,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_train_split() -> SplitKind {
    SplitKind::TrainConsistent
}

impl RunConfig {
    /// Toy-scale defaults around a synthetic dataset.
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        let taxonomy = RelationshipTaxonomy::default();
        let mut model = ModelSpec::toy(taxonomy.num_classes());
        model.first_glance.patch_size = 16;
        Self {
            seed: spec.seed,
            out_dir: default_out(),
            deterministic: false,
            workers: 0,
            taxonomy,
            data: DataConfig { synthetic: Some(spec), ..Default::default() },
            train_split: default_train_split(),
            model,
            loss: LossSettings::default(),
            optimizer: OptimizerConfig::default(),
            regions: RegionConfig::default(),
            aggregation: AggregationMode::Attention,
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dir, &mut cfg.data.annotations, &mut cfg.data.manifest, &mut cfg.data.proposals, &mut cfg.data.splits]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn check(&self) -> Result<()> {
        self.taxonomy.check()?;
        self.model.check()?;
        if self.model.num_classes != self.taxonomy.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, taxonomy {}",
                self.model.num_classes,
                self.taxonomy.num_classes()
            )));
        }
        self.loss_config(None).check()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.batch_size > 0 && (0.0..1.0).contains(&o.momentum)) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(self.regions.tau_u > 0.0 && self.regions.tau_u <= 1.0) {
            return Err(Error::Config(format!("tau_u must lie in (0, 1], got {}", self.regions.tau_u)));
        }
        if self.regions.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        for s in [&self.stage1, &self.stage2] {
            if !(s.tolerance >= 0.0) || s.patience == 0 {
                return Err(Error::Config(format!("invalid stage settings {s:?}")));
            }
        }
        if let Some(spec) = &self.data.synthetic {
            spec.check(self.taxonomy.num_classes())?;
        }
        Ok(())
    }

    pub fn loss_config(&self, alpha: Option<Vec<f64>>) -> LossConfig {
        self.loss.loss_config(alpha)
    }

    /// Short SHA-256 digest of the canonical JSON form, without the output
    /// directory and threading knobs, which do not change results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.deterministic = false;
        canonical.workers = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Sets one dotted field, e.g. `regions.tau_u=0.5`; the value is parsed
    /// as TOML, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let updated: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        updated.check()?;
        *self = updated;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
