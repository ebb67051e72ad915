//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use graphvec_core::align::AlignmentConfig;
use graphvec_core::eval::{ClusterConfig, FewShotConfig};
use graphvec_core::graph::{generate_synthetic, parse_tudataset, GraphDataset, SyntheticKind};
use graphvec_core::kernel::ScaleConfig;
use graphvec_core::model::ModelConfig;
use graphvec_core::train::TrainConfig;

use crate::Failure;

/// One block of synthetic graphs inside a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPart {
    #[serde(flatten)]
    pub family: SyntheticKind,
    pub count: usize,
    /// Inclusive node-count range.
    pub nodes: (usize, usize),
    /// Class label; defaults to one id per family.
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// A dataset in the TU text layout: `<dir>/<prefix>_A.txt` and friends.
    Tu { dir: PathBuf, prefix: String },
    Synthetic { name: String, parts: Vec<SyntheticPart> },
}

impl DatasetSpec {
    pub fn load(&self, base: &Path) -> Result<GraphDataset, Failure> {
        match self {
            DatasetSpec::Tu { dir, prefix } => Ok(parse_tudataset(base.join(dir), prefix)?),
            DatasetSpec::Synthetic { name, parts } => {
                let loaded = parts
                    .iter()
                    .map(|p| {
                        let ds = generate_synthetic(p.family, p.count, p.nodes, p.seed)?;
                        Ok((ds, p.label.unwrap_or(p.family.label_id())))
                    })
                    .collect::<Result<Vec<_>, graphvec_core::Error>>()?;
                Ok(GraphDataset::from_labeled_parts(name.clone(), loaded)?)
            }
        }
    }

    fn check(&self, base: &Path) -> Result<(), Failure> {
        match self {
            DatasetSpec::Tu { dir, .. } => {
                let d = base.join(dir);
                if !d.is_dir() {
                    return Err(Failure::Usage(format!("dataset directory {} does not exist", d.display())));
                }
            }
            DatasetSpec::Synthetic { name, parts } => {
                if parts.is_empty() {
                    return Err(Failure::Usage(format!("synthetic dataset `{name}` has no parts")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterTask {
    /// Cluster count; defaults to the number of classes.
    pub clusters: Option<usize>,
    #[serde(flatten)]
    pub method: ClusterConfig,
}

impl Default for ClusterTask {
    fn default() -> Self {
        ClusterTask {
            clusters: None,
            method: ClusterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pre-training sources.
    pub datasets: Vec<DatasetSpec>,
    /// Target of `embed`, `fewshot` and `cluster`.
    pub downstream: Option<DatasetSpec>,
    pub scale: ScaleConfig,
    pub align: AlignmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fewshot: FewShotConfig,
    pub cluster: ClusterTask,
    /// Evaluation repeats; run `i` uses seed `seed + i`.
    pub runs: usize,
    pub out: PathBuf,
    /// Seeds initialization, batching, landmarks and evaluation; replaces
    /// the seeds inside the nested configs.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: Vec::new(),
            downstream: None,
            scale: ScaleConfig::default(),
            align: AlignmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fewshot: FewShotConfig::default(),
            cluster: ClusterTask::default(),
            runs: 5,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config; relative dataset paths resolve against the config's
    /// directory.
    pub fn read(path: &Path) -> Result<(Self, PathBuf), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Spreads the base seed over every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.scale.seed = seed;
    }

    /// The encoder's input layout follows the kernel settings.
    pub fn sync_shapes(&mut self) {
        self.model.encoder.scales = self.scale.lambdas.len();
        self.model.encoder.embed_dim = self.scale.embed_dim;
    }

    pub fn validate(&self, base: &Path, need_sources: bool, need_downstream: bool) -> Result<(), Failure> {
        self.scale.validate()?;
        self.align.validate()?;
        self.train.validate()?;
        self.model.encoder.validate()?;
        self.model.reference.validate()?;
        if self.runs == 0 {
            return Err(Failure::Usage("runs must be at least 1".into()));
        }
        if need_sources {
            if self.datasets.is_empty() {
                return Err(Failure::Usage("config lists no pre-training datasets".into()));
            }
            for d in &self.datasets {
                d.check(base)?;
            }
        }
        if need_downstream {
            match &self.downstream {
                Some(d) => d.check(base)?,
                None => return Err(Failure::Usage("config has no downstream dataset".into())),
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}
