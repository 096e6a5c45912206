//! Experiment configuration: TOML (or JSON, by extension) with every section
//! checked before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use aub_core::alignment::{validate_mode, Mode, TrainConfig};
use aub_core::data::{BundleManifest, SplitSpec};
use aub_core::density::DensityArch;
use aub_core::eval::EvalOptions;
use aub_core::flows::FlowArch;
use aub_core::numeric::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Default for `--out`, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub translate: Option<TranslateSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    TwoMoons {
        /// Points per moon.
        n: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
    },
    Blobs {
        /// Points per domain.
        n: usize,
        n_components: usize,
        #[serde(default = "default_lo")]
        lo: f64,
        #[serde(default = "default_hi")]
        hi: f64,
        sd: f64,
    },
    Gaussians {
        n: usize,
        domains: Vec<GaussianDomain>,
    },
    /// Synthetic 8-column table, median split.
    Tabular {
        n: usize,
        split: SplitSpec,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        split: SplitSpec,
    },
    /// A bundle written earlier by `gen-data`.
    Bundle {
        path: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.05
}

fn default_lo() -> f64 {
    -3.0
}

fn default_hi() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianDomain {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Either `flows` (one per domain) or `flow` repeated `k` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub flow: Option<FlowArch>,
    #[serde(default)]
    pub flows: Option<Vec<FlowArch>>,
    pub density: DensityArch,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl ModelSection {
    pub fn flow_archs(&self) -> Result<Vec<FlowArch>> {
        match (&self.flow, &self.flows) {
            (Some(_), Some(_)) => bail!("model: give either `flow` or `flows`, not both"),
            (None, None) => bail!("model: missing `flow` or `flows`"),
            (None, Some(list)) => {
                if let Some(k) = self.k {
                    ensure!(k == list.len(), "model: k = {k} but {} flows listed", list.len());
                }
                ensure!(!list.is_empty(), "model: `flows` is empty");
                Ok(list.clone())
            }
            (Some(f), None) => {
                let k = self.k.context("model: `flow` needs `k`")?;
                ensure!(k > 0, "model: k must be positive");
                Ok(vec![f.clone(); k])
            }
        }
    }
}

/// Training options; the seed comes from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub flow_optimizer: OptimizerConfig,
    pub density_optimizer: OptimizerConfig,
    pub patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            flow_optimizer: t.flow_optimizer,
            density_optimizer: t.density_optimizer,
            patience: t.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateSection {
    pub from: usize,
    pub to: usize,
    pub input: PathBuf,
    #[serde(default)]
    pub has_header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Experiment configs, relative to this file.
    pub configs: Vec<PathBuf>,
}

/// A parsed config together with where it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub path: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        Ok(Self {
            config,
            path: path.to_path_buf(),
        })
    }

    /// Resolves `p` against the config file's directory.
    pub fn relative(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// `--out`, else the config's `out`, else `runs/<config stem>`.
    pub fn out_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(o) = cli_out {
            return o.to_path_buf();
        }
        if let Some(o) = &self.config.out {
            return self.relative(o);
        }
        let stem = self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        PathBuf::from("runs").join(stem)
    }

    /// Where the dataset bundle lives for this experiment.
    pub fn bundle_dir(&self, out: &Path) -> PathBuf {
        match &self.config.data {
            DataSection::Bundle { path } => self.relative(path),
            _ => out.join("data"),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            flow_optimizer: t.flow_optimizer,
            density_optimizer: t.density_optimizer,
            seed: self.seed.wrapping_add(2),
            mode: t.mode,
            patience: t.patience,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Static checks of the model and training sections.
    pub fn validate(&self) -> Result<()> {
        let flows = self.model.flow_archs()?;
        let dim = self.model.density.dim();
        for (j, f) in flows.iter().enumerate() {
            ensure!(f.dim() == dim, "model: flow {j} has dim {} but the density has dim {dim}", f.dim());
            f.num_params().with_context(|| format!("model: flow {j}"))?;
        }
        self.model.density.num_params().context("model: density")?;
        if let Some(w) = &self.model.weights {
            ensure!(w.len() == flows.len(), "model: {} weights for {} flows", w.len(), flows.len());
            let s: f64 = w.iter().sum();
            ensure!(
                w.iter().all(|v| *v > 0.0) && (s - 1.0).abs() <= 1e-9,
                "model: weights must be positive and sum to 1"
            );
        }
        let t = self.train_config();
        ensure!(t.max_epochs > 0 && t.batch_size > 0, "train: max_epochs and batch_size must be positive");
        t.flow_optimizer.validate().context("train.flow_optimizer")?;
        t.density_optimizer.validate().context("train.density_optimizer")?;
        validate_mode(t.mode, flows.len(), &self.model.density, &flows)?;
        if let Some(tr) = &self.translate {
            ensure!(
                tr.from < flows.len() && tr.to < flows.len(),
                "translate: domains {} -> {} out of range for k = {}",
                tr.from,
                tr.to,
                flows.len()
            );
        }
        Ok(())
    }

    /// Checks the bundle against the model: domain count and width.
    pub fn check_bundle(&self, manifest: &BundleManifest) -> Result<()> {
        let k = self.model.flow_archs()?.len();
        ensure!(
            manifest.domains.len() == k,
            "bundle has {} domains but the model has k = {k}",
            manifest.domains.len()
        );
        let dim = self.model.density.dim();
        for d in &manifest.domains {
            ensure!(d.dim == dim, "bundle domain '{}' has dim {} but the model has dim {dim}", d.name, d.dim);
        }
        Ok(())
    }

    /// Hash of everything that determines a trained model's meaning:
    /// data and model sections plus the bundle manifest.
    pub fn fingerprint(&self, manifest: &BundleManifest) -> Result<String> {
        digest(&(&self.data, &self.model, manifest))
    }

    /// Hash of everything that determines a compare row.
    pub fn cache_key(&self, manifest: &BundleManifest) -> Result<String> {
        digest(&(&self.data, &self.model, &self.train, &self.eval, self.seed, manifest))
    }
}

fn digest<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
