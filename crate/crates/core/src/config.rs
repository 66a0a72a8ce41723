//! Experiment configuration files (TOML) and the datasets they describe.
//!
//! ```toml
//! seed = 0
//!
//! [network]            # input_dim, hidden, feature_dim, classes
//! hidden = 64
//!
//! [train]              # every RunConfig hyperparameter, all optional
//! epochs_source = 200
//! lr_target = 0.001
//!
//! [data]
//! kind = "two_moons"   # or "blobs" or "csv"
//! n_per_domain = 1000
//! noise = 0.1
//! source_rotation = 0.0
//! target_rotations = [45.0]
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_blobs, gen_blobs_with_counts, gen_two_moons, load_csv, split, Dataset, SplitSpec,
    Standardizer,
};
use crate::error::{Error, Result};
use crate::nn::NetworkDims;
use crate::numerics::Rng;
use crate::pipeline::{streams, RunConfig, SparsityPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 64,
            feature_dim: 32,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_source: usize,
    pub epochs_target: usize,
    pub batch_size: usize,
    pub lr_source: f64,
    pub lr_embedding: f64,
    pub lr_target: f64,
    pub momentum: f64,
    pub k: usize,
    pub balance_weight: f64,
    pub lambda_sparsity: f64,
    pub sparsity_prior: SparsityPrior,
    pub exemplars_per_domain: usize,
    pub dc_epochs: usize,
    pub lr_dc: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = RunConfig::new(NetworkSection::default().dims());
        Self {
            epochs_source: d.epochs_source,
            epochs_target: d.epochs_target,
            batch_size: d.batch_size,
            lr_source: d.lr_source,
            lr_embedding: d.lr_embedding,
            lr_target: d.lr_target,
            momentum: d.momentum,
            k: d.k,
            balance_weight: d.balance_weight,
            lambda_sparsity: d.lambda_sparsity,
            sparsity_prior: d.sparsity_prior,
            exemplars_per_domain: d.exemplars_per_domain,
            dc_epochs: d.dc_epochs,
            lr_dc: d.lr_dc,
        }
    }
}

impl NetworkSection {
    pub fn dims(&self) -> NetworkDims {
        NetworkDims {
            input_dim: self.input_dim,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    TwoMoons,
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Fraction of the labeled source set used for training; the rest is the
    /// source test set.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// z-score every domain with statistics of the source training set.
    #[serde(default)]
    pub standardize: bool,
    // two_moons
    #[serde(default)]
    pub n_per_domain: Option<usize>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub source_rotation: Option<f64>,
    #[serde(default)]
    pub target_rotations: Option<Vec<f64>>,
    // blobs
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    /// One displacement per class for each target.
    #[serde(default)]
    pub target_shifts: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub spread: Option<f64>,
    /// Per-class sample counts for each target; balanced when absent.
    #[serde(default)]
    pub target_class_counts: Option<Vec<Vec<usize>>>,
    // csv
    #[serde(default)]
    pub source_path: Option<PathBuf>,
    #[serde(default)]
    pub target_paths: Option<Vec<PathBuf>>,
}

fn default_train_fraction() -> f64 {
    0.9
}

/// Source train/test split and the ordered target domains (target `j` is
/// domain `j + 1`). Target labels are only ever read for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub targets: Vec<Dataset>,
}

impl Domains {
    /// Source test set followed by every target, indexed by domain id.
    pub fn eval_sets(&self) -> Vec<Dataset> {
        let mut v = vec![self.source_test.clone()];
        v.extend(self.targets.iter().cloned());
        v
    }
}

/// Seed for generating domain `domain` of a run with seed `seed`.
pub fn domain_seed(seed: u64, domain: usize) -> u64 {
    Rng::with_stream(seed, streams::DATA_SPLIT + 1000 + domain as u64).next_u64()
}

fn need<T: Clone>(v: &Option<T>, key: &str, kind: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("data.{key} is required for kind = \"{kind}\"")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn n_targets(&self) -> usize {
        let d = &self.data;
        match d.kind {
            DataKind::TwoMoons => d.target_rotations.as_ref().map_or(0, Vec::len),
            DataKind::Blobs => d.target_shifts.as_ref().map_or(0, Vec::len),
            DataKind::Csv => d.target_paths.as_ref().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_targets() == 0 {
            return Err(Error::config("at least one target domain is required"));
        }
        let d = &self.data;
        match d.kind {
            DataKind::TwoMoons => {
                need(&d.n_per_domain, "n_per_domain", "two_moons")?;
                if self.network.input_dim != 2 || self.network.classes != 2 {
                    return Err(Error::config(
                        "two_moons needs input_dim = 2 and classes = 2",
                    ));
                }
            }
            DataKind::Blobs => {
                let centers = need(&d.centers, "centers", "blobs")?;
                need(&d.n_per_domain, "n_per_domain", "blobs")?;
                need(&d.spread, "spread", "blobs")?;
                if centers.len() != self.network.classes {
                    return Err(Error::config("one blob center per class is required"));
                }
                if centers.iter().any(|c| c.len() != self.network.input_dim) {
                    return Err(Error::config(
                        "blob centers must have input_dim coordinates",
                    ));
                }
                if let Some(counts) = &d.target_class_counts {
                    if counts.len() != self.n_targets()
                        || counts.iter().any(|c| c.len() != self.network.classes)
                    {
                        return Err(Error::config(
                            "target_class_counts needs one count per class for every target",
                        ));
                    }
                }
            }
            DataKind::Csv => {
                need(&d.source_path, "source_path", "csv")?;
            }
        }
        self.run_config().validate()
    }

    pub fn run_config(&self) -> RunConfig {
        let t = &self.train;
        RunConfig {
            dims: self.network.dims(),
            epochs_source: t.epochs_source,
            epochs_target: t.epochs_target,
            batch_size: t.batch_size,
            lr_source: t.lr_source,
            lr_embedding: t.lr_embedding,
            lr_target: t.lr_target,
            momentum: t.momentum,
            k: t.k,
            balance_weight: t.balance_weight,
            lambda_sparsity: t.lambda_sparsity,
            sparsity_prior: t.sparsity_prior,
            n_targets: self.n_targets(),
            exemplars_per_domain: t.exemplars_per_domain,
            dc_epochs: t.dc_epochs,
            lr_dc: t.lr_dc,
            seed: self.seed,
        }
    }

    /// Generates or loads every domain. Paths in the config are resolved
    /// relative to `base_dir`.
    pub fn build_domains(&self, base_dir: &Path) -> Result<Domains> {
        let d = &self.data;
        let classes = self.network.classes;
        let (source, mut targets) = match d.kind {
            DataKind::TwoMoons => {
                let n = need(&d.n_per_domain, "n_per_domain", "two_moons")?;
                let noise = d.noise.unwrap_or(0.1);
                let src = gen_two_moons(
                    n,
                    noise,
                    d.source_rotation.unwrap_or(0.0),
                    domain_seed(self.seed, 0),
                )?;
                let targets = need(&d.target_rotations, "target_rotations", "two_moons")?
                    .iter()
                    .enumerate()
                    .map(|(j, &rot)| gen_two_moons(n, noise, rot, domain_seed(self.seed, j + 1)))
                    .collect::<Result<Vec<_>>>()?;
                (src, targets)
            }
            DataKind::Blobs => {
                let n = need(&d.n_per_domain, "n_per_domain", "blobs")?;
                let centers = need(&d.centers, "centers", "blobs")?;
                let spread = need(&d.spread, "spread", "blobs")?;
                let src = gen_blobs(n, &centers, None, spread, domain_seed(self.seed, 0))?;
                let shifts = need(&d.target_shifts, "target_shifts", "blobs")?;
                let targets = shifts
                    .iter()
                    .enumerate()
                    .map(|(j, shift)| {
                        let seed = domain_seed(self.seed, j + 1);
                        match &d.target_class_counts {
                            Some(counts) => gen_blobs_with_counts(
                                &counts[j],
                                &centers,
                                Some(shift),
                                spread,
                                seed,
                            ),
                            None => gen_blobs(n, &centers, Some(shift), spread, seed),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (src, targets)
            }
            DataKind::Csv => {
                let src = load_csv(
                    &base_dir.join(need(&d.source_path, "source_path", "csv")?),
                    true,
                    Some(classes),
                )?;
                let targets = need(&d.target_paths, "target_paths", "csv")?
                    .iter()
                    .map(|p| load_csv(&base_dir.join(p), true, Some(classes)))
                    .collect::<Result<Vec<_>>>()?;
                (src, targets)
            }
        };
        if source.dim() != self.network.input_dim
            || targets.iter().any(|t| t.dim() != self.network.input_dim)
        {
            return Err(Error::config(
                "dataset dimension differs from network.input_dim",
            ));
        }
        let spec = SplitSpec {
            train_fraction: d.train_fraction,
            seed: Rng::with_stream(self.seed, streams::DATA_SPLIT).next_u64(),
            stratified: true,
        };
        let (mut source_train, mut source_test) = split(&source.with_domain(0, "source"), &spec)?;
        if d.standardize {
            let z = Standardizer::fit(&source_train)?;
            source_train = z.apply(&source_train)?;
            source_test = z.apply(&source_test)?;
            for t in targets.iter_mut() {
                *t = z.apply(t)?;
            }
        }
        let targets = targets
            .into_iter()
            .enumerate()
            .map(|(j, t)| t.with_domain(j + 1, format!("target{}", j + 1)))
            .collect();
        Ok(Domains {
            source_train,
            source_test: source_test.with_domain(0, "source_test"),
            targets,
        })
    }
}
