//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use stablekd::data::{gen_spirals, gen_tiles, skd1, stratified_subset, train_val_split};
use stablekd::network::checkpoint;
use stablekd::{ArchDescription, Dataset, Error, Network, OptimConfig, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Skd1 {
        train: PathBuf,
        val: PathBuf,
    },
    Spirals {
        classes: usize,
        per_class: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Tiles {
        classes: usize,
        per_class: usize,
        side: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_val_fraction() -> f64 {
    0.25
}

/// Explicit block ends for both networks, overriding the automatic split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundaries {
    pub teacher: Vec<usize>,
    pub student: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Architecture of the network being trained or evaluated.
    pub arch_file: PathBuf,
    /// Defaults to `arch_file`.
    #[serde(default)]
    pub teacher_arch_file: Option<PathBuf>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Weights to evaluate (`eval`) or to start from instead of a fresh init.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub n: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults per command: the StableKD rate for `distill`, the baseline
    /// rate otherwise.
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "one_f")]
    pub lambda: f64,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "one_f")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "one_f")]
    pub subset_fraction: f64,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default)]
    pub boundaries: Option<Boundaries>,
    #[serde(default)]
    pub log_wall_time: bool,
    /// `subset-sweep` fractions.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// `subset-sweep` also runs vanilla KD per fraction.
    #[serde(default = "yes")]
    pub sweep_vanilla: bool,
    /// `stability`: peak rates of the vanilla KD fluctuation runs.
    #[serde(default = "default_fluctuation_lrs")]
    pub fluctuation_lrs: Vec<f64>,
    /// `stability`: initial block counts of the no-recomposition runs.
    #[serde(default = "default_block_counts")]
    pub block_counts: Vec<usize>,
    /// `stability`: student-architecture backbone trained beforehand.
    #[serde(default)]
    pub pretrained_small_checkpoint: Option<PathBuf>,
    /// `stability`: teacher-architecture backbone trained beforehand;
    /// defaults to the teacher checkpoint.
    #[serde(default)]
    pub pretrained_large_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub head_seed: u64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn default_epochs() -> usize {
    20
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    128
}
fn default_fractions() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}
fn default_fluctuation_lrs() -> Vec<f64> {
    vec![0.005, 0.01, 0.02]
}
fn default_block_counts() -> Vec<usize> {
    vec![1, 3, 5]
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))
    }

    /// Reads `path` and makes every relative path in it relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let optional = [
            &mut cfg.teacher_arch_file,
            &mut cfg.teacher_checkpoint,
            &mut cfg.checkpoint,
            &mut cfg.pretrained_small_checkpoint,
            &mut cfg.pretrained_large_checkpoint,
        ];
        for p in optional.into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut cfg.arch_file);
        if let DatasetSource::Skd1 { train, val } = &mut cfg.dataset {
            resolve(base, train);
            resolve(base, val);
        }
        Ok(cfg)
    }

    pub fn optim(&self, default_lr: f64) -> OptimConfig {
        OptimConfig {
            max_lr: self.max_lr.unwrap_or(default_lr),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
    }

    pub fn arch(&self) -> Result<ArchDescription> {
        Ok(ArchDescription::load(&self.arch_file)?)
    }

    pub fn teacher_arch(&self) -> Result<ArchDescription> {
        Ok(ArchDescription::load(self.teacher_arch_file.as_ref().unwrap_or(&self.arch_file))?)
    }

    /// The frozen teacher named by `teacher_checkpoint`.
    pub fn teacher(&self) -> Result<Network<f32>> {
        let path = self
            .teacher_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("`teacher_checkpoint` is required for this command".into()))?;
        let mut t = load_network(&self.teacher_arch()?, path)?;
        t.freeze();
        Ok(t)
    }

    /// Train and validation splits, with the training side reduced to
    /// `subset_fraction`.
    pub fn data(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = self.full_data()?;
        let train = if self.subset_fraction < 1.0 {
            stratified_subset(&train, self.subset_fraction, self.subset_seed)?
        } else {
            train
        };
        Ok((train, val))
    }

    pub fn full_data(&self) -> Result<(Dataset, Dataset)> {
        Ok(match &self.dataset {
            DatasetSource::Skd1 { train, val } => (skd1::load(train, Split::Train)?, skd1::load(val, Split::Val)?),
            &DatasetSource::Spirals { classes, per_class, noise, seed, val_fraction } => {
                train_val_split(&gen_spirals(classes, per_class, noise, seed)?, val_fraction)?
            }
            &DatasetSource::Tiles { classes, per_class, side, noise, seed, val_fraction } => {
                train_val_split(&gen_tiles(classes, per_class, side, noise, seed)?, val_fraction)?
            }
        })
    }
}

pub fn load_network(arch: &ArchDescription, path: &Path) -> Result<Network<f32>> {
    let mut net = arch.build()?;
    checkpoint::load(&mut net, path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(net)
}
