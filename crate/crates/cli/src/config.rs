use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlkit::backbone::FreezePlan;
use tlkit::data::{AugmentConfig, ChannelMode};
use tlkit::nn::HeadConfig;
use tlkit::optim::AdamConfig;
use tlkit::trainer::{SeedTuple, TrainConfig};
use tlkit::tuner::{build_schedule, SearchSpace};

use crate::exit::CliError;

/// Explicit per-purpose seeds; unset ones derive from the root seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOverrides {
    pub split: Option<u64>,
    pub init: Option<u64>,
    pub augment: Option<u64>,
    pub dropout: Option<u64>,
    pub shuffle: Option<u64>,
}

impl SeedOverrides {
    fn complete(&self) -> bool {
        [self.split, self.init, self.augment, self.dropout, self.shuffle]
            .iter()
            .all(Option::is_some)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessOverrides {
    pub input_size: Option<usize>,
    pub channels: Option<ChannelMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub head: HeadConfig,
    pub head_epochs: usize,
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_fine_tune: f64,
    pub unfreeze: FreezePlan,
    pub adam: AdamConfig,
    pub validation_fraction: f64,
    pub early_stopping: Option<usize>,
    pub positive_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            head: t.head,
            head_epochs: t.head_epochs,
            fine_tune_epochs: t.fine_tune_epochs,
            batch_size: t.batch_size,
            lr_head: t.lr_head,
            lr_fine_tune: t.lr_fine_tune,
            unfreeze: t.unfreeze,
            adam: t.adam,
            validation_fraction: t.validation_fraction,
            early_stopping: t.early_stopping,
            positive_class: t.positive_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    pub max_resource: usize,
    pub eta: usize,
    pub space: SearchSpace,
}

impl Default for TunerSection {
    fn default() -> Self {
        TunerSection {
            max_resource: 27,
            eta: 3,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory with one subdirectory per class.
    pub dataset: Option<PathBuf>,
    /// Backbone weights archive.
    pub backbone: Option<PathBuf>,
    /// Run directory.
    pub out: Option<PathBuf>,
    /// Feature cache root; no caching when absent.
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub test_fraction: f64,
    pub stratified: bool,
    /// Also render curve images.
    pub plot: bool,
    pub seeds: SeedOverrides,
    pub preprocess: PreprocessOverrides,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub tuner: TunerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            backbone: None,
            out: None,
            cache_dir: None,
            seed: None,
            test_fraction: 0.15,
            stratified: true,
            plot: false,
            seeds: SeedOverrides::default(),
            preprocess: PreprocessOverrides::default(),
            augment: AugmentConfig::default(),
            train: TrainSection::default(),
            tuner: TunerSection::default(),
        }
    }
}

/// Global flags that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strict_repro: bool,
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        let joined = base.join(&*path);
        *path = std::path::absolute(&joined).unwrap_or(joined);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.backbone, &mut cfg.out, &mut cfg.cache_dir] {
            absolutize(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable in TOML")
    }

    /// Applies flag overrides and fixes every seed. Under strict
    /// reproducibility, seeds must come from the file or flags.
    pub fn resolve(mut self, flags: &Overrides) -> Result<Self, CliError> {
        if flags.seed.is_some() {
            self.seed = flags.seed;
        }
        if flags.out.is_some() {
            self.out = flags.out.clone();
            absolutize(Path::new(""), &mut self.out);
        }
        if self.seed.is_none() {
            if flags.strict_repro && !self.seeds.complete() {
                return Err(CliError::config(
                    "--strict-repro needs --seed, a `seed` entry, or all five entries of [seeds]",
                ));
            }
            // Kept within TOML's signed integer range so snapshots can hold it.
            let drawn = rand::random::<u64>() >> 1;
            log::info!("no seed given; drew root seed {drawn}");
            self.seed = Some(drawn);
        }
        let explicit = [self.seed, self.seeds.split, self.seeds.init, self.seeds.augment, self.seeds.dropout, self.seeds.shuffle];
        if explicit.iter().flatten().any(|&s| s > i64::MAX as u64) {
            return Err(CliError::config("seeds must not exceed 2^63 - 1"));
        }
        Ok(self)
    }

    /// Seeds of the run: explicit entries, else derived from the root.
    pub fn seed_tuple(&self) -> SeedTuple {
        let root = SeedTuple::from_root(self.seed.unwrap_or(0));
        SeedTuple {
            split: self.seeds.split.unwrap_or(root.split),
            init: self.seeds.init.unwrap_or(root.init),
            augment: self.seeds.augment.unwrap_or(root.augment),
            dropout: self.seeds.dropout.unwrap_or(root.dropout),
            shuffle: self.seeds.shuffle.unwrap_or(root.shuffle),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            head: t.head.clone(),
            head_epochs: t.head_epochs,
            fine_tune_epochs: t.fine_tune_epochs,
            batch_size: t.batch_size,
            lr_head: t.lr_head,
            lr_fine_tune: t.lr_fine_tune,
            unfreeze: t.unfreeze,
            adam: t.adam,
            seeds: self.seed_tuple(),
            validation_fraction: t.validation_fraction,
            early_stopping: t.early_stopping,
            augment: self.augment.clone(),
            positive_class: t.positive_class,
        }
    }

    pub fn require_dataset(&self) -> Result<&Path, CliError> {
        let p = self
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::config("no dataset root configured (`dataset`)"))?;
        if !p.is_dir() {
            return Err(CliError::config(format!("dataset root {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_backbone(&self) -> Result<&Path, CliError> {
        let p = self
            .backbone
            .as_deref()
            .ok_or_else(|| CliError::config("no backbone archive configured (`backbone`)"))?;
        if !p.is_file() {
            return Err(CliError::config(format!("backbone archive {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::config("no output directory (use --out or `out`)"))
    }

    /// Checks everything a training or tuning run needs before any compute.
    pub fn validate_run(&self, tuning: bool) -> Result<(), CliError> {
        self.require_dataset()?;
        self.require_backbone()?;
        self.require_out()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(CliError::config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        if self.preprocess.input_size == Some(0) {
            return Err(CliError::config("preprocess.input_size must be positive"));
        }
        self.train_config().validate()?;
        if tuning {
            self.tuner.space.validate()?;
            build_schedule(self.tuner.max_resource, self.tuner.eta)?;
        }
        Ok(())
    }
}
