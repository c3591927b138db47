use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use super::{evaluate, fit, FitSpec, LabelledSet, Stage, TrainConfig, TrainHistory};
use crate::archive::{ArchiveKind, Manifest, WeightsArchive};
use crate::backbone::{extract_features, split_at_cut, trunk_fingerprint, Backbone, BackboneSpec, ExtractStats, FeatureCache};
use crate::data::{augment, preprocess, stratified_holdout, ChannelMode, DatasetIndex, Image, PreprocessMode, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::init::name_hash;
use crate::nn::{build_head, HeadConfig, NetworkGraph};
use crate::optim::AdamState;
use crate::seed::derive;
use crate::tensor::Tensor32;

/// Cache key seed of images that are not augmented.
const PLAIN: u64 = u64::MAX;

/// Sample indices (into the dataset index) of each role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreparedData {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl PreparedData {
    /// Carves the validation set out of the training split. The dataset must
    /// already carry a train/test assignment.
    pub fn new(index: &DatasetIndex, cfg: &TrainConfig) -> Result<Self> {
        if index.assignment.is_none() {
            return Err(Error::Validation("dataset has not been split into train and test".into()));
        }
        let pool = index.indices(Split::Train);
        let labels: Vec<usize> = pool.iter().map(|&i| index.samples[i].label).collect();
        let held = stratified_holdout(&labels, index.classes.len(), cfg.validation_fraction, derive(cfg.seeds.split, &[0x7A1]));
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for (&i, h) in pool.iter().zip(held) {
            if h {
                validation.push(i);
            } else {
                train.push(i);
            }
        }
        if train.is_empty() {
            return Err(Error::Data("no training images left after the validation holdout".into()));
        }
        Ok(PreparedData {
            train,
            validation,
            test: index.indices(Split::Test),
        })
    }
}

/// Which samples were augmented and which reached the optimizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub augmented: BTreeSet<usize>,
    pub optimized: BTreeSet<usize>,
}

/// Backbone features followed by the trained head, with the layers from
/// `cut` onwards the ones that were fine-tuned.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: BackboneSpec,
    pub preprocessing: ChannelMode,
    pub head: HeadConfig,
    pub classes: Vec<String>,
    pub cut: usize,
    pub network: NetworkGraph<f32>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub history: TrainHistory,
    /// Test-split metrics, absent when the test split is empty.
    pub report: Option<MetricsReport>,
    pub data: PreparedData,
    pub access: AccessLog,
    pub cache: ExtractStats,
}

fn augment_seed(cfg: &TrainConfig, id: &str, variant: u64) -> u64 {
    derive(cfg.seeds.augment, &[name_hash(id), variant])
}

struct Extractor<'a> {
    index: &'a DatasetIndex,
    mode: PreprocessMode,
    cfg: &'a TrainConfig,
    cache_root: Option<&'a Path>,
    stats: ExtractStats,
}

impl Extractor<'_> {
    fn cache(&self, trunk: &NetworkGraph<f32>) -> Result<Option<FeatureCache>> {
        let context = format!("{:?}|{:?}|{}", self.mode, self.cfg.augment, self.cfg.seeds.augment);
        self.cache_root
            .map(|root| FeatureCache::open(root, &trunk_fingerprint(trunk, &context)))
            .transpose()
    }

    /// Trunk outputs for `samples`; augmented with `variant` when given.
    fn run(
        &mut self,
        trunk: &NetworkGraph<f32>,
        samples: &[usize],
        variant: Option<u64>,
        augmented: &mut BTreeSet<usize>,
    ) -> Result<Vec<Tensor32>> {
        let cache = self.cache(trunk)?;
        let keys: Vec<(String, u64)> = samples
            .iter()
            .map(|&i| {
                let id = &self.index.samples[i].id;
                (id.clone(), variant.map_or(PLAIN, |v| augment_seed(self.cfg, id, v)))
            })
            .collect();
        if variant.is_some() {
            augmented.extend(samples);
        }
        let (index, mode, cfg) = (self.index, self.mode, self.cfg);
        let (out, stats) = extract_features(trunk, &keys, cache.as_ref(), self.cfg.batch_size, |k| {
            let s = &index.samples[samples[k]];
            let mut img = Image::open(&s.path)?;
            if variant.is_some() {
                img = augment(&img, &cfg.augment, keys[k].1);
            }
            preprocess(&img, &mode)
        })?;
        self.stats.hits += stats.hits;
        self.stats.computed += stats.computed;
        Ok(out)
    }
}

fn labels_of(index: &DatasetIndex, samples: &[usize]) -> Vec<usize> {
    samples.iter().map(|&i| index.samples[i].label).collect()
}

/// Runs one stage of training on top of `trunk`, feeding augmented trunk
/// outputs of the training samples to `net`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    ex: &mut Extractor<'_>,
    trunk: &NetworkGraph<f32>,
    net: &mut NetworkGraph<f32>,
    spec: FitSpec,
    data: &PreparedData,
    access: &mut AccessLog,
) -> Result<TrainHistory> {
    let cfg = ex.cfg;
    let index = ex.index;
    let labels = labels_of(index, &data.train);
    let val = if data.validation.is_empty() {
        None
    } else {
        let inputs = ex.run(trunk, &data.validation, None, &mut BTreeSet::new())?;
        Some(LabelledSet::new(inputs, labels_of(index, &data.validation))?)
    };
    let mut current: Option<(u64, Arc<Vec<Tensor32>>)> = None;
    let augmented = &mut access.augmented;
    let optimized = &mut access.optimized;
    fit(
        net,
        &mut AdamState::new(),
        &spec,
        &cfg.adam,
        &cfg.seeds,
        &labels,
        |epoch| {
            let v = cfg.augment.variant(epoch);
            match &current {
                Some((cv, set)) if *cv == v => Ok(set.clone()),
                _ => {
                    let set = Arc::new(ex.run(trunk, &data.train, Some(v), augmented)?);
                    current = Some((v, set.clone()));
                    Ok(set)
                }
            }
        },
        val.as_ref(),
        |batch| optimized.extend(batch.iter().map(|&k| data.train[k])),
    )
}

/// Trains the head on frozen features, then fine-tunes the last backbone
/// layers together with the head, and evaluates on the test split.
/// `cache_root` enables the on-disk feature cache.
pub fn run_two_stage(cfg: &TrainConfig, index: &DatasetIndex, backbone: &Backbone, cache_root: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    if index.classes.len() != 2 {
        return Err(Error::Data(format!("expected two classes, found {}", index.classes.len())));
    }
    let data = PreparedData::new(index, cfg)?;
    let mut ex = Extractor {
        index,
        mode: backbone.preprocess_mode(),
        cfg,
        cache_root,
        stats: ExtractStats::default(),
    };
    let mut access = AccessLog::default();

    let features = backbone.features();
    let mut head = build_head::<f32>(&cfg.head, features.output_shape(), 2, cfg.seeds.init)?;
    let head_spec = FitSpec {
        stage: Stage::Head,
        epochs: cfg.head_epochs,
        first_epoch: 0,
        lr: cfg.lr_head,
        batch_size: cfg.batch_size,
        early_stopping: cfg.early_stopping,
    };
    let mut history = run_stage(&mut ex, &features, &mut head, head_spec, &data, &mut access)?;
    log::info!("head stage done after {} epochs", history.len());

    let split = split_at_cut(&features.then(&head)?, &cfg.unfreeze)?;
    let mut tail = split.tail;
    let tune_spec = FitSpec {
        stage: Stage::FineTune,
        epochs: cfg.fine_tune_epochs,
        first_epoch: history.len(),
        lr: cfg.lr_fine_tune,
        ..head_spec
    };
    history.extend(run_stage(&mut ex, &split.trunk, &mut tail, tune_spec, &data, &mut access)?);

    let report = if data.test.is_empty() {
        None
    } else {
        let inputs = ex.run(&split.trunk, &data.test, None, &mut BTreeSet::new())?;
        let test = LabelledSet::new(inputs, labels_of(index, &data.test))?;
        Some(evaluate(&tail, &test, cfg.positive_class)?)
    };
    let model = TrainedModel {
        spec: BackboneSpec {
            include_top: false,
            ..backbone.spec
        },
        preprocessing: backbone.preprocessing,
        head: cfg.head.clone(),
        classes: index.classes.clone(),
        cut: split.cut,
        network: split.trunk.then(&tail)?,
        config: cfg.clone(),
    };
    Ok(RunOutcome {
        model,
        history,
        report,
        data,
        access,
        cache: ex.stats,
    })
}

/// Backbone features of the training samples (first augmentation variant)
/// and of the validation samples, for head-only work such as tuning.
pub fn head_features(
    cfg: &TrainConfig,
    index: &DatasetIndex,
    backbone: &Backbone,
    data: &PreparedData,
    cache_root: Option<&Path>,
) -> Result<(LabelledSet, LabelledSet, ExtractStats)> {
    let mut ex = Extractor {
        index,
        mode: backbone.preprocess_mode(),
        cfg,
        cache_root,
        stats: ExtractStats::default(),
    };
    let features = backbone.features();
    let train = ex.run(&features, &data.train, Some(cfg.augment.variant(0)), &mut BTreeSet::new())?;
    let val = ex.run(&features, &data.validation, None, &mut BTreeSet::new())?;
    Ok((
        LabelledSet::new(train, labels_of(index, &data.train))?,
        LabelledSet::new(val, labels_of(index, &data.validation))?,
        ex.stats,
    ))
}

fn meta<T: serde::de::DeserializeOwned>(m: &Manifest, key: &str) -> Result<T> {
    let v = m
        .metadata
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint metadata `{key}`: {e}")))
}

impl TrainedModel {
    pub fn preprocess_mode(&self) -> PreprocessMode {
        PreprocessMode {
            size: self.spec.input_size,
            channels: self.preprocessing,
        }
    }

    /// Class probabilities for preprocessed inputs.
    pub fn probabilities(&self, inputs: &[Tensor32]) -> Result<Vec<Tensor32>> {
        crate::backbone::infer_batched(&self.network, inputs, 16)
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let inputs = images
            .iter()
            .map(|img| preprocess(img, &self.preprocess_mode()))
            .collect::<Result<Vec<Tensor32>>>()?;
        super::predict(&self.network, &inputs, 16)
    }

    /// Test-split metrics of this model on `index`.
    pub fn evaluate(&self, index: &DatasetIndex, samples: &[usize]) -> Result<MetricsReport> {
        let images = samples
            .iter()
            .map(|&i| Image::open(&index.samples[i].path))
            .collect::<Result<Vec<_>>>()?;
        let pred = self.predict(&images)?;
        let labels = labels_of(index, samples);
        if labels.is_empty() {
            return Err(Error::Validation("test split is empty".into()));
        }
        Ok(crate::metrics::metrics_from_confusion(&crate::metrics::confusion(
            &pred,
            &labels,
            self.config.positive_class,
        )?))
    }

    pub fn to_archive(&self) -> Result<WeightsArchive> {
        let mut m = Manifest::new(ArchiveKind::Checkpoint);
        m.architecture = Some(self.spec.architecture);
        m.input_size = Some(self.spec.input_size);
        m.width_divisor = self.spec.width_divisor;
        m.classes = Some(self.classes.len());
        m.preprocessing = Some(self.preprocessing);
        m.layer_order = self.network.layers().iter().map(|l| l.name.clone()).collect();
        m.metadata.insert("cut".into(), self.cut.into());
        m.metadata.insert("class_names".into(), serde_json::to_value(&self.classes)?);
        m.metadata.insert("head".into(), serde_json::to_value(&self.head)?);
        m.metadata.insert("train_config".into(), serde_json::to_value(&self.config)?);
        let mut a = WeightsArchive::new(m);
        for p in self.network.params() {
            a.push(p.name.clone(), p.value.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &WeightsArchive) -> Result<Self> {
        let m = &a.manifest;
        if m.kind != ArchiveKind::Checkpoint {
            return Err(Error::Format(format!("expected a checkpoint archive, found {:?}", m.kind)));
        }
        let architecture = m
            .architecture
            .ok_or_else(|| Error::Unsupported("checkpoint does not name its architecture".into()))?;
        let spec = BackboneSpec {
            input_size: m.input_size.unwrap_or(architecture.default_input_size()),
            width_divisor: m.width_divisor,
            ..BackboneSpec::new(architecture)
        };
        let classes: Vec<String> = meta(m, "class_names")?;
        let head: HeadConfig = meta(m, "head")?;
        let cut: usize = meta(m, "cut")?;
        let config: TrainConfig = meta(m, "train_config")?;
        let (features, _) = spec.build::<f32>()?;
        let mut network = features.then(&build_head::<f32>(&head, features.output_shape(), classes.len(), 0)?)?;
        let names: Vec<&str> = network.layers().iter().map(|l| l.name.as_str()).collect();
        if names != m.layer_order {
            return Err(Error::Format("checkpoint layer order does not match its architecture".into()));
        }
        let wanted: Vec<String> = network.params().map(|p| p.name.clone()).collect();
        if wanted.len() != a.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", a.len(), wanted.len())));
        }
        for name in wanted {
            let t = a
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            network.set_param(&name, t.clone())?;
        }
        if cut > network.len() {
            return Err(Error::Format(format!("checkpoint cut {cut} beyond {} layers", network.len())));
        }
        for i in 0..network.len() {
            network.set_trainable(i, i >= cut);
        }
        Ok(TrainedModel {
            spec,
            preprocessing: m.preprocessing.unwrap_or(architecture.default_preprocessing()),
            head,
            classes,
            cut,
            network,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&WeightsArchive::read(path)?)
    }
}
