use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tlkit::archive::WeightsArchive;
use tlkit::backbone::{load_archive, Backbone};
use tlkit::data::{scan_dataset, split_dataset, DatasetIndex, Split};
use tlkit::metrics::export_curves;
use tlkit::seed::derive;
use tlkit::trainer::{head_features, run_two_stage, PreparedData, TrainHistory, TrainedModel};
use tlkit::tuner::{build_schedule, head_objective, run_search};

use crate::config::{ExperimentConfig, Overrides};
use crate::exit::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ftfw";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const SKIPPED_FILE: &str = "skipped.tsv";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const BEST_CONFIG_FILE: &str = "best_config.toml";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn load_config(path: Option<&Path>, flags: &Overrides) -> CliResult<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.resolve(flags)
}

/// Scans and splits the dataset; skipped files are listed in `out`.
fn dataset(cfg: &ExperimentConfig, root: &Path, out: Option<&Path>) -> CliResult<DatasetIndex> {
    let (index, skipped) = scan_dataset(root)?;
    if !skipped.is_empty() {
        log::warn!("{} files skipped while scanning {}", skipped.len(), root.display());
        if let Some(dir) = out {
            write_text(&dir.join(SKIPPED_FILE), &skipped.to_text())?;
        }
    }
    Ok(split_dataset(&index, cfg.seed_tuple().split, cfg.test_fraction, cfg.stratified)?)
}

fn backbone(cfg: &ExperimentConfig) -> CliResult<Backbone> {
    let mut b = load_archive(cfg.require_backbone()?)?;
    if let Some(c) = cfg.preprocess.channels {
        b.preprocessing = c;
    }
    if let Some(s) = cfg.preprocess.input_size {
        b = b.resized(s)?;
    }
    Ok(b)
}

fn split_json(index: &DatasetIndex, data: &PreparedData) -> serde_json::Value {
    let ids = |v: &[usize]| v.iter().map(|&i| index.samples[i].id.clone()).collect::<Vec<_>>();
    json!({
        "split_seed": index.split_seed,
        "train": ids(&data.train),
        "validation": ids(&data.validation),
        "test": ids(&data.test),
    })
}

pub fn train(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    cfg.validate_run(false)?;
    let out = cfg.require_out()?.to_path_buf();
    create_dir(&out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let index = dataset(cfg, cfg.require_dataset()?, Some(&out))?;
    let backbone = backbone(cfg)?;
    let tc = cfg.train_config();
    log::info!(
        "training on {} images ({} held out for test), backbone {}",
        index.indices(Split::Train).len(),
        index.indices(Split::Test).len(),
        backbone.architecture()
    );
    let run = run_two_stage(&tc, &index, &backbone, cfg.cache_dir.as_deref())?;
    run.model.save(out.join(CHECKPOINT_FILE))?;
    run.history.write(out.join(HISTORY_FILE))?;
    write_text(
        &out.join(SPLIT_FILE),
        &serde_json::to_string_pretty(&split_json(&index, &run.data)).expect("plain json"),
    )?;
    match &run.report {
        Some(r) => {
            r.write(&index.classes, out.join(METRICS_FILE))?;
            print!("{}", r.to_text(&index.classes));
        }
        None => {
            log::warn!("test split is empty; metrics report has no values");
            write_text(&out.join(METRICS_FILE), "{\"test_samples\": 0}\n")?;
        }
    }
    if !run.history.is_empty() {
        export_curves(&run.history, &out, cfg.plot)?;
    }
    log::info!(
        "feature cache: {} hits, {} computed",
        run.cache.hits,
        run.cache.computed
    );
    println!("run directory: {}", out.display());
    Ok(out)
}

pub fn tune(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    cfg.validate_run(true)?;
    let out = cfg.require_out()?.to_path_buf();
    create_dir(&out)?;
    let index = dataset(cfg, cfg.require_dataset()?, Some(&out))?;
    let backbone = backbone(cfg)?;
    let tc = cfg.train_config();
    let data = PreparedData::new(&index, &tc)?;
    if data.validation.is_empty() {
        return Err(CliError::config("tuning needs a validation set; raise train.validation_fraction"));
    }
    let (train, val, _) = head_features(&tc, &index, &backbone, &data, cfg.cache_dir.as_deref())?;
    let schedule = build_schedule(cfg.tuner.max_resource, cfg.tuner.eta)?;
    let space = &cfg.tuner.space;
    let search = run_search(
        &schedule,
        space,
        head_objective(&tc, space, &train, &val),
        derive(tc.seeds.init, &[0x7E5E]),
        Some(&out.join(TRIALS_FILE)),
    )?;
    let mut best = cfg.clone();
    best.train.head = search.best.head_config(space);
    best.out = None;
    write_text(&out.join(BEST_CONFIG_FILE), &best.to_toml())?;
    println!(
        "best head: units {:?}, {:?}, dropout {} (validation accuracy {:.4} at {} epochs, {} evaluations)",
        search.best.units,
        search.best.activation,
        search.best.dropout,
        search.best_score,
        search.best.budget,
        search.records.len()
    );
    println!("best config: {}", out.join(BEST_CONFIG_FILE).display());
    Ok(out)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: Option<&'a Path>,
    pub backbone: Option<&'a Path>,
    pub split_seed: Option<u64>,
}

pub fn eval(cfg: &ExperimentConfig, args: &EvalArgs<'_>) -> CliResult<PathBuf> {
    if !args.checkpoint.is_file() {
        return Err(CliError::config(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let mut cfg = cfg.clone();
    if let Some(d) = args.dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    if let Some(b) = args.backbone {
        cfg.backbone = Some(b.to_path_buf());
    }
    let root = cfg.require_dataset()?.to_path_buf();
    let model = TrainedModel::load(args.checkpoint)?;
    if cfg.backbone.is_some() {
        let archive = WeightsArchive::read(cfg.require_backbone()?)?;
        if let Some(a) = archive.manifest.architecture {
            if a != model.spec.architecture {
                return Err(CliError::config(format!(
                    "architecture mismatch: checkpoint is {}, backbone archive is {a}",
                    model.spec.architecture
                )));
            }
        }
    }
    cfg.seeds.split = Some(args.split_seed.unwrap_or(model.config.seeds.split));
    let index = dataset(&cfg, &root, None)?;
    if index.classes != model.classes {
        return Err(CliError::data(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            index.classes, model.classes
        )));
    }
    let test = index.indices(Split::Test);
    let report = model.evaluate(&index, &test)?;
    print!("{}", report.to_text(&index.classes));
    let dir = match &cfg.out {
        Some(o) => o.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    create_dir(&dir)?;
    let path = dir.join(EVAL_METRICS_FILE);
    report.write(&index.classes, &path)?;
    println!("report: {}", path.display());
    Ok(path)
}

pub fn export(run_dir: &Path, out: Option<&Path>, plot: bool) -> CliResult<Vec<PathBuf>> {
    let hist_path = run_dir.join(HISTORY_FILE);
    if !hist_path.is_file() {
        return Err(CliError::config(format!("{} does not exist", hist_path.display())));
    }
    let history = TrainHistory::read(&hist_path)?;
    let files = export_curves(&history, out.unwrap_or(run_dir), plot)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(files)
}

/// Prints the listing; returns whether the checksum matched.
pub fn inspect(path: &Path) -> CliResult<bool> {
    if !path.is_file() {
        return Err(CliError::config(format!("{} does not exist", path.display())));
    }
    let ins = WeightsArchive::inspect(path)?;
    let m = &ins.archive.manifest;
    println!("file: {}", path.display());
    println!("kind: {:?}", m.kind);
    match m.architecture {
        Some(a) => println!("architecture: {a}"),
        None => println!("architecture: -"),
    }
    if let Some(s) = m.input_size {
        println!("input size: {s}");
    }
    println!("entries: {}", ins.archive.len());
    for (name, t) in ins.archive.entries() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("  {name}\t[{}]", dims.join(", "));
    }
    if ins.checksum_ok() {
        println!("checksum: OK ({:08x})", ins.stored_crc);
    } else {
        println!(
            "CHECKSUM FAIL: stored {:08x}, computed {:08x}",
            ins.stored_crc, ins.computed_crc
        );
    }
    Ok(ins.checksum_ok())
}
