use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::seed::derive;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// `class/filename`, stable across machines.
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Class names in label order (sorted directory names).
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub assignment: Option<Vec<Split>>,
    #[serde(default)]
    pub split_seed: Option<u64>,
}

/// Files that were found but could not be used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkipReport {
    pub entries: Vec<(PathBuf, String)>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// `path<TAB>reason` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (p, reason) in &self.entries {
            let reason = reason.replace(['\n', '\t'], " ");
            let _ = writeln!(s, "{}\t{}", p.display(), reason);
        }
        s
    }
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Sample indices assigned to `split`, in index order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.assignment {
            Some(a) => (0..a.len()).filter(|&i| a[i] == split).collect(),
            None if split == Split::Train => (0..self.samples.len()).collect(),
            None => Vec::new(),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `root/<class>/*.{jpg,jpeg,png}`. Exactly two class directories are
/// expected. Every file is decoded once; failures go to the skip report.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<(DatasetIndex, SkipReport)> {
    let root = root.as_ref();
    let read_dir = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(p, e));
    let mut classes = Vec::new();
    for entry in read_dir(root)? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    if classes.len() != 2 {
        return Err(Error::Data(format!(
            "{} must contain exactly two class directories, found {}: {:?}",
            root.display(),
            classes.len(),
            classes
        )));
    }
    let mut samples = Vec::new();
    let mut skipped = SkipReport::default();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<PathBuf> = read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let before = samples.len();
        for path in files {
            match Image::open(&path) {
                Ok(_) => {
                    let file = path.file_name().unwrap().to_string_lossy().into_owned();
                    samples.push(Sample {
                        id: format!("{class}/{file}"),
                        path,
                        label,
                    });
                }
                Err(e) => skipped.entries.push((path, e.to_string())),
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class `{class}` has no decodable images")));
        }
    }
    Ok((
        DatasetIndex {
            classes,
            samples,
            assignment: None,
            split_seed: None,
        },
        skipped,
    ))
}

/// Per-class holdout sizes: the total is `round(n·fraction)` and it is
/// apportioned by largest remainder (ties to the lower class index).
fn apportion(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(alloc.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Marks a seeded, class-stratified holdout of `fraction` of the given
/// labels. Returns one flag per label (`true` = held out).
pub fn stratified_holdout(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let counts: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let take = apportion(&counts, fraction);
    let mut out = vec![false; labels.len()];
    for (c, m) in members.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[c as u64]));
        m.shuffle(&mut rng);
        for &i in &m[..take[c]] {
            out[i] = true;
        }
    }
    out
}

fn random_holdout(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[u64::MAX]));
    idx.shuffle(&mut rng);
    let k = (n as f64 * fraction).round() as usize;
    let mut out = vec![false; n];
    for &i in &idx[..k] {
        out[i] = true;
    }
    out
}

/// Seeded train/test split. Stratified mode splits each class independently.
pub fn split_dataset(index: &DatasetIndex, seed: u64, test_fraction: f64, stratified: bool) -> Result<DatasetIndex> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Validation(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    if test_fraction > 0.0 {
        for (c, &n) in index.class_counts().iter().enumerate() {
            if n < 2 {
                return Err(Error::Validation(format!(
                    "class `{}` has {n} samples; splitting needs at least 2",
                    index.classes[c]
                )));
            }
        }
    }
    let labels = index.labels();
    let held = if stratified {
        stratified_holdout(&labels, index.classes.len(), test_fraction, seed)
    } else {
        random_holdout(labels.len(), test_fraction, seed)
    };
    let mut out = index.clone();
    out.assignment = Some(held.into_iter().map(|h| if h { Split::Test } else { Split::Train }).collect());
    out.split_seed = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_index(per_class: usize) -> DatasetIndex {
        let mut samples = Vec::new();
        for label in 0..2 {
            for i in 0..per_class {
                samples.push(Sample {
                    id: format!("c{label}/{i:04}.png"),
                    path: PathBuf::from(format!("c{label}/{i:04}.png")),
                    label,
                });
            }
        }
        DatasetIndex {
            classes: vec!["kudu_male".into(), "nyala_male".into()],
            samples,
            assignment: None,
            split_seed: None,
        }
    }

    #[test]
    fn apportion_550() {
        assert_eq!(apportion(&[275, 275], 0.15), vec![42, 41]);
        assert_eq!(apportion(&[10, 10], 0.0), vec![0, 0]);
    }

    #[test]
    fn stratified_split_sizes() {
        let idx = split_dataset(&synthetic_index(275), 3, 0.15, true).unwrap();
        let test = idx.indices(Split::Test);
        let train = idx.indices(Split::Train);
        assert_eq!(test.len(), 83);
        assert_eq!(train.len(), 467);
        let per_class = |split: &[usize], c| split.iter().filter(|&&i| idx.samples[i].label == c).count();
        assert_eq!(per_class(&train, 0) + per_class(&train, 1), 467);
        assert!([233, 234].contains(&per_class(&train, 0)));
        for c in 0..2 {
            let n = per_class(&test, c) as f64;
            assert!((n - 41.25).abs() <= 1.0);
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let base = synthetic_index(40);
        let a = split_dataset(&base, 11, 0.15, true).unwrap();
        let b = split_dataset(&base, 11, 0.15, true).unwrap();
        assert_eq!(a.assignment, b.assignment);
        let c = split_dataset(&base, 12, 0.15, true).unwrap();
        assert_ne!(a.assignment, c.assignment);
        let total = a.indices(Split::Train).len() + a.indices(Split::Test).len();
        assert_eq!(total, base.len());
    }

    #[test]
    fn zero_fraction_is_all_train() {
        let idx = split_dataset(&synthetic_index(5), 1, 0.0, true).unwrap();
        assert!(idx.indices(Split::Test).is_empty());
        let idx = split_dataset(&synthetic_index(5), 1, 0.0, false).unwrap();
        assert_eq!(idx.indices(Split::Train).len(), 10);
    }

    #[test]
    fn unstratified_uses_global_count() {
        let idx = split_dataset(&synthetic_index(275), 1, 0.15, false).unwrap();
        assert_eq!(idx.indices(Split::Test).len(), 83);
    }

    #[test]
    fn tiny_class_rejected() {
        let mut idx = synthetic_index(3);
        idx.samples.retain(|s| s.label == 0 || s.id.ends_with("0000.png"));
        assert!(split_dataset(&idx, 0, 0.15, true).is_err());
    }

    #[test]
    fn skip_report_format() {
        let r = SkipReport {
            entries: vec![(PathBuf::from("a/b.png"), "bad\nheader".into())],
        };
        assert_eq!(r.to_text(), "a/b.png\tbad header\n");
    }
}
