use std::fs;
use std::path::{Path, PathBuf};

use crate::archive::{ArchiveKind, Manifest, WeightsArchive};
use crate::error::{Error, Result};
use crate::nn::init::name_hash;
use crate::nn::NetworkGraph;
use crate::seed::derive;
use crate::tensor::Tensor32;

/// On-disk store of trunk outputs, one archive file per (image id,
/// augmentation seed). Files are written through a temporary name and
/// renamed, so readers never observe partial entries.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

/// Identifies a trunk together with whatever produced its inputs
/// (`context`: preprocessing, augmentation settings). Any change to layers,
/// parameters or context yields a different fingerprint.
pub fn trunk_fingerprint(trunk: &NetworkGraph<f32>, context: &str) -> String {
    let mut h = crc32fast::Hasher::new();
    h.update(context.as_bytes());
    for &d in trunk.input_shape() {
        h.update(&(d as u64).to_le_bytes());
    }
    for l in trunk.layers() {
        h.update(l.name.as_bytes());
        h.update(serde_json::to_string(&l.kind).unwrap_or_default().as_bytes());
        h.update(serde_json::to_string(&l.source).unwrap_or_default().as_bytes());
    }
    let structure = h.finalize();
    format!("{structure:08x}{:08x}", trunk.checksum(|_, _| true))
}

impl FeatureCache {
    /// Opens (creating if needed) the cache partition for `fingerprint`.
    pub fn open(root: impl AsRef<Path>, fingerprint: &str) -> Result<Self> {
        let dir = root.as_ref().join(fingerprint);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FeatureCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str, seed: u64) -> PathBuf {
        self.dir.join(format!("{:016x}.ftfw", derive(name_hash(id), &[seed])))
    }

    /// Cached features, or `None` on a miss. Unreadable or mismatching files
    /// are reported and treated as misses.
    pub fn get(&self, id: &str, seed: u64) -> Option<Tensor32> {
        let path = self.path(id, seed);
        if !path.exists() {
            return None;
        }
        let found = WeightsArchive::read(&path).and_then(|a| {
            let seed_ok = a.manifest.metadata.get("seed").and_then(|v| v.as_u64()) == Some(seed);
            match (a.manifest.kind, seed_ok, a.entries()) {
                (ArchiveKind::Features, true, [(name, t)]) if name == id => Ok(t.clone()),
                _ => Err(Error::Format("entry does not match its key".into())),
            }
        });
        match found {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("feature cache entry {} for `{id}` unusable, recomputing: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, id: &str, seed: u64, features: &Tensor32) -> Result<()> {
        let mut m = Manifest::new(ArchiveKind::Features);
        m.metadata.insert("seed".into(), seed.into());
        let mut a = WeightsArchive::new(m);
        a.push(id, features.clone())?;
        a.write(self.path(id, seed))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub hits: usize,
    pub computed: usize,
}

/// Trunk features for each `(id, seed)` key, from the cache where possible.
/// `load(i)` produces the preprocessed input for key `i`; it is only called
/// on a miss. Misses are evaluated in batches of `batch_size`.
pub fn extract_features(
    trunk: &NetworkGraph<f32>,
    keys: &[(String, u64)],
    cache: Option<&FeatureCache>,
    batch_size: usize,
    mut load: impl FnMut(usize) -> Result<Tensor32>,
) -> Result<(Vec<Tensor32>, ExtractStats)> {
    let mut out: Vec<Option<Tensor32>> = vec![None; keys.len()];
    let mut stats = ExtractStats::default();
    let mut misses = Vec::new();
    for (i, (id, seed)) in keys.iter().enumerate() {
        match cache.and_then(|c| c.get(id, *seed)) {
            Some(t) if t.shape() == trunk.output_shape() => {
                out[i] = Some(t);
                stats.hits += 1;
            }
            _ => misses.push(i),
        }
    }
    for chunk in misses.chunks(batch_size.max(1)) {
        let inputs = chunk.iter().map(|&i| load(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor32> = inputs.iter().collect();
        let y = trunk.infer(&Tensor32::stack(&refs)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let f = y.sample_tensor(k);
            if let Some(c) = cache {
                let (id, seed) = &keys[i];
                c.put(id, *seed, &f)?;
            }
            out[i] = Some(f);
            stats.computed += 1;
        }
    }
    Ok((out.into_iter().map(|t| t.expect("filled")).collect(), stats))
}
