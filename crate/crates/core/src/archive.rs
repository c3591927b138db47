//! Flat named-tensor container used for backbone weights, checkpoints and
//! the feature cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FTFW"                     magic
//! u16                        format version (1)
//! u32, [u8]                  manifest length, UTF-8 JSON manifest
//! u32                        entry count
//! per entry:
//!   u16, [u8]                name length, UTF-8 name
//!   u8                       dtype tag (0 = f32)
//!   u8, u32 × ndim           rank, extents
//!   [u8]                     4·∏extents bytes of f32 payload
//! u32                        CRC32 (IEEE) of all payload bytes in entry order
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Architecture;
use crate::data::ChannelMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor32;

pub const MAGIC: &[u8; 4] = b"FTFW";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    Backbone,
    Checkpoint,
    Features,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ArchiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default = "one")]
    pub width_divisor: usize,
    #[serde(default)]
    pub include_top: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<ChannelMode>,
    #[serde(default)]
    pub layer_order: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

fn one() -> usize {
    1
}

impl Manifest {
    pub fn new(kind: ArchiveKind) -> Self {
        Manifest {
            kind,
            architecture: None,
            input_size: None,
            width_divisor: 1,
            include_top: false,
            classes: None,
            preprocessing: None,
            layer_order: Vec::new(),
            metadata: serde_json::Map::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsArchive {
    pub manifest: Manifest,
    entries: Vec<(String, Tensor32)>,
}

/// Result of parsing an archive without failing on a checksum mismatch.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub archive: WeightsArchive,
    pub stored_crc: u32,
    pub computed_crc: u32,
}

impl Inspection {
    pub fn checksum_ok(&self) -> bool {
        self.stored_crc == self.computed_crc
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated archive while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl WeightsArchive {
    pub fn new(manifest: Manifest) -> Self {
        WeightsArchive {
            manifest,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor32) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {} bytes", name.len())));
        }
        if tensor.ndim() > u8::MAX as usize {
            return Err(Error::Format(format!("entry {name} has too many dimensions")));
        }
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate entry name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor32)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor32> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn payload_crc(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, t) in &self.entries {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        let mut out = Vec::with_capacity(64 + manifest.len() + self.entries.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut crc = crc32fast::Hasher::new();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&out[start..]);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        Ok(out)
    }

    /// Parses an archive, reporting but not rejecting a checksum mismatch.
    pub fn inspect_bytes(buf: &[u8]) -> Result<Inspection> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic; not an FTFW archive".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mlen = r.u32("manifest length")? as usize;
        let mbytes = r.take(mlen, "manifest")?;
        let mtext = std::str::from_utf8(mbytes).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let value: serde_json::Value =
            serde_json::from_str(mtext).map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
        if let Some(arch) = value.get("architecture").and_then(|a| a.as_str()) {
            if !Architecture::NAMES.contains(&arch) {
                return Err(Error::Unsupported(format!("architecture `{arch}`")));
            }
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        let mut crc = crc32fast::Hasher::new();
        for _ in 0..count {
            let nlen = r.u16("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "entry name")?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("entry {name}: unsupported dtype tag {dtype}")));
            }
            let ndim = r.u8("rank")? as usize;
            if ndim == 0 {
                return Err(Error::Format(format!("entry {name}: rank 0")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("extent")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("entry {name}: payload size overflows")))?;
            let payload = r.take(n, "payload")?;
            crc.update(payload);
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor32::new(dims, data).map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry name {name}")));
            }
            entries.push((name, t));
        }
        let stored_crc = r.u32("checksum")?;
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum", buf.len() - r.pos)));
        }
        Ok(Inspection {
            archive: WeightsArchive { manifest, entries },
            stored_crc,
            computed_crc: crc.finalize(),
        })
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let ins = Self::inspect_bytes(buf)?;
        if !ins.checksum_ok() {
            return Err(Error::Format(format!(
                "payload checksum mismatch: stored {:08x}, computed {:08x}",
                ins.stored_crc, ins.computed_crc
            )));
        }
        Ok(ins.archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn inspect(path: impl AsRef<Path>) -> Result<Inspection> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::inspect_bytes(&buf)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}
