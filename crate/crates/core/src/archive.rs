//! `GWTA` named-tensor archives (weights and datasets).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GWTA" | version: u32 = 1 | count: u32
//! per tensor: name_len: u16 | name: utf-8 | dtype: u8 (0 = f32, 1 = i32)
//!             | rank: u8 | dims: u32 * rank | data
//! ```
//!
//! Datasets are archives holding `images` (f32, N x C x H x W) and optionally
//! `labels` (i32, N).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GWTA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }
}

/// One archive entry.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::I32 { .. } => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::I32 { shape, .. } => shape,
        }
    }
}

/// Ordered collection of named tensors. Order is preserved so that reading
/// and re-writing a canonical file reproduces it byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
}

/// Archive holding model parameters.
pub type WeightArchive = Archive;

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.insert(name, Entry::F32(t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(_) => Err(Error::data(format!("tensor '{name}' is not f32"))),
            None => Err(Error::data(format!("archive has no tensor '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::data("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, e) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::data(format!("tensor name '{name}' longer than 65535 bytes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype().code());
            let shape = e.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| Error::data(format!("'{name}' has rank > 255")))?;
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::data(format!("'{name}' extent {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match e {
                Entry::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses an archive. Any defect yields an error carrying the byte
    /// offset where it was detected; nothing partial is returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::data_at(format!("bad magic {magic:?}, expected \"GWTA\""), 0));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::data_at(format!("unsupported version {version}"), 4));
        }
        let count = r.u32("tensor count")?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let start = r.pos as u64;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::data_at("tensor name is not UTF-8", start + 2))?
                .to_string();
            let dtype_at = r.pos as u64;
            let dtype = match r.u8("dtype")? {
                0 => DType::F32,
                1 => DType::I32,
                other => return Err(Error::data_at(format!("tensor '{name}': unknown dtype {other}"), dtype_at)),
            };
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos as u64;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return Err(Error::data_at(format!("tensor '{name}' has a zero extent"), at));
                }
                shape.push(d);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::data_at(format!("tensor '{name}' is too large"), start))?;
            let raw = r.take(n.saturating_mul(4), &format!("data of '{name}'"))?;
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::from_parts(
                    shape,
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )),
                DType::I32 => Entry::I32 {
                    shape,
                    data: raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
            };
            if archive.get(&name).is_some() {
                return Err(Error::data_at(format!("duplicate tensor name '{name}'"), start));
            }
            archive.entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(Error::data_at(format!("{} trailing bytes", bytes.len() - r.pos), r.pos as u64));
        }
        Ok(archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::data_at(
                format!("truncated archive while reading {what} ({} bytes left, need {n})", self.bytes.len() - self.pos),
                self.pos as u64,
            )),
        }
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

/// Images plus optional labels, tagged with where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub source: String,
}

impl SampleBatch {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, source: impl Into<String>) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::data(format!("{} labels for {n} images", l.len())));
            }
        }
        Ok(SampleBatch { images, labels, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.images.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reads a dataset archive; the source tag defaults to the file stem.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
        Self::from_archive(&Archive::read(path)?, tag)
    }

    pub fn from_archive(archive: &Archive, source: impl Into<String>) -> Result<Self> {
        let images = match archive.get("images") {
            Some(Entry::F32(t)) if t.rank() == 4 => t.clone(),
            Some(Entry::F32(t)) => {
                return Err(Error::data(format!("'images' must be N x C x H x W, got {:?}", t.shape())))
            }
            Some(_) => return Err(Error::data("'images' must be f32")),
            None => return Err(Error::data("dataset archive has no 'images' tensor")),
        };
        let labels = match archive.get("labels") {
            None => None,
            Some(Entry::I32 { shape, data }) if shape.len() == 1 => Some(
                data.iter()
                    .map(|&v| usize::try_from(v).map_err(|_| Error::data(format!("negative label {v}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(_) => return Err(Error::data("'labels' must be a rank-1 i32 tensor")),
        };
        Self::new(images, labels, source)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert_f32("images", self.images.clone());
        if let Some(l) = &self.labels {
            a.insert("labels", Entry::I32 { shape: vec![l.len()], data: l.iter().map(|&v| v as i32).collect() });
        }
        a
    }

    /// Checks labels against a class count.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(bad) = self.labels.iter().flatten().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(())
    }

    /// Copy of samples `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Ok(SampleBatch {
            images: self.images.rows(range.clone())?,
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
            source: self.source.clone(),
        })
    }
}
