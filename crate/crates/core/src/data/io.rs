//! Binary volume (`SRTV`) and label (`SRTL`) files.
//!
//! Layout, all integers little-endian u32:
//! `magic[4] | version | dtype | rank | extents[rank] | payload`.
//! Volume payload is little-endian f64 (dtype 1); label payload is one u8
//! external code per voxel (dtype 2).

use std::fs;
use std::path::Path;

use super::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"SRTV";
pub const LABEL_MAGIC: &[u8; 4] = b"SRTL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_U8: u32 = 2;

fn header(magic: &[u8; 4], dtype: u32, extents: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * extents.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for &e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "payload size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4], dtype: u32) -> Result<Vec<usize>> {
        self.expect_magic(magic)?;
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        let got = self.u32()?;
        if got != dtype {
            return Err(Error::format(self.path, format!("dtype code {got}, expected {dtype}")));
        }
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(self.path, format!("implausible rank {rank}")));
        }
        let extents = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if extents.contains(&0) {
            return Err(Error::format(self.path, format!("zero extent in {extents:?}")));
        }
        Ok(extents)
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let t = volume.tensor();
    let mut bytes = header(VOLUME_MAGIC, DTYPE_F64, t.shape());
    bytes.reserve(8 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Load a volume; the subject id is the file stem.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    let extents = r.header(VOLUME_MAGIC, DTYPE_F64)?;
    if extents.len() != 4 {
        return Err(Error::format(path, format!("volume rank {} != 4", extents.len())));
    }
    let n = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::format(path, "extent overflow"))?;
    let data = r.f64s(n)?;
    r.finish()?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Volume::new(id, Tensor::new(extents, data)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut bytes = header(LABEL_MAGIC, DTYPE_U8, &labels.extents());
    bytes.extend_from_slice(labels.codes());
    write_file(path, &bytes)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    let extents = r.header(LABEL_MAGIC, DTYPE_U8)?;
    if extents.len() != 3 {
        return Err(Error::format(path, format!("label rank {} != 3", extents.len())));
    }
    let n = extents.iter().product();
    let codes = r.take(n)?.to_vec();
    r.finish()?;
    LabelMap::new([extents[0], extents[1], extents[2]], codes)
        .map_err(|e| Error::format(path, e.to_string()))
}
