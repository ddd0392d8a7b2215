//! File formats: the feature-matrix and patch-activation binary layouts,
//! the labels CSV, and the tagged binary container used by model types.
//!
//! Feature matrix layout (all integers little-endian):
//! magic `LDPO`, format version `u32` (1), `n_items: u64`, `dim: u64`,
//! an id table (per item: `u16` byte length + UTF-8 bytes), then
//! `n_items * dim` IEEE-754 `f32` values row-major. Values are stored as
//! `f32` regardless of the in-memory scalar: loading into `f64` widens
//! exactly, writing from `f64` rounds to the nearest `f32`.
//!
//! Patch activation layout: magic, version, `n_images: u64`, `dim: u64`,
//! then per image: id (`u16` length + bytes), patch count `u32`, and per
//! patch `scale: f32`, `x: u32`, `y: u32`, `dim` further `f32` values.
//!
//! Model files share the same magic and version followed by a `u32` type
//! tag; each model type owns its payload layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::types::{FeatureMatrix, ImagePatches, LabelVector, Patch, PatchActivationSet};

const MAGIC: &[u8; 4] = b"LDPO";
const FORMAT_VERSION: u32 = 1;

/// Type tags for model payloads stored in the binary container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerTag {
    Pca = 0x50,
    Codebook = 0x51,
    Gmm = 0x52,
    Vocabulary = 0x53,
    Encoder = 0x54,
}

impl ContainerTag {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0x50 => Some(Self::Pca),
            0x51 => Some(Self::Codebook),
            0x52 => Some(Self::Gmm),
            0x53 => Some(Self::Vocabulary),
            0x54 => Some(Self::Encoder),
            _ => None,
        }
    }
}

/// Reader wrapper that tracks the byte offset for format errors.
pub(crate) struct TrackedReader<R: Read> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bad(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, self.offset, msg)
    }

    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.bad("unexpected end of data"))
            }
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    pub(crate) fn read_u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn read_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    /// One finite `f32` widened to the working scalar; rejects NaN/Inf with
    /// the offset of the offending value.
    pub(crate) fn read_finite<F: Float>(&mut self) -> Result<F> {
        let at = self.offset;
        let v = self.read_f32()?;
        if !v.is_finite() {
            return Err(Error::format(
                &self.path,
                at,
                format!("non-finite value {v}"),
            ));
        }
        Ok(F::cast(v))
    }

    pub(crate) fn read_string(&mut self) -> Result<String> {
        let len = self.read_u16()? as usize;
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.take(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::format(&self.path, at, "invalid UTF-8 in id"))
    }

    pub(crate) fn expect_magic(&mut self) -> Result<()> {
        let mut m = [0u8; 4];
        self.take(&mut m)?;
        if &m != MAGIC {
            return Err(Error::format(&self.path, 0, "bad magic"));
        }
        let at = self.offset;
        let version = self.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                &self.path,
                at,
                format!("unsupported format version {version}"),
            ));
        }
        Ok(())
    }

    /// Checked `n_items * dim` with an overflow error at the current offset.
    pub(crate) fn checked_extent(&self, n: u64, d: u64) -> Result<(usize, usize)> {
        let n: usize = n
            .try_into()
            .map_err(|_| self.bad(format!("dimension overflow: n_items = {n}")))?;
        let d: usize = d
            .try_into()
            .map_err(|_| self.bad(format!("dimension overflow: dim = {d}")))?;
        n.checked_mul(d)
            .ok_or_else(|| self.bad(format!("dimension overflow: {n} x {d}")))?;
        Ok((n, d))
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read_exact(&mut b) {
            Ok(()) => Err(self.bad("trailing bytes after payload")),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(()),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<TrackedReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(TrackedReader::new(BufReader::new(f), path))
}

pub(crate) struct TrackedWriter<W: Write> {
    inner: W,
    path: PathBuf,
}

impl<W: Write> TrackedWriter<W> {
    fn err(&self, e: std::io::Error) -> Error {
        Error::io(&self.path, e)
    }

    pub(crate) fn write_u16(&mut self, v: u16) -> Result<()> {
        self.inner
            .write_u16::<LittleEndian>(v)
            .map_err(|e| self.err(e))
    }

    pub(crate) fn write_u32(&mut self, v: u32) -> Result<()> {
        self.inner
            .write_u32::<LittleEndian>(v)
            .map_err(|e| self.err(e))
    }

    pub(crate) fn write_u64(&mut self, v: u64) -> Result<()> {
        self.inner
            .write_u64::<LittleEndian>(v)
            .map_err(|e| self.err(e))
    }

    pub(crate) fn write_f32(&mut self, v: f32) -> Result<()> {
        self.inner
            .write_f32::<LittleEndian>(v)
            .map_err(|e| self.err(e))
    }

    pub(crate) fn write_f64(&mut self, v: f64) -> Result<()> {
        self.inner
            .write_f64::<LittleEndian>(v)
            .map_err(|e| self.err(e))
    }

    pub(crate) fn write_scalar_f32<F: Float>(&mut self, v: F) -> Result<()> {
        self.write_f32(v.as_f64() as f32)
    }

    pub(crate) fn write_string(&mut self, s: &str) -> Result<()> {
        let bytes = s.as_bytes();
        let len: u16 = bytes
            .len()
            .try_into()
            .map_err(|_| Error::invalid(format!("id {s:?} longer than 65535 bytes")))?;
        self.write_u16(len)?;
        self.inner.write_all(bytes).map_err(|e| self.err(e))
    }

    pub(crate) fn write_magic(&mut self) -> Result<()> {
        self.inner.write_all(MAGIC).map_err(|e| self.err(e))?;
        self.write_u32(FORMAT_VERSION)
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| self.err(e))
    }
}

pub(crate) fn open_writer(path: &Path) -> Result<TrackedWriter<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(TrackedWriter {
        inner: BufWriter::new(f),
        path: path.to_path_buf(),
    })
}

/// Write a feature matrix in the binary layout. Bytes are a deterministic
/// function of the matrix contents.
pub fn write_feature_matrix<F: Float>(m: &FeatureMatrix<F>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_magic()?;
    w.write_u64(m.n_items() as u64)?;
    w.write_u64(m.dim() as u64)?;
    for id in m.item_ids() {
        w.write_string(id)?;
    }
    for v in m.data().iter() {
        w.write_scalar_f32(*v)?;
    }
    w.finish()
}

/// Load a feature matrix; `.csv` paths use the text fallback, everything
/// else the binary layout.
pub fn load_feature_matrix<F: Float>(path: &Path) -> Result<FeatureMatrix<F>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        load_feature_matrix_csv(path)
    } else {
        load_feature_matrix_binary(path)
    }
}

fn load_feature_matrix_binary<F: Float>(path: &Path) -> Result<FeatureMatrix<F>> {
    let mut r = open_reader(path)?;
    r.expect_magic()?;
    let n = r.read_u64()?;
    let d = r.read_u64()?;
    let (n, d) = r.checked_extent(n, d)?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.read_string()?);
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.read_finite::<F>()?);
    }
    r.expect_end()?;
    let arr = Array2::from_shape_vec((n, d), data).expect("shape checked");
    FeatureMatrix::new(arr, ids)
}

/// CSV fallback: one row per item, `item_id,v0,v1,...` with no header.
fn load_feature_matrix_csv<F: Float>(path: &Path) -> Result<FeatureMatrix<F>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut values: Vec<F> = Vec::new();
    let mut dim = None;
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or("").trim();
            if id.is_empty() {
                return Err(Error::format(path, offset, format!("line {}: empty item id", lineno + 1)));
            }
            let row: Vec<F> = fields
                .map(|f| {
                    let v: f64 = f.trim().parse().map_err(|_| {
                        Error::format(path, offset, format!("line {}: bad number {f:?}", lineno + 1))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::format(
                            path,
                            offset,
                            format!("line {}: non-finite value {v}", lineno + 1),
                        ));
                    }
                    Ok(F::cast(v))
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::format(
                        path,
                        offset,
                        format!("line {}: expected {d} values, got {}", lineno + 1, row.len()),
                    ))
                }
                _ => {}
            }
            ids.push(id.to_string());
            values.extend(row);
        }
        offset += line.len() as u64 + 1;
    }
    let d = dim.unwrap_or(0);
    let arr = Array2::from_shape_vec((ids.len(), d), values)
        .map_err(|e| Error::format(path, 0, e.to_string()))?;
    FeatureMatrix::new(arr, ids)
}

/// Write labels as CSV with an `item_id,label` header.
pub fn write_labels(lv: &LabelVector, path: &Path) -> Result<()> {
    let mut out = String::from("item_id,label\n");
    for (id, l) in lv.item_ids().iter().zip(lv.labels()) {
        out.push_str(id);
        out.push(',');
        out.push_str(&l.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load labels from CSV. When `declared_k` is given every label must be
/// below it; otherwise k is inferred as `max label + 1`.
pub fn load_labels(path: &Path, declared_k: Option<usize>) -> Result<LabelVector> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("item_id,label") => {}
        Some(other) => {
            return Err(Error::format(
                path,
                0,
                format!("expected header \"item_id,label\", got {other:?}"),
            ))
        }
        None => return Err(Error::format(path, 0, "empty labels file")),
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| {
            Error::format(path, 0, format!("line {}: expected item_id,label", i + 2))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::format(path, 0, format!("line {}: bad label {label:?}", i + 2))
        })?;
        ids.push(id.trim().to_string());
        labels.push(label);
    }
    let k = match declared_k {
        Some(k) => k,
        None => labels.iter().max().map_or(1, |&m| m + 1),
    };
    LabelVector::new(labels, k, ids)
}

/// Write a patch activation set in the binary layout.
pub fn write_patch_set<F: Float>(set: &PatchActivationSet<F>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_magic()?;
    w.write_u64(set.images().len() as u64)?;
    w.write_u64(set.dim() as u64)?;
    for im in set.images() {
        w.write_string(&im.image_id)?;
        let count: u32 = im
            .patches
            .len()
            .try_into()
            .map_err(|_| Error::invalid("more than 2^32 patches in one image"))?;
        w.write_u32(count)?;
        for p in &im.patches {
            w.write_scalar_f32(p.scale)?;
            w.write_u32(p.x)?;
            w.write_u32(p.y)?;
            for v in p.activation.iter() {
                w.write_scalar_f32(*v)?;
            }
        }
    }
    w.finish()
}

pub fn load_patch_set<F: Float>(path: &Path) -> Result<PatchActivationSet<F>> {
    let mut r = open_reader(path)?;
    r.expect_magic()?;
    let n = r.read_u64()?;
    let d = r.read_u64()?;
    let (n, d) = r.checked_extent(n, d)?;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let image_id = r.read_string()?;
        let count = r.read_u32()? as usize;
        let mut patches = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let scale = r.read_finite::<F>()?;
            if !(scale > F::zero()) {
                return Err(Error::format(
                    path,
                    at,
                    format!("non-positive patch scale {scale}"),
                ));
            }
            let x = r.read_u32()?;
            let y = r.read_u32()?;
            let mut activation = Vec::with_capacity(d);
            for _ in 0..d {
                activation.push(r.read_finite::<F>()?);
            }
            patches.push(Patch {
                scale,
                x,
                y,
                activation: Array1::from_vec(activation),
            });
        }
        images.push(ImagePatches { image_id, patches });
    }
    r.expect_end()?;
    PatchActivationSet::new(d, images)
}

pub(crate) fn write_container_header<W: Write>(
    w: &mut TrackedWriter<W>,
    tag: ContainerTag,
) -> Result<()> {
    w.write_magic()?;
    w.write_u32(tag as u32)
}

pub(crate) fn read_container_header<R: Read>(
    r: &mut TrackedReader<R>,
    expected: ContainerTag,
) -> Result<()> {
    r.expect_magic()?;
    let at = r.offset();
    let raw = r.read_u32()?;
    match ContainerTag::from_u32(raw) {
        Some(tag) if tag == expected => Ok(()),
        Some(tag) => Err(Error::format(
            r.path_buf(),
            at,
            format!("container holds {tag:?}, expected {expected:?}"),
        )),
        None => Err(Error::format(
            r.path_buf(),
            at,
            format!("unknown container tag {raw:#x}"),
        )),
    }
}

impl<R: Read> TrackedReader<R> {
    fn path_buf(&self) -> PathBuf {
        self.path.clone()
    }
}
