//! Binary gradient-feature store and the checkpoint container.
//!
//! Store layout, all little-endian:
//!
//! ```text
//! header  magic "LESSGRAD" | version u32 | d u32 | N u32 | N x f64 epoch lrs
//!         | P u64 | projection seed u64 | kind u8 | normalized u8 | 2 reserved
//!         | 32-byte model fingerprint | example_count u64          (80 + 8N bytes)
//! record  example_id u64 | epoch u32 | flags u32 | raw_norm f32 | d x f32   (20 + 4d bytes)
//! ```
//!
//! Records are sorted by (epoch, example_id). Epochs are appended in order and
//! each holds exactly `example_count` records with the same id sequence.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use less_core::influence::FeatureKind;
use less_core::optimizer::AdamState;
use less_core::params::{ParamVector, Segment};
use less_core::train::Checkpoint;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"LESSGRAD";
pub const VERSION: u32 = 1;
pub const FLAG_ZERO_NORM: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file too short for header ({0} bytes)")]
    ShortHeader(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{0} already exists with an incompatible header")]
    Incompatible(PathBuf),
    #[error("{0} already exists")]
    Exists(PathBuf),
    #[error("epoch {got} appended out of order (expected {expected})")]
    EpochOrder { expected: u32, got: u32 },
    #[error("epoch {epoch} has {got} records, expected {expected}")]
    Count { epoch: u32, expected: u64, got: u64 },
    #[error("duplicate or unsorted example id {id} in epoch {epoch}")]
    Order { epoch: u32, id: u64 },
    #[error("example {id} in epoch {epoch} differs from the epoch-0 id sequence")]
    IdMismatch { epoch: u32, id: u64 },
    #[error("feature dim {got}, store dim {expected}")]
    Dim { expected: usize, got: usize },
    #[error("non-finite feature for example {0}")]
    NonFinite(u64),
    #[error("record ({id}, {epoch}) not found")]
    NotFound { id: u64, epoch: u32 },
    #[error("malformed checkpoint container: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Header {
    pub dim: u32,
    pub epoch_lrs: Vec<f64>,
    pub input_dim: u64,
    pub projection_seed: u64,
    pub kind: FeatureKind,
    pub normalized: bool,
    pub fingerprint: [u8; 32],
    pub example_count: u64,
}

impl Header {
    pub fn num_epochs(&self) -> usize {
        self.epoch_lrs.len()
    }

    pub fn byte_len(&self) -> usize {
        header_len(self.num_epochs())
    }

    pub fn record_len(&self) -> usize {
        record_len(self.dim as usize)
    }

    /// Size of a complete store.
    pub fn file_len(&self) -> u64 {
        self.byte_len() as u64
            + self.num_epochs() as u64 * self.example_count * self.record_len() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.epoch_lrs.is_empty() {
            return Err(StoreError::InvalidHeader("d and N must be >= 1".into()));
        }
        if self.epoch_lrs.iter().any(|lr| !lr.is_finite()) {
            return Err(StoreError::InvalidHeader("non-finite epoch lr".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.byte_len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.dim.to_le_bytes());
        b.extend_from_slice(&(self.epoch_lrs.len() as u32).to_le_bytes());
        for lr in &self.epoch_lrs {
            b.extend_from_slice(&lr.to_le_bytes());
        }
        b.extend_from_slice(&self.input_dim.to_le_bytes());
        b.extend_from_slice(&self.projection_seed.to_le_bytes());
        b.push(self.kind.code());
        b.push(self.normalized as u8);
        b.extend_from_slice(&[0, 0]);
        b.extend_from_slice(&self.fingerprint);
        b.extend_from_slice(&self.example_count.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < 20 {
            return Err(StoreError::ShortHeader(bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let mut r = Reader { b: bytes, pos: 8 };
        let version = r.u32();
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let dim = r.u32();
        let n = r.u32() as usize;
        if bytes.len() < header_len(n) {
            return Err(StoreError::ShortHeader(bytes.len()));
        }
        let epoch_lrs = (0..n).map(|_| r.f64()).collect();
        let input_dim = r.u64();
        let projection_seed = r.u64();
        let kind_code = r.u8();
        let kind = FeatureKind::from_code(kind_code)
            .ok_or_else(|| StoreError::InvalidHeader(format!("feature kind {kind_code}")))?;
        let normalized = match r.u8() {
            0 => false,
            1 => true,
            x => return Err(StoreError::InvalidHeader(format!("normalized flag {x}"))),
        };
        r.pos += 2;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(&bytes[r.pos..r.pos + 32]);
        r.pos += 32;
        let example_count = r.u64();
        let h = Header {
            dim,
            epoch_lrs,
            input_dim,
            projection_seed,
            kind,
            normalized,
            fingerprint,
            example_count,
        };
        h.validate()?;
        Ok(h)
    }
}

pub fn header_len(num_epochs: usize) -> usize {
    80 + 8 * num_epochs
}

pub fn record_len(dim: usize) -> usize {
    20 + 4 * dim
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.b[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub example_id: u64,
    pub epoch: u32,
    pub flags: u32,
    pub raw_norm: f32,
    pub feature: Vec<f32>,
}

impl Record {
    pub fn zero_norm(&self) -> bool {
        self.flags & FLAG_ZERO_NORM != 0
    }

    /// The stored feature widened to f64.
    pub fn values(&self) -> Vec<f64> {
        self.feature.iter().map(|&x| x as f64).collect()
    }

    /// Raw-scale feature: normalized features are multiplied back by their norm.
    pub fn restored(&self, normalized: bool) -> Vec<f64> {
        let s = if normalized {
            self.raw_norm as f64
        } else {
            1.0
        };
        self.feature.iter().map(|&x| x as f64 * s).collect()
    }
}

fn encode_record(
    id: u64,
    epoch: u32,
    flags: u32,
    raw_norm: f32,
    feature: &[f32],
    out: &mut Vec<u8>,
) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&raw_norm.to_le_bytes());
    for x in feature {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Single writer. Features go in as f64 and are normalized (if the header
/// says so) in f64 before rounding to f32.
pub struct DatastoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: Header,
    next_epoch: u32,
    ids: Vec<u64>,
}

impl DatastoreWriter {
    /// Creates a new store. An existing file is never overwritten.
    pub fn create(path: impl AsRef<Path>, header: Header) -> Result<Self> {
        let path = path.as_ref();
        header.validate()?;
        if path.exists() {
            let existing = fs::read(path).map_err(io(path))?;
            return Err(match Header::decode(&existing) {
                Ok(h) if h == header => StoreError::Exists(path.to_path_buf()),
                _ => StoreError::Incompatible(path.to_path_buf()),
            });
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(io(path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(io(path))?;
        Ok(DatastoreWriter {
            path: path.to_path_buf(),
            out,
            header,
            next_epoch: 0,
            ids: Vec::new(),
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Appends one epoch block; ids must be strictly increasing and, after the
    /// first epoch, identical to the first epoch's ids.
    pub fn append_epoch<V: AsRef<[f64]>>(
        &mut self,
        epoch: u32,
        features: &[(u64, V)],
    ) -> Result<usize> {
        if epoch != self.next_epoch || epoch as usize >= self.header.num_epochs() {
            return Err(StoreError::EpochOrder {
                expected: self.next_epoch,
                got: epoch,
            });
        }
        if features.len() as u64 != self.header.example_count {
            return Err(StoreError::Count {
                epoch,
                expected: self.header.example_count,
                got: features.len() as u64,
            });
        }
        let d = self.header.dim as usize;
        let mut buf = Vec::with_capacity(features.len() * self.header.record_len());
        let mut prev: Option<u64> = None;
        for (i, (id, v)) in features.iter().enumerate() {
            let v = v.as_ref();
            if prev.is_some_and(|p| *id <= p) {
                return Err(StoreError::Order { epoch, id: *id });
            }
            prev = Some(*id);
            if epoch > 0 && self.ids[i] != *id {
                return Err(StoreError::IdMismatch { epoch, id: *id });
            }
            if v.len() != d {
                return Err(StoreError::Dim {
                    expected: d,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite(*id));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (flags, scale) = if norm == 0.0 {
                (FLAG_ZERO_NORM, 0.0)
            } else if self.header.normalized {
                (0, 1.0 / norm)
            } else {
                (0, 1.0)
            };
            let feature: Vec<f32> = v.iter().map(|x| (x * scale) as f32).collect();
            encode_record(*id, epoch, flags, norm as f32, &feature, &mut buf);
        }
        self.out.write_all(&buf).map_err(io(&self.path))?;
        if epoch == 0 {
            self.ids = features.iter().map(|(id, _)| *id).collect();
        }
        self.next_epoch += 1;
        Ok(features.len())
    }

    /// Flushes and syncs. Fails if not every epoch was written.
    pub fn finish(mut self) -> Result<PathBuf> {
        if self.next_epoch as usize != self.header.num_epochs() {
            return Err(StoreError::EpochOrder {
                expected: self.next_epoch,
                got: self.header.num_epochs() as u32,
            });
        }
        self.out.flush().map_err(io(&self.path))?;
        self.out.get_ref().sync_all().map_err(io(&self.path))?;
        Ok(self.path)
    }
}

/// Read-only view of a store, loaded fully into memory.
#[derive(Debug, Clone)]
pub struct Datastore {
    header: Header,
    bytes: Vec<u8>,
}

impl Datastore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io(path))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let header = Header::decode(&bytes)?;
        Ok(Datastore { header, bytes })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Whole records present (a truncated tail is ignored here; see [`validate`](Self::validate)).
    pub fn record_count(&self) -> usize {
        (self.bytes.len() - self.header.byte_len()) / self.header.record_len()
    }

    pub fn record_at(&self, index: usize) -> Option<Record> {
        if index >= self.record_count() {
            return None;
        }
        let start = self.header.byte_len() + index * self.header.record_len();
        let mut r = Reader {
            b: &self.bytes,
            pos: start,
        };
        let example_id = r.u64();
        let epoch = r.u32();
        let flags = r.u32();
        let raw_norm = r.f32();
        let feature = (0..self.header.dim).map(|_| r.f32()).collect();
        Some(Record {
            example_id,
            epoch,
            flags,
            raw_norm,
            feature,
        })
    }

    fn id_at(&self, index: usize) -> u64 {
        let start = self.header.byte_len() + index * self.header.record_len();
        u64::from_le_bytes(self.bytes[start..start + 8].try_into().unwrap())
    }

    pub fn get(&self, example_id: u64, epoch: u32) -> Result<Record> {
        let n = self.header.example_count as usize;
        let lo = epoch as usize * n;
        let hi = (lo + n).min(self.record_count());
        if lo >= hi {
            return Err(StoreError::NotFound {
                id: example_id,
                epoch,
            });
        }
        // binary search on the id field within the epoch block
        let (mut a, mut b) = (lo, hi);
        while a < b {
            let mid = (a + b) / 2;
            match self.id_at(mid).cmp(&example_id) {
                std::cmp::Ordering::Less => a = mid + 1,
                std::cmp::Ordering::Greater => b = mid,
                std::cmp::Ordering::Equal => {
                    let r = self.record_at(mid).unwrap();
                    if r.epoch == epoch {
                        return Ok(r);
                    }
                    break;
                }
            }
        }
        Err(StoreError::NotFound {
            id: example_id,
            epoch,
        })
    }

    /// Records in file order.
    pub fn scan(&self) -> impl Iterator<Item = Record> + '_ {
        (0..self.record_count()).map(|i| self.record_at(i).unwrap())
    }

    /// Example ids of the first epoch block, in stored order.
    pub fn example_ids(&self) -> Vec<u64> {
        let n = (self.header.example_count as usize).min(self.record_count());
        (0..n).map(|i| self.id_at(i)).collect()
    }

    /// All epochs' records for the example at position `index` of each block.
    pub fn example_records(&self, index: usize) -> Vec<Record> {
        let n = self.header.example_count as usize;
        (0..self.header.num_epochs())
            .filter_map(|e| self.record_at(e * n + index))
            .collect()
    }

    /// SHA-256 of the whole file image.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(&self.bytes).into()
    }

    /// Header consistency, length, ordering, epoch layout and norm checks.
    pub fn validate(&self) -> Vec<Fault> {
        let mut faults = Vec::new();
        let h = &self.header;
        let expected = h.file_len();
        let actual = self.bytes.len() as u64;
        if actual < expected {
            faults.push(Fault::Truncated { expected, actual });
        } else if actual > expected {
            faults.push(Fault::TrailingBytes { expected, actual });
        }
        if (actual - h.byte_len() as u64) % h.record_len() as u64 != 0 {
            faults.push(Fault::PartialRecord);
        }
        let n = h.example_count as usize;
        let first_ids = self.example_ids();
        for i in 0..self.record_count() {
            let r = self.record_at(i).unwrap();
            let epoch = (i / n.max(1)) as u32;
            if r.epoch != epoch {
                faults.push(Fault::WrongEpoch {
                    index: i,
                    expected: epoch,
                    got: r.epoch,
                });
            }
            let pos = i % n.max(1);
            if pos > 0 && self.id_at(i - 1) >= r.example_id {
                faults.push(Fault::Unsorted { index: i });
            }
            if first_ids.get(pos).is_some_and(|&id| id != r.example_id) {
                faults.push(Fault::IdSequence { index: i });
            }
            if r.flags & !FLAG_ZERO_NORM != 0 {
                faults.push(Fault::UnknownFlags {
                    index: i,
                    flags: r.flags,
                });
            }
            if !r.raw_norm.is_finite()
                || r.raw_norm < 0.0
                || r.feature.iter().any(|x| !x.is_finite())
            {
                faults.push(Fault::NonFinite { index: i });
                continue;
            }
            let norm = r
                .feature
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            let bad = if r.zero_norm() {
                norm != 0.0 || r.raw_norm != 0.0
            } else if h.normalized {
                (norm - 1.0).abs() > NORM_TOLERANCE
            } else {
                (norm - r.raw_norm as f64).abs() > NORM_TOLERANCE * (1.0 + norm)
            };
            if bad {
                faults.push(Fault::Norm { index: i, norm });
            }
        }
        faults
    }

    /// One JSON object per record.
    pub fn dump_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in self.scan() {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    Truncated {
        expected: u64,
        actual: u64,
    },
    TrailingBytes {
        expected: u64,
        actual: u64,
    },
    PartialRecord,
    WrongEpoch {
        index: usize,
        expected: u32,
        got: u32,
    },
    Unsorted {
        index: usize,
    },
    IdSequence {
        index: usize,
    },
    UnknownFlags {
        index: usize,
        flags: u32,
    },
    NonFinite {
        index: usize,
    },
    Norm {
        index: usize,
        norm: f64,
    },
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<[u8; 32]> {
    let path = path.as_ref();
    Ok(Sha256::digest(fs::read(path).map_err(io(path))?).into())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LESSCKPT";

/// Checkpoint container:
/// `magic | version u32 | count u32 |` then per checkpoint
/// `epoch u32 | avg_lr f64 | t u64 | segments u32 | (name_len u16, name, offset u64, len u64)* |
/// P u64 | P x f64 params | M u64 | M x f64 m | M x f64 v`.
pub fn encode_checkpoints(checkpoints: &[Checkpoint]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(checkpoints.len() as u32).to_le_bytes());
    for c in checkpoints {
        b.extend_from_slice(&(c.epoch as u32).to_le_bytes());
        b.extend_from_slice(&c.avg_lr.to_le_bytes());
        b.extend_from_slice(&c.adam.t.to_le_bytes());
        b.extend_from_slice(&(c.params.layout.len() as u32).to_le_bytes());
        for s in &c.params.layout {
            b.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            b.extend_from_slice(s.name.as_bytes());
            b.extend_from_slice(&(s.offset as u64).to_le_bytes());
            b.extend_from_slice(&(s.len as u64).to_le_bytes());
        }
        b.extend_from_slice(&(c.params.values.len() as u64).to_le_bytes());
        for x in &c.params.values {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(c.adam.m.len() as u64).to_le_bytes());
        for x in c.adam.m.iter().chain(&c.adam.v) {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

pub fn decode_checkpoints(bytes: &[u8]) -> Result<Vec<Checkpoint>> {
    let bad = |m: &str| StoreError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("magic"));
    }
    let mut r = Reader { b: bytes, pos: 8 };
    if r.u32() != VERSION {
        return Err(bad("version"));
    }
    let need = |r: &Reader, n: usize| {
        if r.pos + n > bytes.len() {
            Err(bad("truncated"))
        } else {
            Ok(())
        }
    };
    let count = r.u32();
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        need(&r, 24)?;
        let epoch = r.u32() as usize;
        let avg_lr = r.f64();
        let t = r.u64();
        need(&r, 4)?;
        let nseg = r.u32();
        let mut layout = Vec::with_capacity(nseg as usize);
        for _ in 0..nseg {
            need(&r, 2)?;
            let len = u16::from_le_bytes(r.take()) as usize;
            need(&r, len + 16)?;
            let name = String::from_utf8(bytes[r.pos..r.pos + len].to_vec())
                .map_err(|_| bad("segment name"))?;
            r.pos += len;
            let offset = r.u64() as usize;
            let len = r.u64() as usize;
            layout.push(Segment { name, offset, len });
        }
        need(&r, 8)?;
        let p = r.u64() as usize;
        need(&r, p.checked_mul(8).ok_or_else(|| bad("size"))?)?;
        let values = (0..p).map(|_| r.f64()).collect();
        need(&r, 8)?;
        let m_len = r.u64() as usize;
        need(&r, m_len.checked_mul(16).ok_or_else(|| bad("size"))?)?;
        let m = (0..m_len).map(|_| r.f64()).collect();
        let v = (0..m_len).map(|_| r.f64()).collect();
        let params = ParamVector { values, layout };
        params.check_layout().map_err(|e| bad(&e.to_string()))?;
        out.push(Checkpoint {
            epoch,
            params,
            adam: AdamState { m, v, t },
            avg_lr,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn write_checkpoints(path: impl AsRef<Path>, checkpoints: &[Checkpoint]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoints(checkpoints)).map_err(io(path))
}

pub fn read_checkpoints(path: impl AsRef<Path>) -> Result<Vec<Checkpoint>> {
    let path = path.as_ref();
    decode_checkpoints(&fs::read(path).map_err(io(path))?)
}
