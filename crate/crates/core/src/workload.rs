//! Synthetic workloads and the `KVTR` binary trace format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     4 bytes  "KVTR"
//! version   u32      1
//! head_dim  u32
//! steps     u64
//! seed      u64
//! kind      u8       0 = gaussian, 1 = heavy-hitter, 2 = external
//! records   steps x (q, k, v), each head_dim f64
//! ```
//!
//! Records have a fixed stride of `24 * head_dim` bytes, so any step can be
//! read by seeking to `HEADER_LEN + index * stride`.
//!
//! Generators draw from ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`,
//! and normal variates come from `rand_distr::StandardNormal`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::types::Vector;

pub const MAGIC: [u8; 4] = *b"KVTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 4 + 8 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Gaussian,
    HeavyHitter,
    External,
}

impl TraceKind {
    pub fn tag(self) -> u8 {
        match self {
            TraceKind::Gaussian => 0,
            TraceKind::HeavyHitter => 1,
            TraceKind::External => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TraceKind::Gaussian),
            1 => Some(TraceKind::HeavyHitter),
            2 => Some(TraceKind::External),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub q: Vector,
    pub k: Vector,
    pub v: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub head_dim: usize,
    pub steps: Vec<StepRecord>,
    pub seed: u64,
    pub kind: TraceKind,
}

impl Trace {
    /// Wraps externally produced records, checking they share one dimension.
    pub fn from_records(head_dim: usize, steps: Vec<StepRecord>) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::ZeroHeadDim);
        }
        for s in &steps {
            for x in [&s.q, &s.k, &s.v] {
                x.check_dim(head_dim)?;
            }
        }
        Ok(Self {
            head_dim,
            steps,
            seed: 0,
            kind: TraceKind::External,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn normal_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::from_raw((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn check_shape(steps: usize, dim: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidTrace("step count must be positive".into()));
    }
    if dim == 0 {
        return Err(Error::ZeroHeadDim);
    }
    if u32::try_from(dim).is_err() {
        return Err(Error::InvalidTrace("head dimension exceeds u32".into()));
    }
    Ok(())
}

/// I.i.d. standard-normal queries, keys and values.
pub fn gen_gaussian(steps: usize, dim: usize, seed: u64) -> Result<Trace> {
    check_shape(steps, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..steps)
        .map(|_| StepRecord {
            q: normal_vector(&mut rng, dim),
            k: normal_vector(&mut rng, dim),
            v: normal_vector(&mut rng, dim),
        })
        .collect();
    Ok(Trace {
        head_dim: dim,
        steps,
        seed,
        kind: TraceKind::Gaussian,
    })
}

/// Gaussian trace with `n_hot` persistent attention magnets.
///
/// A unit direction `u` is drawn once. `n_hot` positions are sampled from the
/// first `max(n_hot, steps / 4)` steps and their keys get `gain * sqrt(d) * u`
/// added; every query gets `gain * u` added. The logit boost for a hot token
/// is therefore about `gain^2`. The base trace is the `gen_gaussian` trace
/// for the same seed, so `gain == 0` reproduces it exactly.
pub fn gen_heavy_hitter(
    steps: usize,
    dim: usize,
    n_hot: usize,
    gain: f64,
    seed: u64,
) -> Result<Trace> {
    check_shape(steps, dim)?;
    if n_hot > steps {
        return Err(Error::InvalidTrace(format!(
            "n_hot ({n_hot}) exceeds step count ({steps})"
        )));
    }
    if !gain.is_finite() || gain < 0.0 {
        return Err(Error::InvalidTrace(format!("gain must be finite and >= 0, got {gain}")));
    }
    let mut trace = gen_gaussian(steps, dim, seed)?;
    trace.kind = TraceKind::HeavyHitter;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let raw = normal_vector(&mut rng, dim);
    let norm = raw.norm();
    let direction: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let early = n_hot.max(steps / 4);
    let hot = sample(&mut rng, early, n_hot);

    let key_boost = gain * (dim as f64).sqrt();
    for pos in hot.iter() {
        let k = &trace.steps[pos].k;
        let boosted = k.iter().zip(&direction).map(|(x, u)| x + key_boost * u).collect();
        trace.steps[pos].k = Vector::from_raw(boosted);
    }
    for step in &mut trace.steps {
        let boosted = step.q.iter().zip(&direction).map(|(x, u)| x + gain * u).collect();
        step.q = Vector::from_raw(boosted);
    }
    Ok(trace)
}

/// Positions (0-based) that `gen_heavy_hitter` boosts for these arguments.
pub fn hot_positions(steps: usize, dim: usize, n_hot: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let _ = normal_vector(&mut rng, dim);
    let mut hot = sample(&mut rng, n_hot.max(steps / 4), n_hot).into_vec();
    hot.sort_unstable();
    hot
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("unknown trace kind tag {0}")]
    UnknownKind(u8),
    #[error("trace head dimension {actual} does not match expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("truncated record {index}")]
    Truncated { index: u64 },
    #[error("non-finite value in record {index}")]
    NonFinite { index: u64 },
    #[error("{0} unexpected trailing bytes after last record")]
    TrailingBytes(u64),
    #[error("record {index} out of range ({steps} records)")]
    OutOfRange { index: u64, steps: u64 },
    #[error(transparent)]
    Invalid(#[from] Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub head_dim: usize,
    pub steps: u64,
    pub seed: u64,
    pub kind: TraceKind,
}

impl TraceHeader {
    pub fn stride(&self) -> u64 {
        24 * self.head_dim as u64
    }
}

pub fn encode_trace<W: Write>(trace: &Trace, mut out: W) -> std::result::Result<(), TraceError> {
    let dim = u32::try_from(trace.head_dim)
        .map_err(|_| Error::InvalidTrace("head dimension exceeds u32".into()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&dim.to_le_bytes())?;
    out.write_all(&(trace.steps.len() as u64).to_le_bytes())?;
    out.write_all(&trace.seed.to_le_bytes())?;
    out.write_all(&[trace.kind.tag()])?;
    for step in &trace.steps {
        for x in [&step.q, &step.k, &step.v] {
            if x.dim() != trace.head_dim {
                return Err(TraceError::DimensionMismatch {
                    expected: trace.head_dim,
                    actual: x.dim(),
                });
            }
            for c in x.iter() {
                out.write_all(&c.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> std::result::Result<TraceHeader, TraceError> {
    let mut buf = [0u8; HEADER_LEN as usize];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TraceError::TruncatedHeader,
        _ => TraceError::Io(e),
    })?;
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let head_dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if head_dim == 0 {
        return Err(TraceError::Invalid(Error::ZeroHeadDim));
    }
    let steps = u64::from_le_bytes(buf[12..20].try_into().unwrap());
    let seed = u64::from_le_bytes(buf[20..28].try_into().unwrap());
    let kind = TraceKind::from_tag(buf[28]).ok_or(TraceError::UnknownKind(buf[28]))?;
    Ok(TraceHeader {
        head_dim,
        steps,
        seed,
        kind,
    })
}

fn read_record<R: Read>(
    input: &mut R,
    dim: usize,
    index: u64,
    buf: &mut [u8],
) -> std::result::Result<StepRecord, TraceError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TraceError::Truncated { index },
        _ => TraceError::Io(e),
    })?;
    let mut values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut next = || -> std::result::Result<Vector, TraceError> {
        let v: Vec<f64> = values.by_ref().take(dim).collect();
        Vector::new(v).map_err(|_| TraceError::NonFinite { index })
    };
    Ok(StepRecord {
        q: next()?,
        k: next()?,
        v: next()?,
    })
}

pub fn decode_trace<R: Read>(mut input: R) -> std::result::Result<Trace, TraceError> {
    let header = read_header(&mut input)?;
    let mut buf = vec![0u8; header.stride() as usize];
    let mut steps = Vec::new();
    for index in 0..header.steps {
        steps.push(read_record(&mut input, header.head_dim, index, &mut buf)?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TraceError::TrailingBytes(rest.len() as u64));
    }
    Ok(Trace {
        head_dim: header.head_dim,
        steps,
        seed: header.seed,
        kind: header.kind,
    })
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> std::result::Result<(), TraceError> {
    let file = File::create(path)?;
    encode_trace(trace, BufWriter::new(file))
}

pub fn read_trace(path: impl AsRef<Path>) -> std::result::Result<Trace, TraceError> {
    decode_trace(BufReader::new(File::open(path)?))
}

/// Reads a trace and checks its head dimension.
pub fn read_trace_with_dim(
    path: impl AsRef<Path>,
    expected: usize,
) -> std::result::Result<Trace, TraceError> {
    let trace = read_trace(path)?;
    if trace.head_dim != expected {
        return Err(TraceError::DimensionMismatch {
            expected,
            actual: trace.head_dim,
        });
    }
    Ok(trace)
}

/// Random access to individual records of a trace file.
pub struct TraceReader<R> {
    inner: R,
    header: TraceHeader,
    buf: Vec<u8>,
}

impl<R: Read + Seek> TraceReader<R> {
    pub fn new(mut inner: R) -> std::result::Result<Self, TraceError> {
        inner.seek(SeekFrom::Start(0))?;
        let header = read_header(&mut inner)?;
        let buf = vec![0u8; header.stride() as usize];
        Ok(Self { inner, header, buf })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn record(&mut self, index: u64) -> std::result::Result<StepRecord, TraceError> {
        if index >= self.header.steps {
            return Err(TraceError::OutOfRange {
                index,
                steps: self.header.steps,
            });
        }
        let offset = HEADER_LEN + index * self.header.stride();
        self.inner.seek(SeekFrom::Start(offset))?;
        read_record(&mut self.inner, self.header.head_dim, index, &mut self.buf)
    }
}
