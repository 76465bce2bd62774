// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bit-exact binary persistence for matrices, probability statistics,
//! corpus frequencies, regression fits, checkpoints and token corpora.
//!
//! Layout of every file (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "EMPROBE1"
//! kind     u8       0 matrix, 1 probstats, 2 corpusfreq, 3 fit, 4 checkpoint, 5 corpus
//! version  u16      currently 1
//! ndims    u64      number of dimension entries that follow
//! dims     ndims × u64
//! payload  f64 values (u64 for the integer kinds corpusfreq and corpus)
//! labels   u64 byte length, then that many bytes of UTF-8 (JSON), length 0 when absent
//! ```
//!
//! One record per file. Records are validated before writing and after
//! reading, so a malformed record never reaches disk or the caller.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::{CorpusGenerator, MicroCheckpoint, MicroConfig, ParamSet, SyntheticCorpus};
use crate::probe::EncodingFit;

pub const MAGIC: &[u8; 8] = b"EMPROBE1";
pub const VERSION: u16 = 1;

/// Relative tolerance on `sum(ProbStats::sum) == positions`.
pub const PROBSTATS_MASS_TOL: f64 = 1e-9;

/// A |V|×d real matrix with optional vocabulary metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    labels: Option<Vec<String>>,
    tied: bool,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        let m = Self {
            data,
            labels: None,
            tied: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Invariant(format!(
                "matrix data length {} != {rows}×{cols}",
                values.len()
            )));
        }
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows() {
            return Err(Error::Invariant(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_tied(mut self, tied: bool) -> Self {
        self.tied = tied;
        self
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.as_slice()[i * cols..(i + 1) * cols]
    }

    /// Row-major contiguous values.
    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("embedding matrix is kept in standard layout")
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Mutable access for in-crate edits; callers re-validate when needed.
    pub(crate) fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows() == 0 || self.cols() == 0 {
            return Err(Error::Invariant(format!(
                "matrix must be at least 1×1, got {}×{}",
                self.rows(),
                self.cols()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite matrix value at flat index {pos}"
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.rows() {
                return Err(Error::Invariant("label count != rows".into()));
            }
        }
        Ok(())
    }
}

/// Sufficient statistics of the averaged output distribution: the elementwise
/// sum of per-position distributions and the number of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStats {
    pub sum: Vec<f64>,
    pub positions: u64,
}

impl ProbStats {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            sum: vec![0.0; vocab_size],
            positions: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.sum.len()
    }

    /// Adds one per-position probability vector.
    pub fn add(&mut self, dist: &[f64]) {
        debug_assert_eq!(dist.len(), self.sum.len());
        for (s, p) in self.sum.iter_mut().zip(dist) {
            *s += p;
        }
        self.positions += 1;
    }

    pub fn merge(&mut self, other: &ProbStats) -> Result<()> {
        if other.vocab_size() != self.vocab_size() {
            return Err(Error::Shape(format!(
                "cannot merge probstats of vocab {} into {}",
                other.vocab_size(),
                self.vocab_size()
            )));
        }
        for (s, o) in self.sum.iter_mut().zip(&other.sum) {
            *s += o;
        }
        self.positions += other.positions;
        Ok(())
    }

    /// Checks the finalized-record invariants.
    pub fn validate(&self) -> Result<()> {
        if self.sum.is_empty() {
            return Err(Error::Invariant("probstats vocab size is 0".into()));
        }
        if self.positions == 0 {
            return Err(Error::Invariant("probstats has zero positions".into()));
        }
        if let Some(i) = self.sum.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invariant(format!(
                "probstats sum[{i}] = {} is negative or non-finite",
                self.sum[i]
            )));
        }
        let total: f64 = self.sum.iter().sum();
        let n = self.positions as f64;
        if (total - n).abs() > PROBSTATS_MASS_TOL * n {
            return Err(Error::Invariant(format!(
                "probstats mass {total} differs from positions {n}"
            )));
        }
        Ok(())
    }
}

/// Token counts of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFreq {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CorpusFreq {
    pub fn from_tokens(vocab_size: usize, tokens: &[u32]) -> Result<Self> {
        let mut counts = vec![0u64; vocab_size];
        for &t in tokens {
            let t = t as usize;
            if t >= vocab_size {
                return Err(Error::OutOfRange {
                    index: t,
                    len: vocab_size,
                });
            }
            counts[t] += 1;
        }
        let f = Self {
            total: tokens.len() as u64,
            counts,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    /// Relative frequencies `count / total`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::Invariant("corpus frequency total is 0".into()));
        }
        let sum: u64 = self.counts.iter().sum();
        if sum != self.total {
            return Err(Error::Invariant(format!(
                "corpus counts sum to {sum}, total says {}",
                self.total
            )));
        }
        Ok(())
    }
}

/// Record kinds as stored in the header byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    Matrix = 0,
    ProbStats = 1,
    CorpusFreq = 2,
    Fit = 3,
    Checkpoint = 4,
    Corpus = 5,
}

impl RecordKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Matrix,
            1 => Self::ProbStats,
            2 => Self::CorpusFreq,
            3 => Self::Fit,
            4 => Self::Checkpoint,
            5 => Self::Corpus,
            other => return Err(Error::UnknownKind(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Matrix => "matrix",
            Self::ProbStats => "probstats",
            Self::CorpusFreq => "corpusfreq",
            Self::Fit => "fit",
            Self::Checkpoint => "checkpoint",
            Self::Corpus => "corpus",
        }
    }
}

/// Any record the store can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Matrix(EmbeddingMatrix),
    ProbStats(ProbStats),
    CorpusFreq(CorpusFreq),
    Fit(EncodingFit),
    Checkpoint(MicroCheckpoint),
    Corpus(SyntheticCorpus),
}

macro_rules! into_variant {
    ($fn_name:ident, $variant:ident, $ty:ty, $label:literal) => {
        pub fn $fn_name(self) -> Result<$ty> {
            match self {
                Record::$variant(v) => Ok(v),
                other => Err(Error::WrongKind {
                    expected: $label,
                    found: other.kind().name(),
                }),
            }
        }
    };
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Matrix(_) => RecordKind::Matrix,
            Record::ProbStats(_) => RecordKind::ProbStats,
            Record::CorpusFreq(_) => RecordKind::CorpusFreq,
            Record::Fit(_) => RecordKind::Fit,
            Record::Checkpoint(_) => RecordKind::Checkpoint,
            Record::Corpus(_) => RecordKind::Corpus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Record::Matrix(m) => m.validate(),
            Record::ProbStats(p) => p.validate(),
            Record::CorpusFreq(f) => f.validate(),
            Record::Fit(f) => f.validate(),
            Record::Checkpoint(c) => c.validate(),
            Record::Corpus(c) => c.validate(),
        }
    }

    into_variant!(into_matrix, Matrix, EmbeddingMatrix, "matrix");
    into_variant!(into_probstats, ProbStats, ProbStats, "probstats");
    into_variant!(into_corpus_freq, CorpusFreq, CorpusFreq, "corpusfreq");
    into_variant!(into_fit, Fit, EncodingFit, "fit");
    into_variant!(into_checkpoint, Checkpoint, MicroCheckpoint, "checkpoint");
    into_variant!(into_corpus, Corpus, SyntheticCorpus, "corpus");
}

impl From<EmbeddingMatrix> for Record {
    fn from(v: EmbeddingMatrix) -> Self {
        Record::Matrix(v)
    }
}
impl From<ProbStats> for Record {
    fn from(v: ProbStats) -> Self {
        Record::ProbStats(v)
    }
}
impl From<CorpusFreq> for Record {
    fn from(v: CorpusFreq) -> Self {
        Record::CorpusFreq(v)
    }
}
impl From<EncodingFit> for Record {
    fn from(v: EncodingFit) -> Self {
        Record::Fit(v)
    }
}
impl From<MicroCheckpoint> for Record {
    fn from(v: MicroCheckpoint) -> Self {
        Record::Checkpoint(v)
    }
}
impl From<SyntheticCorpus> for Record {
    fn from(v: SyntheticCorpus) -> Self {
        Record::Corpus(v)
    }
}

#[derive(Serialize, Deserialize)]
struct FitLabels {
    floor: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLabels {
    config: MicroConfig,
    tensors: Vec<String>,
    rng_state: Vec<u8>,
    meta: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLabels {
    generator: CorpusGenerator,
    zipf_exponent: f64,
    seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: RecordKind, dims: &[u64]) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(MAGIC);
        buf.push(kind as u8);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(dims.len() as u64).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        Self { buf }
    }

    fn f64s(&mut self, values: &[f64]) {
        self.buf.reserve(values.len() * 8);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u64s(&mut self, values: impl IntoIterator<Item = u64>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn labels(mut self, text: Option<String>) -> Vec<u8> {
        let bytes = text.map(String::into_bytes).unwrap_or_default();
        self.buf
            .extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(&bytes);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Truncated(format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Truncated(format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn labels(&mut self) -> Result<Option<String>> {
        let n = self.u64("label length")? as usize;
        if n == 0 {
            return Ok(None);
        }
        let b = self.take(n, "label block")?;
        String::from_utf8(b.to_vec())
            .map(Some)
            .map_err(|_| Error::Invariant("label block is not UTF-8".into()))
    }
}

fn dim(dims: &[u64], i: usize, kind: RecordKind) -> Result<usize> {
    dims.get(i)
        .map(|&d| d as usize)
        .ok_or_else(|| Error::Truncated(format!("{} header needs dimension {i}", kind.name())))
}

fn json_labels<T: serde::de::DeserializeOwned>(text: Option<String>, what: &str) -> Result<T> {
    let text = text.ok_or_else(|| Error::Truncated(format!("{what} label block missing")))?;
    serde_json::from_str(&text).map_err(|e| Error::Invariant(format!("{what} labels: {e}")))
}

/// Serializes a record after checking its invariants.
pub fn encode(record: &Record) -> Result<Vec<u8>> {
    record.validate()?;
    let bytes = match record {
        Record::Matrix(m) => {
            let mut w = Writer::header(
                RecordKind::Matrix,
                &[m.rows() as u64, m.cols() as u64, m.tied() as u64],
            );
            w.f64s(m.as_slice());
            let labels = m
                .labels()
                .map(|l| serde_json::to_string(l).expect("labels serialize"));
            w.labels(labels)
        }
        Record::ProbStats(p) => {
            let mut w = Writer::header(
                RecordKind::ProbStats,
                &[p.vocab_size() as u64, p.positions],
            );
            w.f64s(&p.sum);
            w.labels(None)
        }
        Record::CorpusFreq(f) => {
            let mut w = Writer::header(RecordKind::CorpusFreq, &[f.vocab_size() as u64, f.total]);
            w.u64s(f.counts.iter().copied());
            w.labels(None)
        }
        Record::Fit(f) => {
            let d = f.direction.len();
            let mut w = Writer::header(RecordKind::Fit, &[d as u64, f.dof as u64, f.n_obs as u64]);
            w.f64s(&f.direction);
            w.f64s(&f.p_values);
            w.f64s(&f.std_errors);
            w.f64s(&[
                f.intercept,
                f.intercept_p_value,
                f.r2,
                f.adj_r2,
                f.residual_variance,
            ]);
            let labels = FitLabels { floor: f.floor };
            w.labels(Some(serde_json::to_string(&labels).expect("fit labels")))
        }
        Record::Checkpoint(c) => {
            let params = &c.params;
            let mut dims = vec![c.step as u64, params.len() as u64];
            for (_, rows, cols) in params.shapes() {
                dims.push(rows as u64);
                dims.push(cols as u64);
            }
            let mut w = Writer::header(RecordKind::Checkpoint, &dims);
            w.f64s(params.flat());
            let labels = CheckpointLabels {
                config: c.config.clone(),
                tensors: params.names().map(str::to_owned).collect(),
                rng_state: c.rng_state.clone(),
                meta: c.meta.clone(),
            };
            w.labels(Some(serde_json::to_string(&labels).expect("checkpoint labels")))
        }
        Record::Corpus(c) => {
            let mut w = Writer::header(
                RecordKind::Corpus,
                &[c.vocab_size as u64, c.tokens.len() as u64],
            );
            w.u64s(c.tokens.iter().map(|&t| t as u64));
            let labels = CorpusLabels {
                generator: c.generator.clone(),
                zipf_exponent: c.zipf_exponent,
                seed: c.seed,
            };
            w.labels(Some(serde_json::to_string(&labels).expect("corpus labels")))
        }
    };
    Ok(bytes)
}

/// Parses a record and checks its invariants.
pub fn decode(bytes: &[u8]) -> Result<Record> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::NotAStoreFile);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let kind = RecordKind::from_byte(r.take(1, "kind")?[0])?;
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let ndims = r.u64("ndims")? as usize;
    if ndims > (bytes.len() - r.pos) / 8 {
        return Err(Error::Truncated("dimension header".into()));
    }
    let dims = r.u64s(ndims, "dims")?;

    let record = match kind {
        RecordKind::Matrix => {
            let rows = dim(&dims, 0, kind)?;
            let cols = dim(&dims, 1, kind)?;
            let tied = dim(&dims, 2, kind)? != 0;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Truncated("matrix size overflows".into()))?;
            let values = r.f64s(n, "matrix payload")?;
            let labels: Option<Vec<String>> = match r.labels()? {
                Some(t) => Some(
                    serde_json::from_str(&t)
                        .map_err(|e| Error::Invariant(format!("matrix labels: {e}")))?,
                ),
                None => None,
            };
            let mut m = EmbeddingMatrix::from_vec(rows, cols, values)?.with_tied(tied);
            if let Some(l) = labels {
                m = m.with_labels(l)?;
            }
            Record::Matrix(m)
        }
        RecordKind::ProbStats => {
            let vocab = dim(&dims, 0, kind)?;
            let positions = dims.get(1).copied().unwrap_or(0);
            let sum = r.f64s(vocab, "probstats payload")?;
            r.labels()?;
            Record::ProbStats(ProbStats { sum, positions })
        }
        RecordKind::CorpusFreq => {
            let vocab = dim(&dims, 0, kind)?;
            let total = dims.get(1).copied().unwrap_or(0);
            let counts = r.u64s(vocab, "corpusfreq payload")?;
            r.labels()?;
            Record::CorpusFreq(CorpusFreq { counts, total })
        }
        RecordKind::Fit => {
            let d = dim(&dims, 0, kind)?;
            let dof = dim(&dims, 1, kind)?;
            let n_obs = dim(&dims, 2, kind)?;
            let direction = r.f64s(d, "fit direction")?;
            let p_values = r.f64s(d, "fit p-values")?;
            let std_errors = r.f64s(d, "fit standard errors")?;
            let tail = r.f64s(5, "fit scalars")?;
            let labels: FitLabels = json_labels(r.labels()?, "fit")?;
            Record::Fit(EncodingFit {
                direction,
                intercept: tail[0],
                p_values,
                std_errors,
                intercept_p_value: tail[1],
                r2: tail[2],
                adj_r2: tail[3],
                dof,
                n_obs,
                residual_variance: tail[4],
                floor: labels.floor,
            })
        }
        RecordKind::Checkpoint => {
            let step = dim(&dims, 0, kind)?;
            let n_tensors = dim(&dims, 1, kind)?;
            if dims.len() != 2 + 2 * n_tensors {
                return Err(Error::Truncated("checkpoint shape header".into()));
            }
            let shapes: Vec<(usize, usize)> = dims[2..]
                .chunks_exact(2)
                .map(|c| (c[0] as usize, c[1] as usize))
                .collect();
            let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
            let flat = r.f64s(total, "checkpoint payload")?;
            let labels: CheckpointLabels = json_labels(r.labels()?, "checkpoint")?;
            if labels.tensors.len() != n_tensors {
                return Err(Error::Invariant("checkpoint tensor names mismatch".into()));
            }
            let entries = labels
                .tensors
                .into_iter()
                .zip(shapes)
                .map(|(n, (r, c))| (n, r, c))
                .collect();
            let params = ParamSet::from_parts(entries, flat)?;
            Record::Checkpoint(MicroCheckpoint {
                config: labels.config,
                step,
                params,
                rng_state: labels.rng_state,
                meta: labels.meta,
            })
        }
        RecordKind::Corpus => {
            let vocab = dim(&dims, 0, kind)?;
            let len = dim(&dims, 1, kind)?;
            let raw = r.u64s(len, "corpus payload")?;
            let labels: CorpusLabels = json_labels(r.labels()?, "corpus")?;
            let tokens = raw
                .into_iter()
                .map(|t| {
                    u32::try_from(t).map_err(|_| Error::Invariant(format!("token {t} too large")))
                })
                .collect::<Result<Vec<u32>>>()?;
            Record::Corpus(SyntheticCorpus {
                vocab_size: vocab,
                tokens,
                zipf_exponent: labels.zipf_exponent,
                seed: labels.seed,
                generator: labels.generator,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Invariant(format!(
            "{} trailing bytes after record",
            bytes.len() - r.pos
        )));
    }
    record.validate()?;
    Ok(record)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_record(path: impl AsRef<Path>, record: &Record) -> Result<()> {
    let bytes = encode(record)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_matrix_round_trip() {
        let m = EmbeddingMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let back = decode(&encode(&m.clone().into()).unwrap())
            .unwrap()
            .into_matrix()
            .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn probstats_round_trip() {
        let p = ProbStats {
            sum: vec![0.5, 0.5],
            positions: 1,
        };
        let back = decode(&encode(&p.clone().into()).unwrap())
            .unwrap()
            .into_probstats()
            .unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn large_random_matrix_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..1000 * 64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let m = EmbeddingMatrix::from_vec(1000, 64, values.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_record(&path, &m.into()).unwrap();
        let back = read_record(&path).unwrap().into_matrix().unwrap();
        for (a, b) in back.as_slice().iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let err = decode(b"NOTSTORE\x00\x01\x00").unwrap_err();
        assert_eq!(err.to_string(), "not a store file");
    }

    #[test]
    fn zero_position_probstats_rejected_on_load() {
        // Hand-built bytes: writing would refuse this record.
        let mut w = Writer::header(RecordKind::ProbStats, &[2, 0]);
        w.f64s(&[0.0, 0.0]);
        let bytes = w.labels(None);
        assert!(matches!(decode(&bytes), Err(Error::Invariant(_))));
    }

    #[test]
    fn writer_refuses_malformed_records() {
        let p = ProbStats {
            sum: vec![0.2, 0.2],
            positions: 1,
        };
        assert!(encode(&p.into()).is_err());
        assert!(EmbeddingMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn header_errors() {
        let m = EmbeddingMatrix::new(array![[1.0]]).unwrap();
        let mut bytes = encode(&m.into()).unwrap();
        let good = bytes.clone();
        bytes[8] = 42;
        assert!(matches!(decode(&bytes), Err(Error::UnknownKind(42))));
        let mut bytes = good.clone();
        bytes[9] = 9;
        assert!(matches!(decode(&bytes), Err(Error::VersionMismatch { .. })));
        assert!(matches!(
            decode(&good[..good.len() - 12]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn fixed_layout_bytes() {
        let m = EmbeddingMatrix::new(array![[1.5]]).unwrap();
        let bytes = encode(&m.into()).unwrap();
        let mut expected = b"EMPROBE1".to_vec();
        expected.push(0);
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&3u64.to_le_bytes());
        for d in [1u64, 1, 0] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&0u64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn labels_and_tied_flag_survive() {
        let m = EmbeddingMatrix::new(array![[1.0], [2.0]])
            .unwrap()
            .with_labels(vec!["a\nb".into(), "ü".into()])
            .unwrap()
            .with_tied(true);
        let back = decode(&encode(&m.clone().into()).unwrap())
            .unwrap()
            .into_matrix()
            .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wrong_kind_accessor() {
        let p = ProbStats {
            sum: vec![1.0],
            positions: 1,
        };
        let err = Record::from(p).into_matrix().unwrap_err();
        assert!(matches!(err, Error::WrongKind { expected: "matrix", found: "probstats" }));
    }
}
