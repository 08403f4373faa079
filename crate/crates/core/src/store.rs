//! Embedding corpora: the FPE1 file format, standardization statistics,
//! seeded subsampling and query/reference ground truth.
//!
//! FPE1 layout (little-endian):
//!
//! ```text
//! "FPE1" | version u32 = 1 | dim u32 | count u64 | ids: count x u64 | payload: count x dim x f32
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const FPE1_MAGIC: &[u8; 4] = b"FPE1";
pub const FPE1_VERSION: u32 = 1;
pub const FPE1_HEADER_LEN: u64 = 20;

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f32 = 1e-6;

/// Dense row-major set of `dim`-dimensional vectors with stable row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub(crate) dim: usize,
    pub(crate) data: Vec<f32>,
    pub(crate) ids: Vec<u64>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        let m = EmbeddingMatrix { dim, data, ids };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix whose ids are the row indices.
    pub fn from_data(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let ids = (0..(data.len() / dim) as u64).collect();
        Self::new(dim, data, ids)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows have differing lengths".into()));
        }
        Self::from_data(dim, rows.concat())
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            data: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Shape("dim must be positive".into()));
        }
        if self.data.len() != self.ids.len() * self.dim {
            return Err(Error::Shape(format!(
                "data length {} != count {} x dim {}",
                self.data.len(),
                self.ids.len(),
                self.dim
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {} column {}",
                pos / self.dim,
                pos % self.dim
            )));
        }
        check_unique_ids(&self.ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn into_parts(self) -> (usize, Vec<f32>, Vec<u64>) {
        (self.dim, self.data, self.ids)
    }

    /// Rows at `indices`, in that order, keeping their ids.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.count() {
                return Err(Error::Range(format!(
                    "row {i} out of range for {} rows",
                    self.count()
                )));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i]);
        }
        Self::new(self.dim, data, ids)
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        EmbeddingMatrix {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            ids: self.ids[start..end].to_vec(),
        }
    }

    /// Same rows with ids replaced by `base, base + 1, ...`.
    pub fn with_sequential_ids(mut self, base: u64) -> Self {
        for (i, id) in self.ids.iter_mut().enumerate() {
            *id = base + i as u64;
        }
        self
    }

    /// Same ids with new values; the shape must match.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape("replacement data has a different length".into()));
        }
        Self::new(self.dim, data, self.ids.clone())
    }

    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let dim = parts
            .first()
            .map(|m| m.dim)
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for m in parts {
            if m.dim != dim {
                return Err(Error::Shape(format!("dim {} != {dim}", m.dim)));
            }
            data.extend_from_slice(&m.data);
            ids.extend_from_slice(&m.ids);
        }
        Self::new(dim, data, ids)
    }

    /// Projects every row onto the unit sphere. Zero rows are left as is.
    pub fn unit_normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        out
    }

    pub fn max_id(&self) -> Option<u64> {
        self.ids.iter().copied().max()
    }
}

fn check_unique_ids(ids: &[u64]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate row id {id}")));
        }
    }
    Ok(())
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    let mut writer = Fpe1Writer::create(
        path,
        m.dim,
        m.count() as u64,
        m.ids.iter().copied(),
    )?;
    writer.write_rows(&m.data)?;
    writer.finish()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut reader = Fpe1Reader::open(path)?;
    let count = reader.count() as usize;
    let dim = reader.dim();
    match reader.next_chunk(count.max(1))? {
        Some(m) => Ok(m),
        None => Ok(EmbeddingMatrix::empty(dim)),
    }
}

/// Incremental FPE1 writer. The file is removed unless [`Fpe1Writer::finish`]
/// succeeds, so failed writes never leave a partial file behind.
pub struct Fpe1Writer {
    path: PathBuf,
    out: Option<BufWriter<File>>,
    dim: usize,
    count: u64,
    written: u64,
    buf: Vec<u8>,
}

impl Fpe1Writer {
    /// Writes the header and the id block; `ids` must yield exactly `count`
    /// unique values.
    pub fn create(
        path: impl AsRef<Path>,
        dim: usize,
        count: u64,
        ids: impl IntoIterator<Item = u64>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Shape(format!("unsupported dim {dim}")));
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Fpe1Writer {
            path,
            out: Some(BufWriter::with_capacity(1 << 20, file)),
            dim,
            count,
            written: 0,
            buf: Vec::new(),
        };
        w.write_header(ids)?;
        Ok(w)
    }

    fn write_header(&mut self, ids: impl IntoIterator<Item = u64>) -> Result<()> {
        let mut head = Vec::with_capacity(FPE1_HEADER_LEN as usize);
        head.extend_from_slice(FPE1_MAGIC);
        head.extend_from_slice(&FPE1_VERSION.to_le_bytes());
        head.extend_from_slice(&(self.dim as u32).to_le_bytes());
        head.extend_from_slice(&self.count.to_le_bytes());
        self.put(&head)?;
        let mut n = 0u64;
        let mut chunk = Vec::with_capacity(8 * 4096);
        for id in ids {
            n += 1;
            chunk.extend_from_slice(&id.to_le_bytes());
            if chunk.len() >= 8 * 4096 {
                self.put(&chunk)?;
                chunk.clear();
            }
        }
        self.put(&chunk)?;
        if n != self.count {
            return Err(Error::Validation(format!(
                "header declares {} rows but {n} ids were supplied",
                self.count
            )));
        }
        Ok(())
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        let out = self
            .out
            .as_mut()
            .ok_or_else(|| Error::State("writer already closed".into()))?;
        out.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }

    /// Appends whole rows; `values.len()` must be a multiple of `dim`.
    pub fn write_rows(&mut self, values: &[f32]) -> Result<()> {
        if !values.len().is_multiple_of(self.dim) {
            return Err(Error::Shape("partial row".into()));
        }
        let rows = (values.len() / self.dim) as u64;
        if self.written + rows > self.count {
            return Err(Error::Range(format!(
                "writing {} rows would exceed the declared count {}",
                self.written + rows,
                self.count
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}",
                self.written + (pos / self.dim) as u64
            )));
        }
        let mut buf = std::mem::take(&mut self.buf);
        buf.clear();
        buf.reserve(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let res = self.put(&buf);
        self.buf = buf;
        res?;
        self.written += rows;
        Ok(())
    }

    pub fn rows_written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.count {
            return Err(Error::Validation(format!(
                "wrote {} of {} declared rows",
                self.written, self.count
            )));
        }
        let mut out = self.out.take().expect("writer open");
        out.flush().map_err(|e| Error::io(&self.path, e))?;
        out.get_ref().sync_all().map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

impl Drop for Fpe1Writer {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

/// Chunked FPE1 reader; ids are loaded eagerly, the payload on demand.
pub struct Fpe1Reader {
    path: PathBuf,
    input: BufReader<File>,
    dim: usize,
    ids: Vec<u64>,
    next_row: usize,
}

impl Fpe1Reader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut input = BufReader::with_capacity(1 << 20, file);

        if file_len < FPE1_HEADER_LEN {
            return Err(Error::Format(format!(
                "{}: file too short for an FPE1 header",
                path.display()
            )));
        }
        let mut head = [0u8; FPE1_HEADER_LEN as usize];
        input
            .read_exact(&mut head)
            .map_err(|e| Error::io(&path, e))?;
        if &head[0..4] != FPE1_MAGIC {
            return Err(Error::Format(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != FPE1_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
        if dim == 0 {
            return Err(Error::Format(format!("{}: dim is zero", path.display())));
        }
        let expected = count
            .checked_mul(8 + 4 * dim as u64)
            .and_then(|b| b.checked_add(FPE1_HEADER_LEN))
            .ok_or_else(|| Error::Format(format!("{}: header overflows", path.display())))?;
        if expected != file_len {
            return Err(Error::Length {
                expected,
                found: file_len,
            });
        }

        let mut raw = vec![0u8; count as usize * 8];
        input.read_exact(&mut raw).map_err(|e| Error::io(&path, e))?;
        let ids: Vec<u64> = raw
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        check_unique_ids(&ids)?;
        Ok(Fpe1Reader {
            path,
            input,
            dim,
            ids,
            next_row: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.ids.len() as u64
    }

    /// Reads up to `max_rows` further rows, or `None` once exhausted.
    pub fn next_chunk(&mut self, max_rows: usize) -> Result<Option<EmbeddingMatrix>> {
        let remaining = self.ids.len() - self.next_row;
        if remaining == 0 {
            return Ok(None);
        }
        let rows = remaining.min(max_rows.max(1));
        let mut raw = vec![0u8; rows * self.dim * 4];
        self.input
            .read_exact(&mut raw)
            .map_err(|e| Error::io(&self.path, e))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: non-finite value at row {}",
                self.path.display(),
                self.next_row + pos / self.dim
            )));
        }
        let ids = self.ids[self.next_row..self.next_row + rows].to_vec();
        self.next_row += rows;
        Ok(Some(EmbeddingMatrix {
            dim: self.dim,
            data,
            ids,
        }))
    }
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormStatsFile", into = "NormStatsFile")]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct NormStatsFile {
    dim: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl From<NormStats> for NormStatsFile {
    fn from(s: NormStats) -> Self {
        NormStatsFile {
            dim: s.mean.len(),
            mean: s.mean,
            std: s.std,
        }
    }
}

impl TryFrom<NormStatsFile> for NormStats {
    type Error = String;

    fn try_from(f: NormStatsFile) -> std::result::Result<Self, String> {
        let s = NormStats {
            mean: f.mean,
            std: f.std,
        };
        if s.mean.len() != f.dim || s.std.len() != f.dim {
            return Err(format!("stats vectors do not have length dim={}", f.dim));
        }
        s.check().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

impl NormStats {
    /// Zero mean, unit std.
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape("mean and std lengths differ".into()));
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite())
            || self.std.iter().any(|&s| s <= 0.0)
        {
            return Err(Error::Validation(
                "stats must be finite with positive std".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// `<dir>/<stem>.stats.json` next to an FPE1 file.
pub fn stats_sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.stats.json"))
}

/// Column means and population standard deviations (floored at [`STD_FLOOR`]).
pub fn compute_norm_stats(m: &EmbeddingMatrix) -> Result<NormStats> {
    let n = m.count();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let dim = m.dim;
    let mut sum = vec![0f64; dim];
    for row in m.rows() {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0f64; dim];
    for row in m.rows() {
        for ((s, &v), mu) in sq.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - mu;
            *s += d * d;
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&v| v as f32).collect(),
        std: sq
            .iter()
            .map(|s| ((s / n as f64).sqrt() as f32).max(STD_FLOOR))
            .collect(),
    })
}

fn check_stats_dim(m: &EmbeddingMatrix, s: &NormStats) -> Result<()> {
    if s.mean.len() != m.dim || s.std.len() != m.dim {
        return Err(Error::Shape(format!(
            "stats dim {} does not match matrix dim {}",
            s.mean.len(),
            m.dim
        )));
    }
    Ok(())
}

pub fn standardize(m: &EmbeddingMatrix, s: &NormStats) -> Result<EmbeddingMatrix> {
    check_stats_dim(m, s)?;
    let mut out = m.clone();
    standardize_in_place(&mut out.data, s);
    Ok(out)
}

pub fn destandardize(m: &EmbeddingMatrix, s: &NormStats) -> Result<EmbeddingMatrix> {
    check_stats_dim(m, s)?;
    let mut out = m.clone();
    destandardize_in_place(&mut out.data, s);
    Ok(out)
}

pub(crate) fn standardize_in_place(data: &mut [f32], s: &NormStats) {
    for row in data.chunks_exact_mut(s.dim()) {
        for ((v, mu), sd) in row.iter_mut().zip(&s.mean).zip(&s.std) {
            *v = (*v - mu) / sd;
        }
    }
}

pub(crate) fn destandardize_in_place(data: &mut [f32], s: &NormStats) {
    for row in data.chunks_exact_mut(s.dim()) {
        for ((v, mu), sd) in row.iter_mut().zip(&s.mean).zip(&s.std) {
            *v = *v * sd + mu;
        }
    }
}

/// `n` distinct rows chosen uniformly without replacement.
pub fn sample_rows(m: &EmbeddingMatrix, n: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if n > m.count() {
        return Err(Error::Range(format!(
            "cannot sample {n} rows from {}",
            m.count()
        )));
    }
    let mut rng = rng::seeded(seed);
    let picked = rand::seq::index::sample(&mut rng, m.count(), n).into_vec();
    m.select(&picked)
}

/// Queries plus the reference id each one should retrieve.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: EmbeddingMatrix,
    pub truth: BTreeMap<u64, u64>,
}

impl QuerySet {
    pub fn new(queries: EmbeddingMatrix, truth: BTreeMap<u64, u64>) -> Result<Self> {
        if truth.len() != queries.count() {
            return Err(Error::Validation(format!(
                "{} truth entries for {} queries",
                truth.len(),
                queries.count()
            )));
        }
        if let Some(id) = queries.ids().iter().find(|id| !truth.contains_key(id)) {
            return Err(Error::Validation(format!("query {id} has no truth entry")));
        }
        Ok(QuerySet { queries, truth })
    }

    /// Fails unless every truth target is a row of `refs`.
    pub fn check_targets(&self, refs: &EmbeddingMatrix) -> Result<()> {
        let present: HashSet<u64> = refs.ids().iter().copied().collect();
        match self.truth.values().find(|r| !present.contains(r)) {
            Some(r) => Err(Error::Validation(format!(
                "truth target {r} is not in the reference set"
            ))),
            None => Ok(()),
        }
    }
}
