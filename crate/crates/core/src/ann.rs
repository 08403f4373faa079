//! IVF-PQ approximate nearest-neighbour search: a k-means coarse quantizer,
//! product quantization of residuals and asymmetric-distance scanning, plus
//! the brute-force oracle it is measured against.
//!
//! Ties are broken by the lower row id everywhere.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_sq};
use crate::par::map_range;
use crate::rng::{self, derive_seed};
use crate::store::{EmbeddingMatrix, Fpe1Reader};

pub const PQ_CENTROIDS: usize = 256;
const MAGIC: &[u8; 4] = b"IVPQ";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 48 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    InnerProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfPqConfig {
    pub nlist: usize,
    pub m: usize,
    pub nbits: usize,
    pub nprobe: usize,
    pub metric: Metric,
    pub kmeans_iters: usize,
    /// k-means training is subsampled to this many rows per centroid.
    pub max_points_per_centroid: usize,
    pub train_seed: u64,
    /// Test hook: store raw vectors instead of PQ codes.
    pub exact_codes: bool,
}

impl Default for IvfPqConfig {
    fn default() -> Self {
        IvfPqConfig {
            nlist: 256,
            m: 16,
            nbits: 8,
            nprobe: 32,
            metric: Metric::L2,
            kmeans_iters: 25,
            max_points_per_centroid: 256,
            train_seed: 0,
            exact_codes: false,
        }
    }
}

impl IvfPqConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.nlist == 0 {
            return Err(Error::Config("nlist must be at least 1".into()));
        }
        if self.m == 0 || !dim.is_multiple_of(self.m) {
            return Err(Error::Config(format!("dim {dim} is not divisible by m = {}", self.m)));
        }
        if self.nbits != 8 {
            return Err(Error::Config(format!("nbits must be 8, got {}", self.nbits)));
        }
        if self.nprobe == 0 || self.nprobe > self.nlist {
            return Err(Error::Config(format!(
                "nprobe must lie in 1..={}, got {}",
                self.nlist, self.nprobe
            )));
        }
        if self.max_points_per_centroid == 0 {
            return Err(Error::Config("max_points_per_centroid must be positive".into()));
        }
        Ok(())
    }

    /// Rows required by `train_index`.
    pub fn training_floor(&self) -> usize {
        self.nlist.max(PQ_CENTROIDS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances after every assignment pass.
    pub inertia: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq(x, cen);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f32>) {
    let n = data.len() / dim;
    map_range(n, |i| nearest(&data[i * dim..(i + 1) * dim], centroids, dim))
        .into_iter()
        .unzip()
}

fn kmeans_pp(data: &[f32], dim: usize, k: usize, rng: &mut rng::Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = map_range(n, |i| l2_sq(row(i), row(first)) as f64);
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let newest = &centroids[start..];
        let updated: Vec<f64> = map_range(n, |i| l2_sq(row(i), newest) as f64);
        for (a, b) in d2.iter_mut().zip(updated) {
            if b < *a {
                *a = b;
            }
        }
    }
    centroids
}

pub(crate) fn kmeans_raw(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = if dim == 0 { 0 } else { data.len() / dim };
    if k == 0 || k > n {
        return Err(Error::Range(format!("k = {k} needs 1..={n} rows")));
    }
    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_pp(data, dim, k, &mut rng);
    let (mut assignments, mut dist) = assign(data, dim, &centroids);
    let mut inertia = vec![dist.iter().map(|&d| d as f64).sum::<f64>()];
    for _ in 0..iters {
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            let s = &mut sums[a * dim..(a + 1) * dim];
            for (acc, &v) in s.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *acc += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s * inv) as f32;
                }
            }
        }
        // Empty clusters take over the farthest member of the largest one.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
            if counts[largest] < 2 {
                break;
            }
            let lc = centroids[largest * dim..(largest + 1) * dim].to_vec();
            let far = (0..n)
                .filter(|&i| assignments[i] as usize == largest)
                .map(|i| (i, l2_sq(&data[i * dim..(i + 1) * dim], &lc)))
                .fold((usize::MAX, -1f32), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
            assignments[far] = c as u32;
            counts[largest] -= 1;
            counts[c] = 1;
        }
        let (next, next_dist) = assign(data, dim, &centroids);
        let changed = next != assignments;
        assignments = next;
        dist = next_dist;
        inertia.push(dist.iter().map(|&d| d as f64).sum());
        if !changed {
            break;
        }
    }
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("k-means centroids"));
    }
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        inertia,
    })
}

/// k-means++ initialisation followed by up to `iters` Lloyd iterations;
/// stops early once assignments are stable.
pub fn kmeans(data: &EmbeddingMatrix, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    kmeans_raw(data.data(), data.dim(), k, iters, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    /// Squared L2 distance, or the inner product under `Metric::InnerProduct`.
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub k: usize,
    pub query_ids: Vec<u64>,
    /// Best first: ascending distance, or descending inner product.
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Set for queries that received fewer than `k` results.
    pub truncated: Vec<bool>,
}

impl SearchResult {
    fn from_lists(k: usize, query_ids: Vec<u64>, neighbors: Vec<Vec<Neighbor>>) -> Self {
        let truncated = neighbors.iter().map(|n| n.len() < k).collect();
        SearchResult {
            k,
            query_ids,
            neighbors,
            truncated,
        }
    }

    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    pub fn top1(&self, q: usize) -> Option<u64> {
        self.neighbors[q].first().map(|n| n.id)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    key: f32,
    id: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` smallest `(key, id)` pairs.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, key: f32, id: u64) {
        let c = Candidate { key, id };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn finish(self, metric: Metric) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: match metric {
                    Metric::L2 => c.key,
                    Metric::InnerProduct => -c.key,
                },
            })
            .collect()
    }
}

#[inline]
fn sort_key(metric: Metric, a: &[f32], b: &[f32]) -> f32 {
    match metric {
        Metric::L2 => l2_sq(a, b),
        Metric::InnerProduct => -dot(a, b),
    }
}

/// Brute-force scan over `db`.
pub fn exact_search(db: &EmbeddingMatrix, queries: &EmbeddingMatrix, k: usize, metric: Metric) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::Range("k must be at least 1".into()));
    }
    if db.is_empty() {
        return Err(Error::State("database is empty".into()));
    }
    if db.dim() != queries.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != database dim {}",
            queries.dim(),
            db.dim()
        )));
    }
    let neighbors = map_range(queries.count(), |q| {
        let query = queries.row(q);
        let mut top = TopK::new(k);
        for (row, &id) in db.rows().zip(db.ids()) {
            top.push(sort_key(metric, query, row), id);
        }
        top.finish(metric)
    });
    Ok(SearchResult::from_lists(k, queries.ids().to_vec(), neighbors))
}

#[derive(Debug, Clone, Default, PartialEq)]
struct InvertedList {
    ids: Vec<u64>,
    /// `m` bytes per entry, or `dim` floats per entry in exact mode.
    codes: Vec<u8>,
    raw: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    config: IvfPqConfig,
    dim: usize,
    trained: bool,
    centroids: Vec<f32>,
    /// `m × 256 × dsub`.
    codebooks: Vec<f32>,
    lists: Vec<InvertedList>,
    ids: HashSet<u64>,
}

impl IvfPqIndex {
    /// Untrained index; `train` or `train_index` must run before `add`.
    pub fn new(config: IvfPqConfig, dim: usize) -> Result<Self> {
        config.validate(dim)?;
        Ok(IvfPqIndex {
            config,
            dim,
            trained: false,
            centroids: Vec::new(),
            codebooks: Vec::new(),
            lists: vec![InvertedList::default(); config.nlist],
            ids: HashSet::new(),
        })
    }

    pub fn config(&self) -> &IvfPqConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        let mut cfg = self.config;
        cfg.nprobe = nprobe;
        cfg.validate(self.dim)?;
        self.config = cfg;
        Ok(())
    }

    fn dsub(&self) -> usize {
        self.dim / self.config.m
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn codebook(&self, sub: usize) -> &[f32] {
        let len = PQ_CENTROIDS * self.dsub();
        &self.codebooks[sub * len..(sub + 1) * len]
    }

    fn coarse_assign(&self, x: &[f32]) -> usize {
        nearest(x, &self.centroids, self.dim).0 as usize
    }

    /// Learns the coarse centroids and residual codebooks; drops any stored
    /// vectors.
    pub fn train(&mut self, data: &EmbeddingMatrix) -> Result<()> {
        if data.dim() != self.dim {
            return Err(Error::Shape(format!("training dim {} != index dim {}", data.dim(), self.dim)));
        }
        let floor = self.config.training_floor();
        if data.count() < floor {
            return Err(Error::InsufficientData {
                needed: floor,
                got: data.count(),
            });
        }
        let cfg = self.config;
        let coarse_sample = subsample(data, cfg.nlist * cfg.max_points_per_centroid, derive_seed(cfg.train_seed, &[1]))?;
        let coarse = kmeans(&coarse_sample, cfg.nlist, cfg.kmeans_iters, derive_seed(cfg.train_seed, &[2]))?;
        self.centroids = coarse.centroids;

        let pq_sample = subsample(data, PQ_CENTROIDS * cfg.max_points_per_centroid, derive_seed(cfg.train_seed, &[3]))?;
        let residuals: Vec<Vec<f32>> = map_range(pq_sample.count(), |i| {
            let x = pq_sample.row(i);
            let c = self.coarse_assign(x);
            x.iter().zip(&self.centroids[c * self.dim..(c + 1) * self.dim]).map(|(a, b)| a - b).collect()
        });
        let dsub = self.dsub();
        let mut codebooks = Vec::with_capacity(cfg.m * PQ_CENTROIDS * dsub);
        for s in 0..cfg.m {
            let sub: Vec<f32> = residuals.iter().flat_map(|r| r[s * dsub..(s + 1) * dsub].iter().copied()).collect();
            let km = kmeans_raw(&sub, dsub, PQ_CENTROIDS, cfg.kmeans_iters, derive_seed(cfg.train_seed, &[4, s as u64]))?;
            codebooks.extend_from_slice(&km.centroids);
        }
        self.codebooks = codebooks;
        self.lists = vec![InvertedList::default(); cfg.nlist];
        self.ids.clear();
        self.trained = true;
        Ok(())
    }

    /// Coarse list and PQ code of one vector. Each byte is the exhaustively
    /// nearest codebook entry for its residual subvector.
    pub fn encode(&self, x: &[f32]) -> Result<(usize, Vec<u8>)> {
        self.require_trained()?;
        if x.len() != self.dim {
            return Err(Error::Shape(format!("vector has {} values, index dim {}", x.len(), self.dim)));
        }
        let list = self.coarse_assign(x);
        Ok((list, self.encode_residual(x, list)))
    }

    fn encode_residual(&self, x: &[f32], list: usize) -> Vec<u8> {
        let dsub = self.dsub();
        let c = &self.centroids[list * self.dim..(list + 1) * self.dim];
        let r: Vec<f32> = x.iter().zip(c).map(|(a, b)| a - b).collect();
        (0..self.config.m)
            .map(|s| nearest(&r[s * dsub..(s + 1) * dsub], self.codebook(s), dsub).0 as u8)
            .collect()
    }

    /// Reconstruction `centroid[list] + codewords`.
    pub fn decode(&self, list: usize, code: &[u8]) -> Vec<f32> {
        let dsub = self.dsub();
        let mut out = self.centroids[list * self.dim..(list + 1) * self.dim].to_vec();
        for (s, &b) in code.iter().enumerate() {
            let cw = &self.codebook(s)[b as usize * dsub..(b as usize + 1) * dsub];
            for (o, v) in out[s * dsub..(s + 1) * dsub].iter_mut().zip(cw) {
                *o += v;
            }
        }
        out
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("index is not trained".into()))
        }
    }

    /// Appends vectors to their nearest inverted lists. Nothing is stored if
    /// any id is already present.
    pub fn add(&mut self, vectors: &EmbeddingMatrix) -> Result<()> {
        self.require_trained()?;
        if vectors.is_empty() {
            return Ok(());
        }
        if vectors.dim() != self.dim {
            return Err(Error::Shape(format!("vector dim {} != index dim {}", vectors.dim(), self.dim)));
        }
        let mut fresh = HashSet::with_capacity(vectors.count());
        for &id in vectors.ids() {
            if self.ids.contains(&id) || !fresh.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        let exact = self.config.exact_codes;
        let encoded: Vec<(usize, Vec<u8>)> = map_range(vectors.count(), |i| {
            let x = vectors.row(i);
            let list = self.coarse_assign(x);
            let code = if exact { Vec::new() } else { self.encode_residual(x, list) };
            (list, code)
        });
        for (i, (list, code)) in encoded.into_iter().enumerate() {
            let l = &mut self.lists[list];
            l.ids.push(vectors.ids()[i]);
            if exact {
                l.raw.extend_from_slice(vectors.row(i));
            } else {
                l.codes.extend_from_slice(&code);
            }
        }
        self.ids.extend(fresh);
        Ok(())
    }

    /// Streams an FPE1 file into the index in chunks of `chunk_rows`.
    pub fn add_from_file(&mut self, path: impl AsRef<Path>, chunk_rows: usize) -> Result<usize> {
        let mut reader = Fpe1Reader::open(path)?;
        let mut added = 0;
        while let Some(chunk) = reader.next_chunk(chunk_rows.max(1))? {
            self.add(&chunk)?;
            added += chunk.count();
        }
        Ok(added)
    }

    pub fn search(&self, queries: &EmbeddingMatrix, k: usize) -> Result<SearchResult> {
        self.search_with_nprobe(queries, k, self.config.nprobe)
    }

    pub fn search_with_nprobe(&self, queries: &EmbeddingMatrix, k: usize, nprobe: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::Range("k must be at least 1".into()));
        }
        self.require_trained()?;
        if nprobe == 0 || nprobe > self.config.nlist {
            return Err(Error::Range(format!("nprobe must lie in 1..={}", self.config.nlist)));
        }
        if queries.dim() != self.dim {
            return Err(Error::Shape(format!("query dim {} != index dim {}", queries.dim(), self.dim)));
        }
        let neighbors = map_range(queries.count(), |q| self.search_one(queries.row(q), k, nprobe));
        Ok(SearchResult::from_lists(k, queries.ids().to_vec(), neighbors))
    }

    fn search_one(&self, q: &[f32], k: usize, nprobe: usize) -> Vec<Neighbor> {
        let metric = self.config.metric;
        let dim = self.dim;
        let mut coarse: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(c, cen)| (sort_key(metric, q, cen), c))
            .collect();
        coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let m = self.config.m;
        let dsub = self.dsub();
        let mut top = TopK::new(k);
        let mut table = vec![0f32; m * PQ_CENTROIDS];
        let mut residual = vec![0f32; dim];
        for &(coarse_key, list) in &coarse[..nprobe] {
            let l = &self.lists[list];
            if l.ids.is_empty() {
                continue;
            }
            if self.config.exact_codes {
                for (row, &id) in l.raw.chunks_exact(dim).zip(&l.ids) {
                    top.push(sort_key(metric, q, row), id);
                }
                continue;
            }
            let cen = &self.centroids[list * dim..(list + 1) * dim];
            let base = match metric {
                Metric::L2 => {
                    for ((r, a), b) in residual.iter_mut().zip(q).zip(cen) {
                        *r = a - b;
                    }
                    0.0
                }
                Metric::InnerProduct => {
                    residual.copy_from_slice(q);
                    coarse_key
                }
            };
            for s in 0..m {
                let qs = &residual[s * dsub..(s + 1) * dsub];
                let cb = self.codebook(s);
                for (j, slot) in table[s * PQ_CENTROIDS..(s + 1) * PQ_CENTROIDS].iter_mut().enumerate() {
                    *slot = sort_key(metric, qs, &cb[j * dsub..(j + 1) * dsub]);
                }
            }
            for (code, &id) in l.codes.chunks_exact(m).zip(&l.ids) {
                let mut d = base;
                for (s, &b) in code.iter().enumerate() {
                    d += table[s * PQ_CENTROIDS + b as usize];
                }
                top.push(d, id);
            }
        }
        top.finish(metric)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Layout, all little-endian:
    ///
    /// ```text
    /// "IVPQ" | u32 version
    /// config: u32 dim, nlist, m, nbits, nprobe, metric, kmeans_iters,
    ///         max_points_per_centroid | u64 train_seed | u32 exact_codes | u32 trained
    /// offsets: u64 centroids, codebooks, lists, file length
    /// f32 centroids[nlist·dim] | f32 codebooks[m·256·dsub]
    /// u64 list lengths[nlist], then per list: u64 ids, then u8 codes[m]
    /// (or f32 vectors[dim] in exact mode) per entry
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.require_trained()?;
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.centroids.len() + self.codebooks.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.dim,
            c.nlist,
            c.m,
            c.nbits,
            c.nprobe,
            match c.metric {
                Metric::L2 => 0,
                Metric::InnerProduct => 1,
            },
            c.kmeans_iters,
            c.max_points_per_centroid,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.train_seed.to_le_bytes());
        out.extend_from_slice(&(c.exact_codes as u32).to_le_bytes());
        out.extend_from_slice(&(self.trained as u32).to_le_bytes());
        let centroids_off = HEADER_LEN as u64;
        let codebooks_off = centroids_off + 4 * self.centroids.len() as u64;
        let lists_off = codebooks_off + 4 * self.codebooks.len() as u64;
        let offsets_at = out.len();
        out.extend_from_slice(&[0u8; 32]);
        for v in self.centroids.iter().chain(&self.codebooks) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.lists {
            out.extend_from_slice(&(l.ids.len() as u64).to_le_bytes());
        }
        for l in &self.lists {
            for id in &l.ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
            if c.exact_codes {
                for v in &l.raw {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                out.extend_from_slice(&l.codes);
            }
        }
        let end = out.len() as u64;
        for (i, v) in [centroids_off, codebooks_off, lists_off, end].iter().enumerate() {
            out[offsets_at + 8 * i..offsets_at + 8 * (i + 1)].copy_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mut header = [0usize; 8];
        for h in header.iter_mut() {
            *h = cur.u32()? as usize;
        }
        let [dim, nlist, m, nbits, nprobe, metric, kmeans_iters, max_points_per_centroid] = header;
        let train_seed = cur.u64()?;
        let exact_codes = cur.u32()? != 0;
        let trained = cur.u32()? != 0;
        let metric = match metric {
            0 => Metric::L2,
            1 => Metric::InnerProduct,
            other => return Err(Error::Format(format!("unknown metric tag {other}"))),
        };
        let config = IvfPqConfig {
            nlist,
            m,
            nbits,
            nprobe,
            metric,
            kmeans_iters,
            max_points_per_centroid,
            train_seed,
            exact_codes,
        };
        config
            .validate(dim)
            .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
        if !trained {
            return Err(Error::Format("index file holds an untrained index".into()));
        }
        let offsets = [cur.u64()?, cur.u64()?, cur.u64()?, cur.u64()?];
        if offsets[3] != bytes.len() as u64 {
            return Err(Error::Format(format!(
                "file is {} bytes, header declares {}",
                bytes.len(),
                offsets[3]
            )));
        }
        let dsub = dim / m;
        if offsets[0] != HEADER_LEN as u64
            || offsets[1] != offsets[0] + 4 * (nlist * dim) as u64
            || offsets[2] != offsets[1] + 4 * (m * PQ_CENTROIDS * dsub) as u64
        {
            return Err(Error::Format("offset table disagrees with the config block".into()));
        }
        let centroids = cur.f32s(nlist * dim)?;
        let codebooks = cur.f32s(m * PQ_CENTROIDS * dsub)?;
        if centroids.iter().chain(&codebooks).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite centroid or codeword".into()));
        }
        let mut lens = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            lens.push(cur.u64()? as usize);
        }
        let mut lists = Vec::with_capacity(nlist);
        let mut ids = HashSet::new();
        for len in lens {
            let mut list = InvertedList::default();
            for _ in 0..len {
                let id = cur.u64()?;
                if !ids.insert(id) {
                    return Err(Error::Format(format!("duplicate id {id}")));
                }
                list.ids.push(id);
            }
            if exact_codes {
                list.raw = cur.f32s(len * dim)?;
            } else {
                list.codes = cur.take(len * m)?.to_vec();
            }
            lists.push(list);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after inverted lists".into()));
        }
        Ok(IvfPqIndex {
            config,
            dim,
            trained,
            centroids,
            codebooks,
            lists,
            ids,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated index at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn subsample(data: &EmbeddingMatrix, cap: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if data.count() <= cap {
        return Ok(data.clone());
    }
    let mut r = rng::seeded(seed);
    let mut idx = rand::seq::index::sample(&mut r, data.count(), cap).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

/// Trains an empty index on `training_data`.
pub fn train_index(config: IvfPqConfig, training_data: &EmbeddingMatrix) -> Result<IvfPqIndex> {
    let mut index = IvfPqIndex::new(config, training_data.dim())?;
    index.train(training_data)?;
    Ok(index)
}

pub fn serialize_index(index: &IvfPqIndex, path: impl AsRef<Path>) -> Result<()> {
    index.save(path)
}

pub fn deserialize_index(path: impl AsRef<Path>) -> Result<IvfPqIndex> {
    IvfPqIndex::load(path)
}

/// Fraction of queries whose approximate top-1 equals the exact top-1.
pub fn recall_at_1(approx: &SearchResult, exact: &SearchResult) -> Result<f64> {
    if approx.len() != exact.len() || approx.is_empty() {
        return Err(Error::Shape("result sets differ in query count".into()));
    }
    let hits = (0..approx.len())
        .filter(|&q| approx.top1(q).is_some() && approx.top1(q) == exact.top1(q))
        .count();
    Ok(hits as f64 / approx.len() as f64)
}
