//! Flat exact vector store over one full-dimension `f32` table.
//!
//! Rows are unit-normalized at ingest. A search at prefix dimension `m`
//! truncates the query and every candidate row to `m` coordinates and
//! renormalizes both, so squared L2 distance orders results exactly like
//! cosine similarity does: `‖q̂ − r̂‖² = 2 − 2 q̂·r̂`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{MvecError, Result};
use crate::math::norm;

pub const STORE_MAGIC: &[u8; 4] = b"MVST";
pub const STORE_VERSION: u32 = 1;

const BYTES_PER_DIM: f64 = 4.0;
const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    id_set: HashSet<u64>,
}

/// Ordered by `(distance, id)`; the heap keeps the worst candidate on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f32,
    id: u64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

/// Dot product and squared norm of `row` against `query`, over
/// `query.len()` coordinates.
#[inline]
fn dot_and_sq_norm(query: &[f32], row: &[f32]) -> (f32, f32) {
    const LANES: usize = 8;
    let mut dot = [0f32; LANES];
    let mut sq = [0f32; LANES];
    let q_chunks = query.chunks_exact(LANES);
    let r_chunks = row.chunks_exact(LANES);
    let (q_tail, r_tail) = (q_chunks.remainder(), r_chunks.remainder());
    for (q, r) in q_chunks.zip(r_chunks) {
        for l in 0..LANES {
            dot[l] += q[l] * r[l];
            sq[l] += r[l] * r[l];
        }
    }
    let mut d: f32 = dot.iter().sum();
    let mut s: f32 = sq.iter().sum();
    for (q, r) in q_tail.iter().zip(r_tail) {
        d += q * r;
        s += r * r;
    }
    (d, s)
}

/// Squared L2 distance between a unit query prefix and the renormalized
/// prefix of `row`. A zero prefix stays zero, giving distance 1.
#[inline]
pub fn prefix_distance(unit_query: &[f32], row: &[f32]) -> f32 {
    let (dot, sq) = dot_and_sq_norm(unit_query, row);
    if sq == 0.0 {
        return 1.0;
    }
    (2.0 - 2.0 * dot / sq.sqrt()).max(0.0)
}

/// `N · m · 4` bytes in MiB.
pub fn storage_mb(count: u64, dim: usize) -> f64 {
    count as f64 * dim as f64 * BYTES_PER_DIM / MIB
}

/// One stage of a coarse-to-fine search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunnelStage {
    pub dim: usize,
    pub candidates: usize,
}

impl VectorStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(MvecError::Config("store dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            id_set: HashSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, id: u64) -> bool {
        self.id_set.contains(&id)
    }

    pub fn reserve(&mut self, additional: usize) {
        self.ids.reserve(additional);
        self.data.reserve(additional * self.dim);
        self.id_set.reserve(additional);
    }

    /// Appends `embedding` normalized to unit length.
    pub fn ingest(&mut self, id: u64, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(MvecError::Dimension {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        let n = norm(embedding);
        if n == 0.0 || !n.is_finite() {
            return Err(MvecError::DegenerateInput(format!(
                "embedding for id {id} has norm {n}"
            )));
        }
        if !self.id_set.insert(id) {
            return Err(MvecError::Conflict(id));
        }
        self.ids.push(id);
        self.data.extend(embedding.iter().map(|x| (x / n) as f32));
        Ok(())
    }

    fn unit_query(&self, query: &[f64], m: usize) -> Result<Vec<f32>> {
        if query.len() != self.dim {
            return Err(MvecError::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        if m == 0 || m > self.dim {
            return Err(MvecError::PrefixRange { m, len: self.dim });
        }
        let q = &query[..m];
        let n = norm(q);
        if n == 0.0 || !n.is_finite() {
            return Err(MvecError::DegenerateInput(format!(
                "query prefix of length {m} has norm {n}"
            )));
        }
        Ok(q.iter().map(|x| (x / n) as f32).collect())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(MvecError::Bounds(format!(
                "k = {k} with {} stored vectors",
                self.len()
            )));
        }
        Ok(())
    }

    fn top_k_rows<I: Iterator<Item = usize>>(
        &self,
        unit_query: &[f32],
        rows: I,
        k: usize,
    ) -> Vec<Candidate> {
        let m = unit_query.len();
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for row in rows {
            let start = row * self.dim;
            let distance = prefix_distance(unit_query, &self.data[start..start + m]);
            let cand = Candidate {
                distance,
                id: self.ids[row],
                row,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(cand);
            }
        }
        heap.into_sorted_vec()
    }

    /// Exact top-`k` by squared L2 on renormalized `m`-prefixes, ascending
    /// by `(distance, id)`.
    pub fn search(&self, query: &[f64], m: usize, k: usize) -> Result<Vec<Neighbor>> {
        self.check_k(k)?;
        let q = self.unit_query(query, m)?;
        Ok(self
            .top_k_rows(&q, 0..self.len(), k)
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.distance,
            })
            .collect())
    }

    /// Prunes with the first stage over all rows, then rescores only the
    /// survivors at each larger dimension. Returns the final top `k`.
    pub fn funnel_search(
        &self,
        query: &[f64],
        stages: &[FunnelStage],
        k: usize,
    ) -> Result<Vec<Neighbor>> {
        self.check_k(k)?;
        validate_stages(stages, self.dim, k)?;
        let mut survivors: Vec<usize> = Vec::new();
        for (i, stage) in stages.iter().enumerate() {
            let q = self.unit_query(query, stage.dim)?;
            let keep = stage.candidates.min(self.len());
            let picked = if i == 0 {
                self.top_k_rows(&q, 0..self.len(), keep)
            } else {
                self.top_k_rows(&q, survivors.iter().copied(), keep.min(survivors.len()))
            };
            if i + 1 == stages.len() {
                return Ok(picked
                    .into_iter()
                    .take(k)
                    .map(|c| Neighbor {
                        id: c.id,
                        distance: c.distance,
                    })
                    .collect());
            }
            survivors = picked.into_iter().map(|c| c.row).collect();
        }
        unreachable!("stages validated non-empty")
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_u32::<LittleEndian>(STORE_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(
            u32::try_from(self.dim)
                .map_err(|_| MvecError::Format("dimension exceeds u32".into()))?,
        )?;
        for &id in &self.ids {
            w.write_u64::<LittleEndian>(id)?;
        }
        for &x in &self.data {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        crate::data::read_magic(&mut r, STORE_MAGIC, STORE_VERSION)?;
        let n = usize::try_from(r.read_u64::<LittleEndian>()?)
            .map_err(|_| MvecError::Format("row count exceeds address space".into()))?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 {
            return Err(MvecError::Format("zero dimension".into()));
        }
        let mut ids = vec![0u64; n];
        r.read_u64_into::<LittleEndian>(&mut ids)
            .map_err(|_| MvecError::Format("truncated id table".into()))?;
        let mut data = vec![0f32; n * dim];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| MvecError::Format("truncated vector payload".into()))?;
        let mut id_set = HashSet::with_capacity(n);
        for &id in &ids {
            if !id_set.insert(id) {
                return Err(MvecError::Format(format!("duplicate id {id}")));
            }
        }
        Ok(Self {
            dim,
            ids,
            data,
            id_set,
        })
    }

    /// Rows widened to `f64`, in storage order.
    pub fn rows_f64(&self) -> impl Iterator<Item = (u64, Vec<f64>)> + '_ {
        (0..self.len()).map(|i| {
            (
                self.ids[i],
                self.row(i).iter().map(|&x| f64::from(x)).collect(),
            )
        })
    }
}

pub fn validate_stages(stages: &[FunnelStage], dim: usize, k: usize) -> Result<()> {
    let bad = |msg: String| Err(MvecError::Config(format!("funnel stages: {msg}")));
    let Some(last) = stages.last() else {
        return bad("empty stage list".into());
    };
    if last.dim != dim {
        return bad(format!(
            "final stage dim {} must equal store dim {dim}",
            last.dim
        ));
    }
    if stages[0].dim == 0 {
        return bad("stage dim must be >= 1".into());
    }
    for w in stages.windows(2) {
        if w[0].dim >= w[1].dim {
            return bad(format!(
                "dims must increase: {} then {}",
                w[0].dim, w[1].dim
            ));
        }
        if w[0].candidates < w[1].candidates {
            return bad(format!(
                "candidate counts must not increase: {} then {}",
                w[0].candidates, w[1].candidates
            ));
        }
    }
    if last.candidates < k {
        return bad(format!(
            "final candidate count {} < k = {k}",
            last.candidates
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub storage_mb: f64,
    pub mean_query_ms: f64,
    pub delta_storage_pct: f64,
    pub delta_time_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Row count the storage column is computed for.
    pub storage_count: u64,
    /// Rows actually scanned by the timed queries.
    pub timed_count: usize,
    pub queries: usize,
    pub k: usize,
    pub machine: String,
    pub mode: &'static str,
    /// Descending dim.
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, dim: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.dim == dim)
    }

    /// CSV with `#` comment lines describing the run ahead of the header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# machine: {}", self.machine)?;
        writeln!(w, "# mode: {}", self.mode)?;
        writeln!(
            w,
            "# storage_count: {} timed_count: {} queries: {} k: {}",
            self.storage_count, self.timed_count, self.queries, self.k
        )?;
        self.write_table(&mut w)
    }

    /// Just the CSV header and rows.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "dim,storage_mb,mean_query_ms,delta_storage_pct,delta_time_pct"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.2},{:.2},{:.2},{:.2}",
                r.dim, r.storage_mb, r.mean_query_ms, r.delta_storage_pct, r.delta_time_pct
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Best-effort CPU description for report headers.
pub fn machine_description() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub k: usize,
    /// Untimed passes over the query set before measuring.
    pub warmup_rounds: usize,
    /// Row count used for the storage column; the store's own size if `None`.
    pub storage_count: Option<u64>,
}

/// Storage and mean single-query latency at each prefix dimension.
///
/// Only the scan and top-k selection are timed; queries run sequentially.
pub fn bench(
    store: &VectorStore,
    dims: &[usize],
    queries: &[Vec<f64>],
    opts: BenchOptions,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(MvecError::EmptyInput(
            "benchmark needs at least one query".into(),
        ));
    }
    store.check_k(opts.k)?;
    let mut dims = dims.to_vec();
    dims.sort_unstable_by(|a, b| b.cmp(a));
    dims.dedup();
    if let Some(&bad) = dims.iter().find(|&&m| m == 0 || m > store.dim()) {
        return Err(MvecError::PrefixRange {
            m: bad,
            len: store.dim(),
        });
    }
    let storage_count = opts.storage_count.unwrap_or(store.len() as u64);

    let mut timings = Vec::with_capacity(dims.len());
    for &m in &dims {
        let unit: Vec<Vec<f32>> = queries
            .iter()
            .map(|q| store.unit_query(q, m))
            .collect::<Result<_>>()?;
        let mut sink = 0usize;
        for _ in 0..opts.warmup_rounds {
            for q in &unit {
                sink ^= store.top_k_rows(q, 0..store.len(), opts.k)[0].row;
            }
        }
        let start = Instant::now();
        for q in &unit {
            sink ^= store.top_k_rows(q, 0..store.len(), opts.k)[0].row;
        }
        let elapsed = start.elapsed();
        std::hint::black_box(sink);
        timings.push(elapsed.as_secs_f64() * 1e3 / unit.len() as f64);
    }

    let max_storage = storage_mb(storage_count, dims[0]);
    let max_time = timings[0];
    let rows = dims
        .iter()
        .zip(&timings)
        .map(|(&dim, &ms)| {
            let s = storage_mb(storage_count, dim);
            BenchRow {
                dim,
                storage_mb: s,
                mean_query_ms: ms,
                delta_storage_pct: if max_storage > 0.0 {
                    100.0 * (1.0 - s / max_storage)
                } else {
                    0.0
                },
                delta_time_pct: if max_time > 0.0 {
                    100.0 * (1.0 - ms / max_time)
                } else {
                    0.0
                },
            }
        })
        .collect();
    Ok(BenchReport {
        storage_count,
        timed_count: store.len(),
        queries: queries.len(),
        k: opts.k,
        machine: machine_description(),
        mode: "query-time-renorm",
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Prng;

    fn two_axis_store() -> VectorStore {
        let mut s = VectorStore::new(2).unwrap();
        s.ingest(0, &[1.0, 0.0]).unwrap();
        s.ingest(1, &[0.0, 1.0]).unwrap();
        s
    }

    #[test]
    fn axis_examples() {
        let s = two_axis_store();
        let r = s.search(&[1.0, 0.0], 2, 1).unwrap();
        assert_eq!(
            r,
            vec![Neighbor {
                id: 0,
                distance: 0.0
            }]
        );
        let r = s.search(&[1.0, 0.0], 2, 2).unwrap();
        assert_eq!(r[1].id, 1);
        assert!((r[1].distance - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ingest_errors() {
        let mut s = two_axis_store();
        assert!(matches!(
            s.ingest(0, &[1.0, 1.0]),
            Err(MvecError::Conflict(0))
        ));
        assert!(matches!(
            s.ingest(5, &[1.0]),
            Err(MvecError::Dimension { .. })
        ));
        assert!(matches!(
            s.ingest(5, &[0.0, 0.0]),
            Err(MvecError::DegenerateInput(_))
        ));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn search_errors() {
        let s = two_axis_store();
        assert!(matches!(
            s.search(&[1.0, 0.0], 2, 3),
            Err(MvecError::Bounds(_))
        ));
        assert!(matches!(
            s.search(&[1.0, 0.0], 3, 1),
            Err(MvecError::PrefixRange { .. })
        ));
        assert!(matches!(
            s.search(&[0.0, 1.0], 1, 1),
            Err(MvecError::DegenerateInput(_))
        ));
    }

    #[test]
    fn self_retrieval_and_unit_rows() {
        let mut rng = Prng::new(4);
        let mut s = VectorStore::new(24).unwrap();
        let vecs: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..24).map(|_| rng.normal() * 3.0).collect())
            .collect();
        for (i, v) in vecs.iter().enumerate() {
            s.ingest(i as u64, v).unwrap();
        }
        for i in 0..s.len() {
            let n: f32 = s.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for i in [0usize, 17, 999] {
            let r = s.search(&vecs[i], 24, 1).unwrap();
            assert_eq!(r[0].id, i as u64);
            assert!(r[0].distance.abs() < 1e-6);
        }
    }

    #[test]
    fn zero_prefix_row_has_distance_one() {
        let mut s = VectorStore::new(3).unwrap();
        s.ingest(9, &[0.0, 0.0, 1.0]).unwrap();
        let r = s.search(&[1.0, 0.0, 0.0], 2, 1).unwrap();
        assert_eq!(r[0].distance, 1.0);
    }

    #[test]
    fn ties_broken_by_smaller_id() {
        let mut s = VectorStore::new(2).unwrap();
        for id in [7u64, 3, 5] {
            s.ingest(id, &[1.0, 1.0]).unwrap();
        }
        let ids: Vec<u64> = s
            .search(&[1.0, 1.0], 2, 3)
            .unwrap()
            .iter()
            .map(|n| n.id)
            .collect();
        assert_eq!(ids, vec![3, 5, 7]);
    }

    #[test]
    fn stage_validation() {
        let st = |v: &[(usize, usize)]| -> Vec<FunnelStage> {
            v.iter()
                .map(|&(dim, candidates)| FunnelStage { dim, candidates })
                .collect()
        };
        assert!(validate_stages(&st(&[(8, 100), (16, 10)]), 16, 10).is_ok());
        assert!(validate_stages(&[], 16, 1).is_err());
        assert!(validate_stages(&st(&[(8, 100), (12, 10)]), 16, 1).is_err());
        assert!(validate_stages(&st(&[(8, 10), (16, 100)]), 16, 1).is_err());
        assert!(validate_stages(&st(&[(16, 100), (16, 10)]), 16, 1).is_err());
        assert!(validate_stages(&st(&[(8, 100), (16, 5)]), 16, 10).is_err());
    }

    #[test]
    fn degenerate_funnels_equal_search() {
        let mut rng = Prng::new(12);
        let mut s = VectorStore::new(16).unwrap();
        for i in 0..300u64 {
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            s.ingest(i, &v).unwrap();
        }
        let q: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let exact = s.search(&q, 16, 10).unwrap();
        let single = s
            .funnel_search(
                &q,
                &[FunnelStage {
                    dim: 16,
                    candidates: 300,
                }],
                10,
            )
            .unwrap();
        assert_eq!(single, exact);
        let two = s
            .funnel_search(
                &q,
                &[
                    FunnelStage {
                        dim: 8,
                        candidates: 300,
                    },
                    FunnelStage {
                        dim: 16,
                        candidates: 300,
                    },
                ],
                10,
            )
            .unwrap();
        assert_eq!(two, exact);
    }

    #[test]
    fn storage_formula_at_unit_count() {
        assert_eq!(storage_mb(1, 256), 256.0 * 4.0 / 1_048_576.0);
        assert_eq!(format!("{:.2}", storage_mb(10_000_000, 256)), "9765.62");
        assert_eq!(format!("{:.2}", storage_mb(10_000_000, 8)), "305.18");
    }

    #[test]
    fn store_file_round_trip() {
        let s = two_axis_store();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MVST");
        // magic + version + N + d + 2 ids + 4 floats
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 16 + 16);
        assert_eq!(VectorStore::read(buf.as_slice()).unwrap(), s);
        assert!(matches!(
            VectorStore::read(&buf[..buf.len() - 1]),
            Err(MvecError::Format(_))
        ));
        let mut wrong = buf.clone();
        wrong[4] = 9;
        assert!(matches!(
            VectorStore::read(wrong.as_slice()),
            Err(MvecError::Format(_))
        ));
    }

    #[test]
    fn bench_rows_descending_with_deltas() {
        let mut rng = Prng::new(2);
        let mut s = VectorStore::new(16).unwrap();
        for i in 0..200u64 {
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            s.ingest(i, &v).unwrap();
        }
        let queries: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..16).map(|_| rng.normal()).collect())
            .collect();
        let opts = BenchOptions {
            k: 3,
            warmup_rounds: 1,
            storage_count: Some(10_000_000),
        };
        let report = bench(&s, &[4, 16, 8], &queries, opts).unwrap();
        let dims: Vec<usize> = report.rows.iter().map(|r| r.dim).collect();
        assert_eq!(dims, vec![16, 8, 4]);
        assert_eq!(report.rows[0].delta_storage_pct, 0.0);
        assert_eq!(report.rows[0].delta_time_pct, 0.0);
        assert!((report.rows[2].delta_storage_pct - 75.0).abs() < 1e-12);
        assert!(report
            .rows
            .windows(2)
            .all(|w| w[0].storage_mb > w[1].storage_mb));

        let mut buf = Vec::new();
        report.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("dim,storage_mb,mean_query_ms,delta_storage_pct,delta_time_pct\n16,")
        );
    }
}
