//! Decile buckets over a scored corpus with cyclic streaming cursors.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::{stream_rng, Stream};
use crate::world::RunSegment;
use crate::{CoreError, Result};

pub const NUM_BUCKETS: usize = 10;
pub const DEFAULT_SHARD_SIZE: usize = 1000;

/// Eleven ascending boundaries; bucket `k` covers `(t_k, t_{k+1}]`, except
/// that bucket 0 also holds `t_0` itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileThresholds(Vec<f64>);

impl DecileThresholds {
    pub fn new(bounds: Vec<f64>) -> Result<Self> {
        if bounds.len() != NUM_BUCKETS + 1 || bounds.windows(2).any(|w| w[1] < w[0]) || bounds.iter().any(|b| !b.is_finite()) {
            return Err(CoreError::Invalid(format!("thresholds must be {} ascending finite values", NUM_BUCKETS + 1)));
        }
        Ok(Self(bounds))
    }

    pub fn bounds(&self) -> &[f64] {
        &self.0
    }

    /// Bucket for an out-of-sample score; values outside the range clamp
    /// to the end buckets.
    pub fn bucket_of(&self, score: f64) -> usize {
        (1..NUM_BUCKETS).find(|&k| score <= self.0[k]).map_or(NUM_BUCKETS - 1, |k| k - 1)
    }
}

/// Stable rank order: score, then id.
fn ranked(ids: &[String], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

fn rank_bucket(rank: usize, n: usize) -> usize {
    rank * NUM_BUCKETS / n
}

/// Order-statistic boundaries plus the rank split they induce (bucket sizes
/// within one of `N / 10` even under ties).
pub fn decile_split(ids: &[String], scores: &[f64]) -> Result<(DecileThresholds, Vec<usize>)> {
    let n = scores.len();
    if n < NUM_BUCKETS {
        return Err(CoreError::Invalid(format!("need at least {NUM_BUCKETS} scores, got {n}")));
    }
    if ids.len() != n {
        return Err(CoreError::Invalid(format!("{} ids for {n} scores", ids.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CoreError::Invalid(format!("non-finite score {s}")));
    }
    let order = ranked(ids, scores);
    let mut assign = vec![0; n];
    let mut bounds = vec![scores[order[0]]];
    for (r, &i) in order.iter().enumerate() {
        let b = rank_bucket(r, n);
        assign[i] = b;
        if r + 1 == n || rank_bucket(r + 1, n) != b {
            bounds.push(scores[i]);
        }
    }
    Ok((DecileThresholds::new(bounds)?, assign))
}

pub fn compute_decile_thresholds(ids: &[String], scores: &[f64]) -> Result<DecileThresholds> {
    Ok(decile_split(ids, scores)?.0)
}

/// Non-negative per-bucket sampling weights, not all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketWeights(Vec<f64>);

impl BucketWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(CoreError::Invalid(format!("invalid bucket weights {w:?}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut w = vec![0.0; n];
        w[k] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn normalized(&self) -> Vec<f64> {
        if self.0.windows(2).all(|w| w[0] == w[1]) {
            return vec![1.0 / self.0.len() as f64; self.0.len()];
        }
        let s: f64 = self.0.iter().sum();
        self.0.iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BucketRecord {
    pub id: String,
    pub score: f64,
    pub segment: Arc<RunSegment>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl BucketStats {
    pub fn of(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        Self {
            count: scores.len(),
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug)]
enum Shard {
    Memory(Arc<Vec<BucketRecord>>),
    Disk { path: PathBuf, len: usize },
}

impl Shard {
    fn len(&self) -> usize {
        match self {
            Shard::Memory(r) => r.len(),
            Shard::Disk { len, .. } => *len,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub shard: usize,
    pub offset: usize,
    /// Completed passes over the bucket.
    pub epoch: u64,
}

#[derive(Debug)]
struct Bucket {
    shards: Vec<Shard>,
    /// Position in `shards` for each pass slot; permuted when shuffling.
    shard_order: Vec<usize>,
    /// Records served per pass (a prefix of the bucket when restricted).
    limit: usize,
    served_in_pass: usize,
    cursor: Cursor,
    stats: BucketStats,
    reader: Option<(usize, BufReader<File>)>,
}

impl Bucket {
    fn total(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub counts: Vec<usize>,
    pub thresholds: DecileThresholds,
    pub stats: Vec<BucketStats>,
    pub shard_size: usize,
    pub shards: Vec<usize>,
    pub source_hash: String,
}

#[derive(Clone, Debug)]
pub struct Sampled {
    pub bucket: usize,
    pub record: BucketRecord,
}

/// Ten buckets with one streaming cursor each.
#[derive(Debug)]
pub struct BucketStore {
    buckets: Vec<Bucket>,
    thresholds: DecileThresholds,
    source_hash: String,
    shard_size: usize,
    shuffle_shards: bool,
    reads: u64,
}

fn build_bucket(shards: Vec<Shard>, stats: BucketStats) -> Bucket {
    let total: usize = shards.iter().map(Shard::len).sum();
    Bucket {
        shard_order: (0..shards.len()).collect(),
        shards,
        limit: total,
        served_in_pass: 0,
        cursor: Cursor::default(),
        stats,
        reader: None,
    }
}

fn shard_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("decile_{k:02}"))
}

fn shard_path(root: &Path, k: usize, s: usize) -> PathBuf {
    shard_dir(root, k).join(format!("shard_{s:05}"))
}

#[derive(Serialize, Deserialize)]
struct DiskRecord<'a> {
    id: std::borrow::Cow<'a, str>,
    score: f64,
    segment: std::borrow::Cow<'a, RunSegment>,
}

impl BucketStore {
    /// In-memory store. Within a bucket records keep corpus order, which
    /// makes any prefix an unbiased subsample of the bucket.
    pub fn in_memory(
        segments: &[Arc<RunSegment>],
        scores: &[f64],
        thresholds: DecileThresholds,
        assign: &[usize],
        shard_size: usize,
        source_hash: impl Into<String>,
    ) -> Result<Self> {
        if scores.len() != segments.len() || assign.len() != segments.len() {
            return Err(CoreError::Invalid("segments, scores and assignment lengths differ".into()));
        }
        let shard_size = shard_size.max(1);
        let mut per: Vec<Vec<BucketRecord>> = vec![Vec::new(); NUM_BUCKETS];
        for i in 0..segments.len() {
            per[assign[i]].push(BucketRecord { id: segments[i].id.clone(), score: scores[i], segment: segments[i].clone() });
        }
        let buckets = per
            .into_iter()
            .map(|recs| {
                let stats = BucketStats::of(&recs.iter().map(|r| r.score).collect::<Vec<_>>());
                let shards = recs.chunks(shard_size).map(|c| Shard::Memory(Arc::new(c.to_vec()))).collect();
                build_bucket(shards, stats)
            })
            .collect();
        Ok(Self { buckets, thresholds, source_hash: source_hash.into(), shard_size, shuffle_shards: false, reads: 0 })
    }

    /// Buckets a scored corpus with freshly computed thresholds.
    pub fn from_scores(segments: &[Arc<RunSegment>], scores: &[f64], shard_size: usize, source_hash: impl Into<String>) -> Result<Self> {
        let ids: Vec<String> = segments.iter().map(|s| s.id.clone()).collect();
        let (thr, assign) = decile_split(&ids, scores)?;
        Self::in_memory(segments, scores, thr, &assign, shard_size, source_hash)
    }

    /// Looks up each segment's score by id; every segment must be scored.
    pub fn bucketize(
        segments: &[Arc<RunSegment>],
        scores: &std::collections::HashMap<String, f64>,
        shard_size: usize,
        source_hash: impl Into<String>,
    ) -> Result<Self> {
        let s: Vec<f64> = segments
            .iter()
            .map(|seg| scores.get(&seg.id).copied().ok_or_else(|| CoreError::MissingScore(seg.id.clone())))
            .collect::<Result<_>>()?;
        Self::from_scores(segments, &s, shard_size, source_hash)
    }

    pub fn thresholds(&self) -> &DecileThresholds {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Bucket::total).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket_len(&self, k: usize) -> usize {
        self.buckets[k].limit
    }

    pub fn stats(&self) -> Vec<BucketStats> {
        self.buckets.iter().map(|b| b.stats).collect()
    }

    pub fn cursor(&self, k: usize) -> Cursor {
        self.buckets[k].cursor
    }

    /// Total records read through cursors so far.
    pub fn record_reads(&self) -> u64 {
        self.reads
    }

    pub fn set_shuffle_shards(&mut self, on: bool) {
        self.shuffle_shards = on;
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            counts: self.buckets.iter().map(Bucket::total).collect(),
            thresholds: self.thresholds.clone(),
            stats: self.stats(),
            shard_size: self.shard_size,
            shards: self.buckets.iter().map(|b| b.shards.len()).collect(),
            source_hash: self.source_hash.clone(),
        }
    }

    /// Serves only the first `ceil(fraction * size)` records of each bucket.
    pub fn restrict(&mut self, fraction: f64) -> Result<()> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::Invalid(format!("bucket fraction must be in (0, 1], got {fraction}")));
        }
        for b in &mut self.buckets {
            b.limit = ((b.total() as f64 * fraction).ceil() as usize).min(b.total());
            b.cursor = Cursor::default();
            b.served_in_pass = 0;
            b.reader = None;
        }
        Ok(())
    }

    /// Replaces the top bucket with its highest-scoring `fraction` of
    /// records (the top percentile of the corpus for `fraction = 0.1`).
    pub fn keep_top_of_last(&mut self, fraction: f64) -> Result<()> {
        let k = NUM_BUCKETS - 1;
        let mut recs = self.bucket_records(k)?;
        recs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| b.id.cmp(&a.id)));
        let keep = ((recs.len() as f64 * fraction).ceil() as usize).clamp(1, recs.len().max(1));
        recs.truncate(keep);
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        let stats = BucketStats::of(&recs.iter().map(|r| r.score).collect::<Vec<_>>());
        let shards = recs.chunks(self.shard_size).map(|c| Shard::Memory(Arc::new(c.to_vec()))).collect();
        self.buckets[k] = build_bucket(shards, stats);
        Ok(())
    }

    /// All records of bucket `k` in stream order; does not move the cursor.
    pub fn bucket_records(&self, k: usize) -> Result<Vec<BucketRecord>> {
        let mut out = Vec::with_capacity(self.buckets[k].total());
        for s in &self.buckets[k].shards {
            match s {
                Shard::Memory(r) => out.extend(r.iter().cloned()),
                Shard::Disk { path, .. } => {
                    let r = BufReader::new(File::open(path)?);
                    for line in r.lines() {
                        out.push(decode_record(path, &line?)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn next_record(&mut self, k: usize) -> Result<BucketRecord> {
        let shuffle = self.shuffle_shards;
        let b = &mut self.buckets[k];
        if b.limit == 0 {
            return Err(CoreError::EmptyBucket(k));
        }
        if b.served_in_pass == b.limit {
            b.cursor = Cursor { shard: 0, offset: 0, epoch: b.cursor.epoch + 1 };
            b.served_in_pass = 0;
            b.reader = None;
            if shuffle {
                let mut rng = stream_rng(Stream::Sampler, &[k as u64, b.cursor.epoch]);
                b.shard_order.shuffle(&mut rng);
            }
        }
        while b.cursor.offset >= b.shards[b.shard_order[b.cursor.shard]].len() {
            b.cursor.shard += 1;
            b.cursor.offset = 0;
            b.reader = None;
        }
        let si = b.shard_order[b.cursor.shard];
        let rec = match &b.shards[si] {
            Shard::Memory(r) => r[b.cursor.offset].clone(),
            Shard::Disk { path, .. } => {
                if b.reader.as_ref().map(|r| r.0) != Some(si) {
                    b.reader = Some((si, BufReader::new(File::open(path)?)));
                }
                let (_, reader) = b.reader.as_mut().expect("reader just opened");
                let mut line = String::new();
                if reader.read_line(&mut line)? == 0 {
                    return Err(CoreError::Corrupt { path: path.display().to_string(), detail: "shard shorter than manifest".into() });
                }
                decode_record(path, line.trim_end())?
            }
        };
        b.cursor.offset += 1;
        b.served_in_pass += 1;
        self.reads += 1;
        Ok(rec)
    }

    /// Draws `batch` bucket indices from the normalized weights and reads
    /// one record from each chosen bucket's stream.
    pub fn sample_batch(&mut self, weights: &BucketWeights, batch: usize, rng: &mut impl Rng) -> Result<Vec<Sampled>> {
        if weights.len() != NUM_BUCKETS {
            return Err(CoreError::Invalid(format!("expected {NUM_BUCKETS} weights, got {}", weights.len())));
        }
        let p = weights.normalized();
        for (k, &pk) in p.iter().enumerate() {
            if pk > 0.0 && self.buckets[k].limit == 0 {
                return Err(CoreError::EmptyBucket(k));
            }
        }
        let mut cdf = Vec::with_capacity(NUM_BUCKETS);
        let mut acc = 0.0;
        for &pk in &p {
            acc += pk;
            cdf.push(acc);
        }
        let last = p.iter().rposition(|&v| v > 0.0).expect("weights not all zero");
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.iter().position(|&c| u < c).unwrap_or(last);
            // Never land on a zero-weight bucket through rounding.
            let k = if p[k] > 0.0 { k } else { last };
            out.push(Sampled { bucket: k, record: self.next_record(k)? });
        }
        Ok(out)
    }

    /// Writes `decile_XX/shard_XXXXX` files and a `manifest` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for k in 0..NUM_BUCKETS {
            let recs = self.bucket_records(k)?;
            fs::create_dir_all(shard_dir(root, k))?;
            for (s, chunk) in recs.chunks(self.shard_size).enumerate() {
                let mut w = BufWriter::new(File::create(shard_path(root, k, s))?);
                for r in chunk {
                    let d = DiskRecord { id: (&r.id).into(), score: r.score, segment: std::borrow::Cow::Borrowed(&r.segment) };
                    serde_json::to_writer(&mut w, &d)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
        }
        let m = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(root.join("manifest"), m + "\n")?;
        Ok(())
    }

    /// Opens a written store; records stay on disk and stream through the
    /// cursors.
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest");
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| CoreError::Corrupt {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        if m.counts.len() != NUM_BUCKETS || m.shards.len() != NUM_BUCKETS || m.stats.len() != NUM_BUCKETS {
            return Err(CoreError::Corrupt { path: mpath.display().to_string(), detail: "wrong bucket count".into() });
        }
        let mut buckets = Vec::with_capacity(NUM_BUCKETS);
        for k in 0..NUM_BUCKETS {
            let shards = (0..m.shards[k])
                .map(|s| {
                    let len = if s + 1 < m.shards[k] { m.shard_size } else { m.counts[k] - s * m.shard_size };
                    Shard::Disk { path: shard_path(root, k, s), len }
                })
                .collect();
            buckets.push(build_bucket(shards, m.stats[k]));
        }
        Ok(Self {
            buckets,
            thresholds: m.thresholds,
            source_hash: m.source_hash,
            shard_size: m.shard_size,
            shuffle_shards: false,
            reads: 0,
        })
    }
}

fn decode_record(path: &Path, line: &str) -> Result<BucketRecord> {
    let d: DiskRecord = serde_json::from_str(line).map_err(|e| CoreError::Corrupt { path: path.display().to_string(), detail: e.to_string() })?;
    Ok(BucketRecord { id: d.id.into_owned(), score: d.score, segment: Arc::new(d.segment.into_owned()) })
}

/// Min / Mean / Max rows over the ten buckets.
pub fn render_stats_table(stats: &[BucketStats]) -> String {
    let mut s = String::from("Bucket");
    for k in 1..=stats.len() {
        let _ = write!(s, " | {k:>5}");
    }
    s.push('\n');
    for (name, f) in [("Min", 0), ("Mean", 1), ("Max", 2)] {
        let _ = write!(s, "{name:<6}");
        for st in stats {
            let v = [st.min, st.mean, st.max][f];
            let _ = write!(s, " | {v:>5.3}");
        }
        s.push('\n');
    }
    s
}
