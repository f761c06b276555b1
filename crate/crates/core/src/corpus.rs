//! Segment corpora: deterministic generation over a seed range and JSON-lines
//! persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::seeding::{stream_rng, Stream};
use crate::world::{expert_rollout, generate_scenario, KnobDistribution, RunSegment};
use crate::{CoreError, Result};

/// Runs `f` on a pool with `workers` threads (1 = current thread only).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Ordered parallel map; output order equals input order.
pub fn par_map<T: Sync, U: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    with_workers(workers, || items.par_iter().map(f).collect())
}

pub fn generate_segment(seed: u64, knobs: &KnobDistribution) -> Result<RunSegment> {
    let mut rng = stream_rng(Stream::Knobs, &[seed]);
    let k = knobs.sample(&mut rng);
    Ok(expert_rollout(&generate_scenario(seed, &k)?))
}

pub fn generate_corpus(seeds: Range<u64>, knobs: &KnobDistribution, workers: usize) -> Result<Vec<RunSegment>> {
    let seeds: Vec<u64> = seeds.collect();
    par_map(workers, &seeds, |&s| generate_segment(s, knobs)).into_iter().collect()
}

/// Seed ranges for the corpora; pairwise disjoint by construction.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SeedPlan {
    pub train: Range<u64>,
    pub validation: Range<u64>,
    pub test: Range<u64>,
}

/// Space left between consecutive ranges.
const SEED_GAP: u64 = 1_000_000;

impl SeedPlan {
    /// Training seeds start at `base`; validation and test seeds follow, each
    /// after a gap.
    pub fn new(base: u64, train: u64, validation: u64, test: u64) -> Self {
        let v0 = base + train + SEED_GAP;
        let t0 = v0 + validation + SEED_GAP;
        Self { train: base..base + train, validation: v0..v0 + validation, test: t0..t0 + test }
    }

    pub fn disjoint(&self) -> bool {
        let apart = |a: &Range<u64>, b: &Range<u64>| a.end <= b.start || b.end <= a.start;
        apart(&self.train, &self.validation) && apart(&self.train, &self.test) && apart(&self.validation, &self.test)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::Corrupt {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Corpus content hash, independent of file layout.
pub fn corpus_hash(segments: &[RunSegment]) -> Result<String> {
    let mut h = Sha256::new();
    for s in segments {
        h.update(serde_json::to_vec(s)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
