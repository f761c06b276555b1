use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use hardcase::buckets::*;
use hardcase::corpus::generate_corpus;
use hardcase::world::{KnobDistribution, RunSegment};
use hardcase::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn base() -> &'static [RunSegment] {
    static C: OnceLock<Vec<RunSegment>> = OnceLock::new();
    C.get_or_init(|| generate_corpus(0..20, &KnobDistribution::default(), 1).unwrap())
}

/// `n` segments with distinct ids, cycling through a small real corpus.
fn segments(n: usize) -> Vec<Arc<RunSegment>> {
    (0..n)
        .map(|i| {
            let mut s = base()[i % 20].clone();
            s.id = format!("seg{i:05}");
            Arc::new(s)
        })
        .collect()
}

fn scores(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("seg{i:05}")).collect()
}

#[test]
fn hundred_evenly_spaced_scores_split_into_tens() {
    let s: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    let (thr, assign) = decile_split(&ids(100), &s).unwrap();
    let b = thr.bounds();
    assert_eq!(b[0], 0.0);
    assert_eq!(b[10], 0.99);
    for k in 1..10 {
        assert!((b[k] - (10 * k - 1) as f64 / 100.0).abs() < 1e-12, "{b:?}");
    }
    for (i, &a) in assign.iter().enumerate() {
        assert_eq!(a, i / 10);
    }
}

#[test]
fn ties_still_split_by_rank() {
    let (thr, assign) = decile_split(&ids(95), &[0.5; 95]).unwrap();
    assert!(thr.bounds().iter().all(|&b| b == 0.5));
    for k in 0..10 {
        let c = assign.iter().filter(|&&a| a == k).count();
        assert!(c.abs_diff(95 / 10) <= 1, "bucket {k}: {c}");
    }
    assert!(decile_split(&ids(9), &[0.1; 9]).is_err());
    assert!(decile_split(&ids(10), &[f64::NAN; 10]).is_err());
}

#[test]
fn thousand_segments_give_hundred_per_bucket() {
    let store = BucketStore::from_scores(&segments(1000), &scores(1000), 16, "h").unwrap();
    assert_eq!(store.len(), 1000);
    for k in 0..10 {
        assert_eq!(store.bucket_len(k), 100);
    }
    let st = store.stats();
    for k in 0..9 {
        assert!(st[k].max <= st[k + 1].min);
        assert!(st[k].mean < st[k + 1].mean);
    }
    let m = store.manifest();
    assert_eq!(m.counts, vec![100; 10]);
    assert_eq!(m.shards, vec![7; 10]);
}

#[test]
fn written_store_reopens_and_streams_the_same_records() {
    let mut mem = BucketStore::from_scores(&segments(300), &scores(300), 8, "h").unwrap();
    let dir = tempfile::tempdir().unwrap();
    mem.write(dir.path()).unwrap();
    let mut disk = BucketStore::open(dir.path()).unwrap();
    assert_eq!(disk.manifest(), mem.manifest());

    let again = tempfile::tempdir().unwrap();
    disk.write(again.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("manifest")).unwrap(), std::fs::read(again.path().join("manifest")).unwrap());
    for k in 0..10 {
        let s = format!("decile_{k:02}/shard_00000");
        assert_eq!(std::fs::read(dir.path().join(&s)).unwrap(), std::fs::read(again.path().join(&s)).unwrap());
    }

    let w = BucketWeights::uniform(10);
    let a = mem.sample_batch(&w, 200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = disk.sample_batch(&w, 200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.bucket, &x.record.id, x.record.score), (y.bucket, &y.record.id, y.record.score));
        assert_eq!(x.record.segment.ego_track, y.record.segment.ego_track);
    }
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest"), "{").unwrap();
    assert!(matches!(BucketStore::open(dir.path()), Err(CoreError::Corrupt { .. })));
}

#[test]
fn one_hot_weights_draw_from_one_bucket() {
    let mut store = BucketStore::from_scores(&segments(200), &scores(200), 16, "h").unwrap();
    let batch = store.sample_batch(&BucketWeights::one_hot(10, 9), 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(batch.iter().all(|s| s.bucket == 9));
    let bounds = store.thresholds().bounds().to_vec();
    assert!(batch.iter().all(|s| s.record.score >= bounds[9] && s.record.score <= bounds[10]));
    assert_eq!(store.record_reads(), 64);
}

#[test]
fn uniform_weights_match_their_frequencies() {
    let mut store = BucketStore::from_scores(&segments(100), &scores(100), 16, "h").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0usize; 10];
    for _ in 0..100 {
        for s in store.sample_batch(&BucketWeights::uniform(10), 10_000, &mut rng).unwrap() {
            counts[s.bucket] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / 1e6 - 0.1).abs() < 0.002, "{counts:?}");
    }
}

#[test]
fn same_seed_gives_the_same_batches() {
    let draw = || {
        let mut store = BucketStore::from_scores(&segments(200), &scores(200), 16, "h").unwrap();
        let w = BucketWeights::new(vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (0..5).flat_map(|_| store.sample_batch(&w, 32, &mut rng).unwrap()).map(|s| s.record.id).collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn stats_and_table_layout() {
    let s = BucketStats::of(&[0.1, 0.2, 0.3]);
    assert_eq!((s.count, s.min, s.max), (3, 0.1, 0.3));
    assert!((s.mean - 0.2).abs() < 1e-15);
    let table = render_stats_table(&vec![s; 10]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("Bucket |     1"));
    assert!(lines[0].ends_with("|    10"));
    assert!(lines[1].starts_with("Min    | 0.100"));
    assert!(lines[2].starts_with("Mean   | 0.200"));
    assert!(lines[3].starts_with("Max    | 0.300"));
    assert_eq!(lines[1].matches('|').count(), 10);
}

#[test]
fn buckets_partition_the_corpus() {
    let store = BucketStore::from_scores(&segments(537), &scores(537), 16, "h").unwrap();
    let mut seen: Vec<String> = (0..10).flat_map(|k| store.bucket_records(k).unwrap()).map(|r| r.id).collect();
    assert_eq!(seen.len(), 537);
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 537);
    for k in 0..10 {
        assert!(store.bucket_len(k).abs_diff(54) <= 1);
    }
}

#[test]
fn streams_visit_every_record_equally() {
    for shuffle in [false, true] {
        let mut store = BucketStore::from_scores(&segments(500), &scores(500), 7, "h").unwrap();
        store.set_shuffle_shards(shuffle);
        let size = store.bucket_len(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits: HashMap<String, usize> = HashMap::new();
        for s in store.sample_batch(&BucketWeights::one_hot(10, 3), 3 * size, &mut rng).unwrap() {
            *hits.entry(s.record.id).or_default() += 1;
        }
        assert_eq!(hits.len(), size);
        assert!(hits.values().all(|&c| c == 3));
        assert_eq!(store.cursor(3).epoch, 2);
        assert_eq!(store.record_reads() as usize, 3 * size);
    }
}

#[test]
fn every_segment_needs_a_score() {
    let segs = segments(50);
    let mut map: HashMap<String, f64> = segs.iter().map(|s| (s.id.clone(), 0.5)).collect();
    assert!(BucketStore::bucketize(&segs, &map, 16, "h").is_ok());
    map.remove("seg00007");
    assert!(matches!(BucketStore::bucketize(&segs, &map, 16, "h"), Err(CoreError::MissingScore(id)) if id == "seg00007"));
}

#[test]
fn restricted_and_trimmed_buckets() {
    let mut store = BucketStore::from_scores(&segments(1000), &scores(1000), 16, "h").unwrap();
    store.restrict(0.1).unwrap();
    assert!((0..10).all(|k| store.bucket_len(k) == 10));
    let first: Vec<String> = store.bucket_records(2).unwrap().into_iter().take(10).map(|r| r.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let drawn: Vec<String> = store.sample_batch(&BucketWeights::one_hot(10, 2), 20, &mut rng).unwrap().into_iter().map(|s| s.record.id).collect();
    assert_eq!(drawn[..10], first[..]);
    assert_eq!(drawn[10..], first[..]);
    assert!(store.restrict(0.0).is_err());

    let mut top = BucketStore::from_scores(&segments(1000), &scores(1000), 16, "h").unwrap();
    let cut = {
        let mut s: Vec<f64> = top.bucket_records(9).unwrap().iter().map(|r| r.score).collect();
        s.sort_by(f64::total_cmp);
        s[90]
    };
    top.keep_top_of_last(0.1).unwrap();
    assert_eq!(top.bucket_len(9), 10);
    assert!(top.bucket_records(9).unwrap().iter().all(|r| r.score >= cut));
    assert_eq!(top.stats()[9].count, 10);
}

#[test]
fn empty_buckets_cannot_be_sampled() {
    let segs = segments(20);
    let s = scores(20);
    let thr = DecileThresholds::new((0..=10).map(|k| k as f64).collect()).unwrap();
    let assign: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let mut store = BucketStore::in_memory(&segs, &s, thr, &assign, 4, "h").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(store.sample_batch(&BucketWeights::one_hot(10, 1), 4, &mut rng).is_ok());
    assert!(matches!(store.sample_batch(&BucketWeights::one_hot(10, 5), 4, &mut rng), Err(CoreError::EmptyBucket(5))));
    assert!(store.sample_batch(&BucketWeights::uniform(3), 4, &mut rng).is_err());
}
