//! Closed-loop evaluation: stochastic rollouts, per-segment metrics,
//! aggregation across seeds and buckets, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{decode_action, obs_tensor, PlanningAgent, ACTION_DIM};
use crate::buckets::{DecileThresholds, NUM_BUCKETS};
use crate::corpus::par_map;
use crate::features::observe;
use crate::seeding::{stream_rng, Stream};
use crate::world::{off_route, step_dynamics, DeltaAction, EgoState, OutcomeTracker, Road, RunSegment, FRAMES, NEAR_MISS_THRESHOLD};
use crate::{CoreError, Result};

pub const DEFAULT_ROLLOUTS: usize = 16;

/// One row of a lockstep batch of rollouts.
pub struct StepContext<'a> {
    pub segment: &'a RunSegment,
    pub t: usize,
    pub state: EgoState,
}

/// A controller that acts on many rollouts at once.
pub trait DrivingPolicy: Sync {
    fn act_batch(&self, rows: &[StepContext<'_>], rngs: &mut [ChaCha8Rng]) -> Result<Vec<DeltaAction>>;
}

/// Samples from the agent's mixture; `greedy` uses the mixture mean.
pub struct AgentPolicy<'a> {
    pub agent: &'a PlanningAgent,
    pub greedy: bool,
}

impl DrivingPolicy for AgentPolicy<'_> {
    fn act_batch(&self, rows: &[StepContext<'_>], rngs: &mut [ChaCha8Rng]) -> Result<Vec<DeltaAction>> {
        let obs: Vec<_> = rows.iter().map(|r| observe(&r.segment.scenario, r.t, &r.state)).collect();
        let mix = self.agent.policy_mixtures(&obs_tensor(&obs))?;
        Ok(mix
            .iter()
            .zip(rows)
            .zip(rngs.iter_mut())
            .map(|((m, row), rng)| {
                let u = if self.greedy {
                    m.mean()
                } else {
                    let k = m.choose_component(rng.random::<f64>());
                    let z: Vec<f64> = (0..ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
                    m.sample(k, &z)
                };
                decode_action(&u, &row.state)
            })
            .collect())
    }
}

/// Replays the logged expert actions.
pub struct ReplayPolicy;

impl DrivingPolicy for ReplayPolicy {
    fn act_batch(&self, rows: &[StepContext<'_>], _: &mut [ChaCha8Rng]) -> Result<Vec<DeltaAction>> {
        Ok(rows.iter().map(|r| r.segment.expert_actions[r.t]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub route_failure: bool,
    pub collision: bool,
    pub offroad: bool,
    pub progress_ratio: Option<f64>,
}

impl RolloutResult {
    pub fn failure(&self) -> bool {
        self.route_failure || self.collision || self.offroad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub route_failure: f64,
    pub collision: f64,
    pub offroad: f64,
    /// `None` when the expert made no progress.
    pub progress_ratio: Option<f64>,
    pub failure: f64,
}

/// Arc length covered along the road reference line.
pub fn route_progress(track: &[EgoState], road: &Road) -> f64 {
    match (track.first(), track.last()) {
        (Some(a), Some(b)) => road.to_frenet(b.position()).s - road.to_frenet(a.position()).s,
        _ => 0.0,
    }
}

/// Agent progress over expert progress, clamped at zero.
pub fn progress_ratio(agent: &[EgoState], expert: &[EgoState], road: &Road) -> Option<f64> {
    let e = route_progress(expert, road);
    (e > 0.0).then(|| (route_progress(agent, road) / e).max(0.0))
}

pub fn segment_metrics(rollouts: &[RolloutResult]) -> SegmentMetrics {
    let n = rollouts.len().max(1) as f64;
    let rate = |f: &dyn Fn(&RolloutResult) -> bool| rollouts.iter().filter(|r| f(r)).count() as f64 / n;
    let prog: Vec<f64> = rollouts.iter().filter_map(|r| r.progress_ratio).collect();
    SegmentMetrics {
        route_failure: rate(&|r| r.route_failure),
        collision: rate(&|r| r.collision),
        offroad: rate(&|r| r.offroad),
        progress_ratio: (!prog.is_empty()).then(|| prog.iter().sum::<f64>() / prog.len() as f64),
        failure: rate(&|r| r.failure()),
    }
}

/// Rows handled per lockstep batch.
const LOCKSTEP_ROWS: usize = 512;

fn run_lockstep(policy: &dyn DrivingPolicy, pairs: &[(&RunSegment, usize)], seed: u64) -> Result<Vec<RolloutResult>> {
    let mut rngs: Vec<ChaCha8Rng> = pairs.iter().map(|(s, r)| stream_rng(Stream::Evaluation, &[seed, s.scenario.seed, *r as u64])).collect();
    let corridors: Vec<_> = pairs.iter().map(|(s, _)| s.scenario.corridor()).collect();
    let mut trackers: Vec<OutcomeTracker> = pairs
        .iter()
        .zip(&corridors)
        .map(|((s, _), c)| OutcomeTracker::new(&s.scenario, c, NEAR_MISS_THRESHOLD))
        .collect();
    let mut states: Vec<EgoState> = pairs.iter().map(|(s, _)| s.ego_track[0]).collect();
    let mut off = vec![false; pairs.len()];
    let mut tracks: Vec<Vec<EgoState>> = states.iter().map(|s| vec![*s]).collect();
    for t in 0..FRAMES {
        for (i, (seg, _)) in pairs.iter().enumerate() {
            trackers[i].observe(t, &states[i]);
            off[i] |= off_route(states[i].position(), &seg.scenario.road, &seg.scenario.route.lanes);
        }
        if t + 1 == FRAMES {
            break;
        }
        let rows: Vec<StepContext> = pairs.iter().zip(&states).map(|((s, _), st)| StepContext { segment: s, t, state: *st }).collect();
        let actions = policy.act_batch(&rows, &mut rngs)?;
        for i in 0..pairs.len() {
            states[i] = step_dynamics(&states[i], &actions[i]);
            tracks[i].push(states[i]);
        }
    }
    Ok(trackers
        .into_iter()
        .enumerate()
        .map(|(i, tr)| {
            let o = tr.finish();
            let seg = pairs[i].0;
            RolloutResult {
                route_failure: off[i],
                collision: o.collision,
                offroad: o.offroad,
                progress_ratio: progress_ratio(&tracks[i], &seg.ego_track, &seg.scenario.road),
            }
        })
        .collect())
}

/// `n_rollouts` closed-loop rollouts per segment; each (segment, rollout)
/// pair has its own random stream, so results do not depend on batching or
/// `workers`.
pub fn evaluate_segments(
    policy: &dyn DrivingPolicy,
    segments: &[&RunSegment],
    n_rollouts: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<SegmentMetrics>> {
    if n_rollouts == 0 {
        return Err(CoreError::Invalid("need at least one rollout".into()));
    }
    let pairs: Vec<(&RunSegment, usize)> = segments.iter().flat_map(|&s| (0..n_rollouts).map(move |r| (s, r))).collect();
    let chunks: Vec<&[(&RunSegment, usize)]> = pairs.chunks(LOCKSTEP_ROWS).collect();
    let parts = par_map(workers, &chunks, |c| run_lockstep(policy, c, seed));
    let mut all = Vec::with_capacity(pairs.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all.chunks(n_rollouts).map(segment_metrics).collect())
}

pub fn rollout_eval(policy: &dyn DrivingPolicy, segment: &RunSegment, n_rollouts: usize, seed: u64) -> Result<SegmentMetrics> {
    Ok(evaluate_segments(policy, &[segment], n_rollouts, seed, 1)?.remove(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub route_failure: f64,
    pub collision: f64,
    pub offroad: f64,
    pub progress: f64,
    pub failure: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 5] = ["Route Failure", "Collision", "Off-road", "Route Progress", "Failure"];
    pub const KEYS: [&'static str; 5] = ["route_failure", "collision", "offroad", "progress", "failure"];

    pub fn values(&self) -> [f64; 5] {
        [self.route_failure, self.collision, self.offroad, self.progress, self.failure]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self { route_failure: v[0], collision: v[1], offroad: v[2], progress: v[3], failure: v[4] }
    }
}

/// Segment-weighted means; progress averages over segments where it is
/// defined.
pub fn mean_metrics(ms: &[&SegmentMetrics]) -> MetricSet {
    let n = ms.len().max(1) as f64;
    let prog: Vec<f64> = ms.iter().filter_map(|m| m.progress_ratio).collect();
    MetricSet {
        route_failure: ms.iter().map(|m| m.route_failure).sum::<f64>() / n,
        collision: ms.iter().map(|m| m.collision).sum::<f64>() / n,
        offroad: ms.iter().map(|m| m.offroad).sum::<f64>() / n,
        progress: if prog.is_empty() { 0.0 } else { prog.iter().sum::<f64>() / prog.len() as f64 },
        failure: ms.iter().map(|m| m.failure).sum::<f64>() / n,
    }
}

/// Mean and standard error across seeds (SE is 0 for a single seed).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricSet,
    pub se: MetricSet,
}

fn summarize(per_seed: &[MetricSet]) -> MetricSummary {
    let mut mean = [0.0; 5];
    let mut se = [0.0; 5];
    for j in 0..5 {
        let xs: Vec<f64> = per_seed.iter().map(|m| m.values()[j]).collect();
        (mean[j], se[j]) = mean_se(&xs);
    }
    MetricSummary { mean: MetricSet::from_values(mean), se: MetricSet::from_values(se) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub full: MetricSummary,
    pub per_bucket: Vec<MetricSummary>,
    pub long_tail: Option<MetricSummary>,
    /// Per-seed full-set metrics, for paired tests across variants.
    pub per_seed_full: Vec<MetricSet>,
    pub per_seed_bucket: Vec<Vec<MetricSet>>,
}

/// Per-seed results for one variant: metrics on the unbiased test set (in
/// `buckets` order) and optionally on the long-tail set.
pub struct SeedResult {
    pub seed: u64,
    pub unbiased: Vec<SegmentMetrics>,
    pub long_tail: Option<Vec<SegmentMetrics>>,
}

pub fn aggregate(variant: &str, results: &[SeedResult], buckets: &[usize]) -> Result<VariantReport> {
    let mut full = Vec::new();
    let mut per_bucket: Vec<Vec<MetricSet>> = vec![Vec::new(); NUM_BUCKETS];
    let mut tail = Vec::new();
    let mut per_seed_bucket = Vec::new();
    for r in results {
        if r.unbiased.len() != buckets.len() {
            return Err(CoreError::Invalid(format!("{} metrics for {} bucket labels", r.unbiased.len(), buckets.len())));
        }
        full.push(mean_metrics(&r.unbiased.iter().collect::<Vec<_>>()));
        let mut row = Vec::with_capacity(NUM_BUCKETS);
        for (k, pb) in per_bucket.iter_mut().enumerate() {
            let of_k: Vec<&SegmentMetrics> = r.unbiased.iter().zip(buckets).filter(|(_, &b)| b == k).map(|(m, _)| m).collect();
            let m = mean_metrics(&of_k);
            pb.push(m);
            row.push(m);
        }
        per_seed_bucket.push(row);
        if let Some(lt) = &r.long_tail {
            tail.push(mean_metrics(&lt.iter().collect::<Vec<_>>()));
        }
    }
    Ok(VariantReport {
        variant: variant.to_string(),
        seeds: results.iter().map(|r| r.seed).collect(),
        full: summarize(&full),
        per_bucket: per_bucket.iter().map(|v| summarize(v)).collect(),
        long_tail: (!tail.is_empty()).then(|| summarize(&tail)),
        per_seed_full: full,
        per_seed_bucket,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<VariantReport>,
    pub meta: BTreeMap<String, String>,
}

/// Test sets from a scored test corpus (indices into it). The unbiased set
/// is a uniform draw of `unbiased` segments; the long-tail set is every
/// segment scoring above `tail_threshold`.
pub fn make_test_sets(scores: &[f64], unbiased: usize, tail_threshold: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = unbiased.min(scores.len());
    let mut u: Vec<usize> = rand::seq::index::sample(rng, scores.len(), n).into_vec();
    u.sort_unstable();
    let tail: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > tail_threshold).collect();
    if tail.is_empty() {
        return Err(CoreError::Invalid(format!("no test segment scores above {tail_threshold}")));
    }
    Ok((u, tail))
}

/// Score at quantile `q` of a sample (nearest rank, upper).
pub fn quantile(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let i = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[i]
}

pub fn assign_buckets(scores: &[f64], thresholds: &DecileThresholds) -> Vec<usize> {
    scores.iter().map(|&s| thresholds.bucket_of(s)).collect()
}

fn cell(m: f64, se: f64, percent: bool) -> String {
    let k = if percent { 100.0 } else { 1.0 };
    format!("{:.2} ± {:.2}", m * k, se * k)
}

fn row_cells(s: &MetricSummary) -> Vec<String> {
    let (m, e) = (s.mean.values(), s.se.values());
    (0..5).map(|j| cell(m[j], e[j], true)).collect()
}

pub fn render_csv(report: &EvalReport) -> String {
    let mut s = String::from("Variant");
    for n in MetricSet::NAMES {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for v in &report.variants {
        s.push_str(&v.variant);
        for c in row_cells(&v.full) {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

pub fn render_text(report: &EvalReport) -> String {
    let mut header = vec!["Variant".to_string()];
    header.extend(MetricSet::NAMES.iter().map(|s| s.to_string()));
    let mut rows = vec![header];
    for v in &report.variants {
        let mut r = vec![v.variant.clone()];
        r.extend(row_cells(&v.full));
        rows.push(r);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        s.push_str(line.join(" | ").trim_end());
        s.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            s.push_str(&rule.join("-+-"));
            s.push('\n');
        }
    }
    s
}

const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Per-bucket line plot of one metric for every variant.
pub fn render_bucket_svg(report: &EvalReport, metric: usize) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let values: Vec<Vec<f64>> = report.variants.iter().map(|v| v.per_bucket.iter().map(|b| b.mean.values()[metric]).collect()).collect();
    let top = values.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let x = |k: usize| pad + (w - 2.0 * pad) * k as f64 / (NUM_BUCKETS - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / top;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{} by difficulty bucket</text>"#, w / 2.0, MetricSet::NAMES[metric]);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for k in 0..NUM_BUCKETS {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#, x(k), h - pad + 16.0, k + 1);
    }
    for t in 0..=4 {
        let v = top * t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.3}</text>"#, pad - 4.0, y(v) + 4.0, v);
    }
    for (i, (v, vals)) in report.variants.iter().zip(&values).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = vals.iter().enumerate().map(|(k, &val)| format!("{:.1},{:.1}", x(k), y(val))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, pad + 8.0, pad + 14.0 * (i as f64 + 1.0), v.variant);
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_meta(report: &EvalReport) -> String {
    let mut s = String::new();
    for (k, v) in &report.meta {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Writes `table.csv`, `table.txt`, `bucket_<metric>.svg` and `meta`.
pub fn render_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table.csv"), render_csv(report))?;
    std::fs::write(dir.join("table.txt"), render_text(report))?;
    for (j, key) in MetricSet::KEYS.iter().enumerate() {
        std::fs::write(dir.join(format!("bucket_{key}.svg")), render_bucket_svg(report, j))?;
    }
    std::fs::write(dir.join("meta"), render_meta(report))?;
    Ok(())
}
