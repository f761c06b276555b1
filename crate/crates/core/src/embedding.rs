//! Two-view top-down rasters and a contrastively trained segment encoder.

use hardcase_nn::{backward, Adam, AdamConfig, Gradients, Mlp, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::par_map;
use crate::geometry::Vec2;
use crate::seeding::{stream_rng, Stream};
use crate::world::{RunSegment, FRAMES};
use crate::{CoreError, Result};

pub const GRID: usize = 32;
pub const FRAME_SIZE: f64 = 80.0;
pub const CELL: f64 = FRAME_SIZE / GRID as f64;
pub const EMBED_DIM: usize = 32;
/// The ego starts this far ahead of the rear edge of the frame.
pub const REAR_VIEW: f64 = FRAME_SIZE / 4.0;
const EDGE_SLACK: f64 = 1e-6;
const ROAD_INTENSITY: f32 = 0.25;
const AGENT_FLOOR: f32 = 0.5;

/// `GRID x GRID` rasters, row-major, in the frame of the ego's initial pose
/// (x forward along columns, y left along rows).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentViews {
    pub ego: Vec<f32>,
    pub env: Vec<f32>,
}

struct Frame {
    origin: Vec2,
    heading: f64,
}

impl Frame {
    fn local(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.heading)
    }

    fn world(&self, q: Vec2) -> Vec2 {
        q.rotate(self.heading) + self.origin
    }

    fn cell(&self, p: Vec2) -> Option<usize> {
        let q = self.local(p);
        let half = FRAME_SIZE / 2.0;
        // Nudge by a hair so points sitting on a cell edge land consistently
        // after a rigid transform of the whole scene.
        let col = ((q.x + REAR_VIEW) / CELL + 1e-9).floor();
        let row = ((q.y + half) / CELL + 1e-9).floor();
        let g = GRID as f64;
        (col >= 0.0 && col < g && row >= 0.0 && row < g).then(|| row as usize * GRID + col as usize)
    }
}

fn time_intensity(t: usize) -> f32 {
    (t + 1) as f32 / FRAMES as f32
}

pub fn rasterize_views(seg: &RunSegment) -> SegmentViews {
    let init = seg.ego_track[0];
    let frame = Frame { origin: init.position(), heading: init.heading };
    let mut ego = vec![0.0f32; GRID * GRID];
    for (t, s) in seg.ego_track.iter().enumerate() {
        if let Some(c) = frame.cell(s.position()) {
            ego[c] = ego[c].max(time_intensity(t));
        }
    }

    let mut env = vec![0.0f32; GRID * GRID];
    let road = &seg.scenario.road;
    let half = FRAME_SIZE / 2.0;
    for r in 0..GRID {
        for c in 0..GRID {
            let q = Vec2::new(-REAR_VIEW + (c as f64 + 0.5) * CELL, -half + (r as f64 + 0.5) * CELL);
            let f = road.to_frenet(frame.world(q));
            // Lane edges can fall exactly on cell centers; the slack keeps
            // those cells lit under any rigid transform.
            if f.d.abs() <= road.half_width() + EDGE_SLACK && (-EDGE_SLACK..=road.length + EDGE_SLACK).contains(&f.s) {
                env[r * GRID + c] = ROAD_INTENSITY;
            }
        }
    }
    for a in &seg.scenario.agents {
        for (t, p) in a.poses.iter().enumerate() {
            if let Some(c) = frame.cell(p.position()) {
                let v = AGENT_FLOOR + (1.0 - AGENT_FLOOR) * time_intensity(t);
                env[c] = env[c].max(v);
            }
        }
    }
    SegmentViews { ego, env }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub ego: usize,
    pub env: usize,
    pub label: bool,
}

/// One positive and one negative pair per segment; the negative partner is
/// drawn uniformly from the other segments.
pub fn make_pairs(n: usize, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    if n < 2 {
        return Err(CoreError::Invalid(format!("pair batch needs at least 2 segments, got {n}")));
    }
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let j = (i + 1 + rng.random_range(0..n - 1)) % n;
        out.push(Pair { ego: i, env: i, label: true });
        out.push(Pair { ego: i, env: j, label: false });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub min_segments: usize,
    /// Randomize pair labels; a leakage check, never used for real runs.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            dim: EMBED_DIM,
            epochs: 8,
            batch_size: 128,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            min_segments: 1000,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub ego_encoder: Mlp,
    pub env_encoder: Mlp,
    bilinear: usize,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub epochs: usize,
    /// Set when held-out accuracy ends below 0.6.
    pub warning: Option<String>,
}

fn stack(views: &[&[f32]]) -> Tensor {
    let data = views.iter().flat_map(|v| v.iter().map(|&x| x as f64)).collect();
    Tensor::from_vec(views.len(), GRID * GRID, data).expect("raster size")
}

impl EmbeddingModel {
    pub fn new(config: &EmbeddingConfig, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![GRID * GRID];
        sizes.extend(&config.hidden);
        sizes.push(config.dim);
        let mut params = ParamSet::new();
        let ego_encoder = Mlp::new(&mut params, "ego", &sizes, rng);
        let env_encoder = Mlp::new(&mut params, "env", &sizes, rng);
        let d = config.dim;
        let a = (6.0 / (2 * d) as f64).sqrt();
        let w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-a..a)).collect();
        let bilinear = params.push("pair.w", Tensor::from_vec(d, d, w).expect("square"));
        params.push("pair.b", Tensor::scalar(0.0));
        Self { ego_encoder, env_encoder, bilinear, params }
    }

    pub fn dim(&self) -> usize {
        self.env_encoder.output_width()
    }

    /// Taped pair logits for `pairs` over a batch of views.
    fn logits(&self, tape: &mut Tape, bound: &hardcase_nn::Bound, ego: Tensor, env: Tensor, pairs: &[Pair]) -> Result<hardcase_nn::Var> {
        let ev = tape.constant(ego);
        let nv = tape.constant(env);
        let ee = self.ego_encoder.forward(tape, bound, ev)?;
        let ee = tape.row_normalize(ee);
        let ne = self.env_encoder.forward(tape, bound, nv)?;
        let ne = tape.row_normalize(ne);
        let ei: Vec<usize> = pairs.iter().map(|p| p.ego).collect();
        let ni: Vec<usize> = pairs.iter().map(|p| p.env).collect();
        let a = tape.gather_rows(ee, &ei)?;
        let b = tape.gather_rows(ne, &ni)?;
        let aw = tape.matmul(a, bound.var(self.bilinear))?;
        let prod = tape.mul(aw, b)?;
        let s = tape.sum_cols(prod);
        Ok(tape.add(s, bound.var(self.bilinear + 1))?)
    }

    /// Pair-match probabilities.
    pub fn classify(&self, views: &[SegmentViews], pairs: &[Pair]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let ego = stack(&views.iter().map(|v| v.ego.as_slice()).collect::<Vec<_>>());
        let env = stack(&views.iter().map(|v| v.env.as_slice()).collect::<Vec<_>>());
        let l = self.logits(&mut tape, &bound, ego, env, pairs)?;
        Ok(tape.value(l).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
    }

    /// Segment embedding: the normalized environment-view encoding.
    pub fn embed(&self, views: &SegmentViews) -> Result<Vec<f64>> {
        Ok(self.embed_batch(std::slice::from_ref(views))?.remove(0))
    }

    pub fn embed_batch(&self, views: &[SegmentViews]) -> Result<Vec<Vec<f64>>> {
        let env = stack(&views.iter().map(|v| v.env.as_slice()).collect::<Vec<_>>());
        let out = self.env_encoder.infer(&self.params, &env)?;
        Ok((0..out.rows())
            .map(|r| {
                let row = out.row_slice(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
                row.iter().map(|v| v * inv).collect()
            })
            .collect())
    }

    pub fn embed_corpus(&self, views: &[SegmentViews], workers: usize) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let chunks: Vec<&[SegmentViews]> = views.chunks(CHUNK).collect();
        let parts = par_map(workers, &chunks, |c| self.embed_batch(c));
        let mut out = Vec::with_capacity(views.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

fn pair_accuracy(model: &EmbeddingModel, views: &[SegmentViews], pairs: &[Pair], labels: &[bool]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let p = model.classify(views, pairs)?;
    let hits = p.iter().zip(labels).filter(|(&p, &y)| (p > 0.5) == y).count();
    Ok(hits as f64 / pairs.len() as f64)
}

fn batch_loss(model: &EmbeddingModel, views: &[&SegmentViews], pairs: &[Pair], labels: &[bool]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let ego = stack(&views.iter().map(|v| v.ego.as_slice()).collect::<Vec<_>>());
    let env = stack(&views.iter().map(|v| v.env.as_slice()).collect::<Vec<_>>());
    let l = model.logits(&mut tape, &bound, ego, env, pairs)?;
    // softplus(-l) for matches, softplus(l) otherwise.
    let sign = Tensor::column(labels.iter().map(|&y| if y { -1.0 } else { 1.0 }).collect());
    let sv = tape.constant(sign);
    let z = tape.mul(l, sv)?;
    let sp = tape.softplus(z);
    let loss = tape.mean(sp);
    let g: Gradients = backward(&tape, loss)?;
    Ok((tape.value(loss).item(), g.of(&tape, &bound)))
}

fn labels_for(pairs: &[Pair], shuffle: bool, rng: &mut impl Rng) -> Vec<bool> {
    let mut y: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    if shuffle {
        y.shuffle(rng);
    }
    y
}

pub fn train_embedding(views: &[SegmentViews], config: &EmbeddingConfig) -> Result<(EmbeddingModel, EmbeddingReport)> {
    if views.len() < config.min_segments.max(4) {
        return Err(CoreError::Invalid(format!(
            "embedding training needs at least {} segments, got {}",
            config.min_segments.max(4),
            views.len()
        )));
    }
    let mut rng = stream_rng(Stream::Embedding, &[config.seed]);
    let mut model = EmbeddingModel::new(config, &mut rng);
    let mut adam = Adam::new(&model.params, AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });

    let n_hold = ((views.len() as f64 * config.holdout_fraction).round() as usize).clamp(2, views.len() - 2);
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.shuffle(&mut rng);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let hold: Vec<SegmentViews> = hold_idx.iter().map(|&i| views[i].clone()).collect();
    let hold_pairs = make_pairs(hold.len(), &mut rng)?;
    let hold_labels = labels_for(&hold_pairs, config.shuffle_labels, &mut rng);

    let mut train_idx = train_idx.to_vec();
    let bs = config.batch_size.max(2);
    let mut train_hits = 0usize;
    let mut train_total = 0usize;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let last = epoch + 1 == config.epochs;
        for chunk in train_idx.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&SegmentViews> = chunk.iter().map(|&i| &views[i]).collect();
            let pairs = make_pairs(batch.len(), &mut rng)?;
            let labels = labels_for(&pairs, config.shuffle_labels, &mut rng);
            let (_, grads) = batch_loss(&model, &batch, &pairs, &labels)?;
            adam.step(&mut model.params, &grads)?;
            if last {
                let owned: Vec<SegmentViews> = batch.iter().map(|v| (*v).clone()).collect();
                let p = model.classify(&owned, &pairs)?;
                train_hits += p.iter().zip(&labels).filter(|(&p, &y)| (p > 0.5) == y).count();
                train_total += pairs.len();
            }
        }
    }
    let holdout_accuracy = pair_accuracy(&model, &hold, &hold_pairs, &hold_labels)?;
    let warning = (holdout_accuracy < 0.6).then(|| format!("embedding did not converge: held-out pair accuracy {holdout_accuracy:.3}"));
    let report = EmbeddingReport {
        train_accuracy: if train_total > 0 { train_hits as f64 / train_total as f64 } else { 0.0 },
        holdout_accuracy,
        epochs: config.epochs,
        warning,
    };
    Ok((model, report))
}
