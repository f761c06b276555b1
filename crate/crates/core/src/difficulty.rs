//! Zero-shot difficulty model: counterfactual planner outcomes regressed from
//! segment embeddings.

use hardcase_nn::{backward, Adam, AdamConfig, Mlp, ParamSet, Tape, Tensor};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::par_map;
use crate::seeding::{stream_rng, Stream};
use crate::world::{simulate_counterfactual, PlannerProfile, RunSegment, SafetyOutcome, ScriptedPlanner};
use crate::{CoreError, Result};

/// Reference class balance: 80k negatives per 5.6k positives.
pub const DEFAULT_NEG_RATIO: f64 = 80.0 / 5.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub segment: usize,
    pub segment_id: String,
    pub profile: String,
    pub outcome: SafetyOutcome,
}

impl OutcomeRecord {
    pub fn label(&self) -> bool {
        self.outcome.positive()
    }
}

/// Runs every profile on every segment. Records are ordered by segment,
/// then profile.
pub fn label_outcomes(segments: &[RunSegment], profiles: &[(String, PlannerProfile)], workers: usize) -> Result<Vec<OutcomeRecord>> {
    for (_, p) in profiles {
        p.validate()?;
    }
    let idx: Vec<usize> = (0..segments.len()).collect();
    let per: Vec<Vec<OutcomeRecord>> = par_map(workers, &idx, |&i| {
        profiles
            .iter()
            .map(|(name, p)| OutcomeRecord {
                segment: i,
                segment_id: segments[i].id.clone(),
                profile: name.clone(),
                outcome: simulate_counterfactual(&segments[i], &mut ScriptedPlanner::new(*p)),
            })
            .collect()
    });
    Ok(per.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelExample {
    pub segment: usize,
    pub segment_id: String,
    pub profile: String,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub examples: Vec<LabelExample>,
    pub positives: usize,
    pub negatives_available: usize,
    pub neg_ratio: f64,
    pub profiles: Vec<String>,
}

/// Keeps every positive and a uniform subset of `round(ratio * positives)`
/// negatives (all of them if fewer exist). Example order follows the input.
pub fn build_label_set(outcomes: &[OutcomeRecord], neg_ratio: f64, rng: &mut impl Rng) -> Result<LabelSet> {
    let mut profiles: Vec<String> = outcomes.iter().map(|o| o.profile.clone()).collect();
    profiles.sort();
    profiles.dedup();
    if profiles.len() < 2 {
        return Err(CoreError::Invalid(format!("labels need outcomes from at least 2 planner profiles, got {}", profiles.len())));
    }
    if !(neg_ratio > 0.0) {
        return Err(CoreError::Invalid(format!("negative ratio must be positive, got {neg_ratio}")));
    }
    let pos: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i].label()).collect();
    let neg: Vec<usize> = (0..outcomes.len()).filter(|&i| !outcomes[i].label()).collect();
    if pos.is_empty() {
        return Err(CoreError::NoPositives);
    }
    if neg.is_empty() {
        return Err(CoreError::Invalid("labels contain no negative outcomes".into()));
    }
    let keep = ((neg_ratio * pos.len() as f64).round() as usize).min(neg.len());
    let mut chosen: Vec<usize> = index::sample(rng, neg.len(), keep).into_iter().map(|k| neg[k]).collect();
    chosen.extend(&pos);
    chosen.sort_unstable();
    let examples = chosen
        .into_iter()
        .map(|i| {
            let o = &outcomes[i];
            LabelExample { segment: o.segment, segment_id: o.segment_id.clone(), profile: o.profile.clone(), label: o.label() }
        })
        .collect();
    Ok(LabelSet { examples, positives: pos.len(), negatives_available: neg.len(), neg_ratio, profiles })
}

/// Area under the ROC curve via the rank-sum statistic; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub neg_ratio: f64,
    pub min_positives: usize,
    pub seed: u64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            neg_ratio: DEFAULT_NEG_RATIO,
            min_positives: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DifficultyModel {
    pub mlp: Mlp,
    pub params: ParamSet,
}

impl DifficultyModel {
    pub fn score_batch(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let x = Tensor::from_rows(embeddings)?;
        let z = self.mlp.infer(&self.params, &x)?;
        Ok(z.data().iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect())
    }

    pub fn score(&self, embedding: &[f64]) -> Result<f64> {
        Ok(self.score_batch(&[embedding.to_vec()])?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub train_examples: usize,
    pub holdout_examples: usize,
    pub holdout_auc: f64,
    pub best_epoch: usize,
    pub warning: Option<String>,
}

/// Trains on `(embedding, label)` rows. The held-out split is by segment so
/// one segment's profiles never straddle it; the epoch with the best
/// held-out AUC is kept.
pub fn train_difficulty(
    labels: &LabelSet,
    embeddings: &[Vec<f64>],
    config: &DifficultyConfig,
) -> Result<(DifficultyModel, DifficultyReport)> {
    let positives = labels.examples.iter().filter(|e| e.label).count();
    if positives < config.min_positives {
        return Err(CoreError::Invalid(format!(
            "difficulty training needs at least {} positives, got {positives}",
            config.min_positives
        )));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut rng = stream_rng(Stream::Difficulty, &[config.seed]);

    let mut segs: Vec<usize> = labels.examples.iter().map(|e| e.segment).collect();
    segs.sort_unstable();
    segs.dedup();
    segs.shuffle(&mut rng);
    let n_hold = (segs.len() as f64 * config.holdout_fraction).round() as usize;
    let hold: std::collections::HashSet<usize> = segs[..n_hold].iter().copied().collect();
    let (hold_ex, train_ex): (Vec<&LabelExample>, Vec<&LabelExample>) =
        labels.examples.iter().partition(|e| hold.contains(&e.segment));
    if train_ex.is_empty() {
        return Err(CoreError::Invalid("no training examples after held-out split".into()));
    }

    let mut sizes = vec![dim];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, "difficulty", &sizes, &mut rng);
    let mut model = DifficultyModel { mlp, params };
    let mut adam = Adam::new(&model.params, AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });

    let hold_x: Vec<Vec<f64>> = hold_ex.iter().map(|e| embeddings[e.segment].clone()).collect();
    let hold_y: Vec<bool> = hold_ex.iter().map(|e| e.label).collect();
    let eval = |m: &DifficultyModel| -> Result<f64> {
        if hold_x.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(auc(&m.score_batch(&hold_x)?, &hold_y).unwrap_or(f64::NAN))
    };

    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let x = Tensor::from_rows(&chunk.iter().map(|&i| embeddings[train_ex[i].segment].clone()).collect::<Vec<_>>())?;
            let sign = Tensor::column(chunk.iter().map(|&i| if train_ex[i].label { -1.0 } else { 1.0 }).collect());
            let mut tape = Tape::new();
            let bound = tape.bind(&model.params);
            let xv = tape.constant(x);
            let l = model.mlp.forward(&mut tape, &bound, xv)?;
            let sv = tape.constant(sign);
            let z = tape.mul(l, sv)?;
            let sp = tape.softplus(z);
            let loss = tape.mean(sp);
            let g = backward(&tape, loss)?;
            adam.step(&mut model.params, &g.of(&tape, &bound))?;
        }
        let a = eval(&model)?;
        // NaN (no held-out set) keeps the latest epoch.
        if a.is_nan() || a > best.0 {
            best = (if a.is_nan() { f64::NEG_INFINITY } else { a }, epoch, model.params.clone());
        }
    }
    model.params = best.2;
    let holdout_auc = eval(&model)?;
    let warning = (holdout_auc < 0.6).then(|| format!("difficulty model held-out AUC {holdout_auc:.3} below 0.6"));
    Ok((
        model,
        DifficultyReport {
            train_examples: train_ex.len(),
            holdout_examples: hold_ex.len(),
            holdout_auc,
            best_epoch: best.1,
            warning,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over 20 equal-width bins of `[0, 1]`.
    pub histogram: Vec<usize>,
    /// `(threshold, fraction of scores above it)`.
    pub tail_mass: Vec<(f64, f64)>,
}

pub const TAIL_THRESHOLDS: [f64; 4] = [0.5, 0.7, 0.85, 0.95];

pub fn summarize_scores(scores: &[f64]) -> ScoreSummary {
    let n = scores.len();
    let mut histogram = vec![0usize; 20];
    for &s in scores {
        histogram[((s * 20.0).floor() as usize).min(19)] += 1;
    }
    let frac = |t: f64| if n == 0 { 0.0 } else { scores.iter().filter(|&&s| s > t).count() as f64 / n as f64 };
    ScoreSummary {
        count: n,
        mean: if n == 0 { 0.0 } else { scores.iter().sum::<f64>() / n as f64 },
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        histogram,
        tail_mass: TAIL_THRESHOLDS.iter().map(|&t| (t, frac(t))).collect(),
    }
}

pub fn score_corpus(model: &DifficultyModel, ids: &[String], embeddings: &[Vec<f64>]) -> Result<(Vec<ScoreRecord>, ScoreSummary)> {
    if ids.len() != embeddings.len() {
        return Err(CoreError::Invalid(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
    }
    let scores = model.score_batch(embeddings)?;
    let summary = summarize_scores(&scores);
    let recs = ids.iter().zip(scores).map(|(id, score)| ScoreRecord { id: id.clone(), score }).collect();
    Ok((recs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_handles_ties_and_order() {
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.5], &[true]), None);
    }
}
