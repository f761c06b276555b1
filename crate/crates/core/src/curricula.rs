//! Bucket sampling strategies: fixed baselines, score-range weights, a
//! geometric schedule, and loss-adaptive importance sampling (with an
//! optional distributionally robust reweighting).

use serde::{Deserialize, Serialize};

use crate::buckets::{BucketStats, BucketWeights, DecileThresholds, NUM_BUCKETS};
use crate::{CoreError, Result};

pub const DEFAULT_ALPHA: f64 = 0.999975;
pub const DEFAULT_EPSILON: f64 = 3.125e-4;
pub const DEFAULT_WINDOW: u64 = 1000;

/// A strategy and exactly the hyperparameters it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStrategy", into = "RawStrategy")]
pub enum StrategySpec {
    BaselineAll,
    Baseline10,
    BaselineLowest10,
    Highest10,
    Highest1,
    HighestPlusLowest,
    UniformRange,
    GeometricSchedule { alpha: f64, q_init: Option<Vec<f64>>, q_final: Option<Vec<f64>> },
    PerAdaptive { gamma: f64, beta: f64, epsilon: f64, window: u64 },
    DroAdaptive { gamma: f64, beta: f64, epsilon: f64, window: u64, rho: f64 },
}

/// Flat config form: `kind` plus optional hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStrategy {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_init: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_final: Option<Vec<f64>>,
}

impl TryFrom<RawStrategy> for StrategySpec {
    type Error = CoreError;

    fn try_from(r: RawStrategy) -> Result<Self> {
        let uses: &[&str] = match r.kind.as_str() {
            "geometric_schedule" => &["alpha", "q_init", "q_final"],
            "per_adaptive" => &["gamma", "beta", "epsilon", "window"],
            "dro_adaptive" => &["gamma", "beta", "epsilon", "window", "rho"],
            _ => &[],
        };
        let given = [
            ("alpha", r.alpha.is_some()),
            ("gamma", r.gamma.is_some()),
            ("beta", r.beta.is_some()),
            ("rho", r.rho.is_some()),
            ("epsilon", r.epsilon.is_some()),
            ("window", r.window.is_some()),
            ("q_init", r.q_init.is_some()),
            ("q_final", r.q_final.is_some()),
        ];
        if let Some((name, _)) = given.iter().find(|(n, g)| *g && !uses.contains(n)) {
            return Err(CoreError::Invalid(format!("{name} is not used by strategy {}", r.kind)));
        }
        let gamma = r.gamma.unwrap_or(1.0);
        let beta = r.beta.unwrap_or(1.0);
        let epsilon = r.epsilon.unwrap_or(DEFAULT_EPSILON);
        let window = r.window.unwrap_or(DEFAULT_WINDOW);
        let spec = match r.kind.as_str() {
            "baseline_all" => Self::BaselineAll,
            "baseline_10" => Self::Baseline10,
            "baseline_lowest_10" => Self::BaselineLowest10,
            "highest_10" => Self::Highest10,
            "highest_1" => Self::Highest1,
            "highest_plus_lowest" => Self::HighestPlusLowest,
            "uniform_range" => Self::UniformRange,
            "geometric_schedule" => Self::GeometricSchedule {
                alpha: r.alpha.unwrap_or(DEFAULT_ALPHA),
                q_init: r.q_init,
                q_final: r.q_final,
            },
            "per_adaptive" => Self::PerAdaptive { gamma, beta, epsilon, window },
            "dro_adaptive" => Self::DroAdaptive {
                gamma,
                beta,
                epsilon,
                window,
                rho: r.rho.ok_or_else(|| CoreError::Invalid("dro_adaptive needs rho".into()))?,
            },
            other => return Err(CoreError::Invalid(format!("unknown strategy kind {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<StrategySpec> for RawStrategy {
    fn from(s: StrategySpec) -> Self {
        let mut r = RawStrategy { kind: s.name().to_string(), ..Default::default() };
        match s {
            StrategySpec::GeometricSchedule { alpha, q_init, q_final } => {
                r.alpha = Some(alpha);
                r.q_init = q_init;
                r.q_final = q_final;
            }
            StrategySpec::PerAdaptive { gamma, beta, epsilon, window } => {
                (r.gamma, r.beta, r.epsilon, r.window) = (Some(gamma), Some(beta), Some(epsilon), Some(window));
            }
            StrategySpec::DroAdaptive { gamma, beta, epsilon, window, rho } => {
                (r.gamma, r.beta, r.epsilon, r.window, r.rho) = (Some(gamma), Some(beta), Some(epsilon), Some(window), Some(rho));
            }
            _ => {}
        }
        r
    }
}

/// Which records of each bucket a strategy trains on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DataRegime {
    /// Every record of every bucket.
    Full,
    /// A fixed prefix of each bucket (a stratified subsample).
    Fraction(f64),
    /// Only the top fraction of the highest bucket.
    TopOfLast(f64),
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BaselineAll => "baseline_all",
            Self::Baseline10 => "baseline_10",
            Self::BaselineLowest10 => "baseline_lowest_10",
            Self::Highest10 => "highest_10",
            Self::Highest1 => "highest_1",
            Self::HighestPlusLowest => "highest_plus_lowest",
            Self::UniformRange => "uniform_range",
            Self::GeometricSchedule { .. } => "geometric_schedule",
            Self::PerAdaptive { .. } => "per_adaptive",
            Self::DroAdaptive { .. } => "dro_adaptive",
        }
    }

    pub fn regime(&self) -> DataRegime {
        match self {
            Self::BaselineAll | Self::BaselineLowest10 | Self::Highest10 | Self::HighestPlusLowest => DataRegime::Full,
            Self::Highest1 => DataRegime::TopOfLast(0.1),
            _ => DataRegime::Fraction(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        match self {
            Self::GeometricSchedule { alpha, q_init, q_final } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return bad(format!("alpha must be in (0, 1), got {alpha}"));
                }
                for q in [q_init, q_final].into_iter().flatten() {
                    if q.len() != NUM_BUCKETS || q.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return bad(format!("schedule endpoints need {NUM_BUCKETS} non-negative values"));
                    }
                }
            }
            Self::PerAdaptive { gamma, beta, epsilon, window } | Self::DroAdaptive { gamma, beta, epsilon, window, .. } => {
                if !(*gamma > 0.0) {
                    return bad(format!("gamma must be positive, got {gamma}"));
                }
                if !(0.0..=1.0).contains(beta) {
                    return bad(format!("beta must be in [0, 1], got {beta}"));
                }
                if !(*epsilon > 0.0) {
                    return bad(format!("epsilon must be positive, got {epsilon}"));
                }
                if *window == 0 {
                    return bad("window must be at least 1".into());
                }
                if let Self::DroAdaptive { rho, .. } = self {
                    if !(0.0..=1.0).contains(rho) {
                        return bad(format!("rho must be in [0, 1], got {rho}"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn fixed_weights(spec: &StrategySpec) -> Result<BucketWeights> {
    let n = NUM_BUCKETS;
    Ok(match spec {
        StrategySpec::BaselineAll | StrategySpec::Baseline10 => BucketWeights::uniform(n),
        StrategySpec::BaselineLowest10 => BucketWeights::one_hot(n, 0),
        StrategySpec::Highest10 | StrategySpec::Highest1 => BucketWeights::one_hot(n, n - 1),
        StrategySpec::HighestPlusLowest => {
            let mut w = vec![0.0; n];
            w[0] = 0.5;
            w[n - 1] = 0.5;
            BucketWeights::new(w)?
        }
        other => return Err(CoreError::Invalid(format!("{} is not a fixed strategy", other.name()))),
    })
}

/// Unnormalized per-bucket score ranges `t_k - t_{k-1}`.
pub fn score_ranges(thresholds: &DecileThresholds) -> Vec<f64> {
    thresholds.bounds().windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn uniform_range_weights(thresholds: &DecileThresholds) -> Result<BucketWeights> {
    let r = score_ranges(thresholds);
    if r.iter().sum::<f64>() <= 0.0 {
        return Err(CoreError::Invalid("score range is zero".into()));
    }
    BucketWeights::new(normalize(&r))
}

fn normalize(v: &[f64]) -> Vec<f64> {
    if v.windows(2).all(|w| w[0] == w[1]) {
        return vec![1.0 / v.len() as f64; v.len()];
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Per-bucket schedule value `(q_init - q_final) * alpha^t + q_final`.
pub fn geometric_raw(t: u64, q_init: &[f64], q_final: &[f64], alpha: f64) -> Vec<f64> {
    let a = alpha.powf(t as f64);
    q_init.iter().zip(q_final).map(|(&i, &f)| (i - f) * a + f).collect()
}

pub fn geometric_weights(t: u64, q_init: &[f64], q_final: &[f64], alpha: f64) -> Result<BucketWeights> {
    BucketWeights::new(normalize(&geometric_raw(t, q_init, q_final, alpha)))
}

/// Per-bucket losses recorded over the current window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBuffers {
    buffers: Vec<Vec<f64>>,
}

impl LossBuffers {
    pub fn new(n: usize) -> Self {
        Self { buffers: vec![Vec::new(); n] }
    }

    pub fn push(&mut self, bucket: usize, loss: f64) {
        self.buffers[bucket].push(loss);
    }

    pub fn means(&self) -> Vec<Option<f64>> {
        self.buffers
            .iter()
            .map(|b| (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.iter().all(Vec::is_empty)
    }

    pub fn clear(&mut self) {
        self.buffers.iter_mut().for_each(Vec::clear);
    }
}

/// Sampling weights from windowed mean losses: `exp(gamma * mean)` for
/// sampled buckets and a floor of `epsilon` for unsampled ones, normalized.
/// Clears the buffers.
pub fn per_update(buffers: &mut LossBuffers, gamma: f64, epsilon: f64) -> Result<BucketWeights> {
    let means = buffers.means();
    if means.iter().all(Option::is_none) {
        return Err(CoreError::Invalid("all loss buffers are empty".into()));
    }
    let logs: Vec<f64> = means.iter().map(|m| m.map_or(epsilon.ln(), |m| gamma * m)).collect();
    buffers.clear();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    BucketWeights::new(normalize(&raw))
}

/// Loss multipliers `(1 / (N q_i))^beta`. Buckets with zero probability get
/// 0 unless they appear in `present`, which is an error.
pub fn is_weights(q: &BucketWeights, beta: f64, present: &[usize]) -> Result<Vec<f64>> {
    let p = normalize(q.as_slice());
    let n = p.len() as f64;
    if let Some(&k) = present.iter().find(|&&k| p[k] == 0.0) {
        return Err(CoreError::ZeroProbability(k));
    }
    Ok(p.iter().map(|&pi| if pi == 0.0 { 0.0 } else { (1.0 / (n * pi)).powf(beta) }).collect())
}

/// Worst-case bucket distribution inside a chi-square ball of `radius`
/// around `p0`, maximizing the expected loss.
pub fn chi_square_best_response(p0: &[f64], losses: &[f64], radius: f64) -> Vec<f64> {
    let dist = |p: &[f64]| p.iter().zip(p0).filter(|(_, &b)| b > 0.0).map(|(a, b)| (a - b) * (a - b) / b).sum::<f64>();
    // Stationary point for multiplier `lambda`: p_i = p0_i (1 + (L_i - eta) / lambda)_+,
    // with eta chosen so the result sums to one.
    let at = |lambda: f64| -> Vec<f64> {
        let val = |eta: f64| p0.iter().zip(losses).map(|(&b, &l)| b * (1.0 + (l - eta) / lambda).max(0.0)).collect::<Vec<_>>();
        let lmax = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (losses.iter().copied().fold(f64::INFINITY, f64::min) - lambda, lmax + lambda);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if val(mid).iter().sum::<f64>() > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = val(0.5 * (lo + hi));
        let s: f64 = p.iter().sum();
        p.into_iter().map(|v| v / s).collect()
    };
    // Vertex on the best bucket when the ball reaches it.
    let best = (0..losses.len()).filter(|&i| p0[i] > 0.0).max_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap_or(0);
    let mut vertex = vec![0.0; p0.len()];
    vertex[best] = 1.0;
    if dist(&vertex) <= radius {
        return vertex;
    }
    let spread = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) - losses.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (1e-12 * spread.max(1e-300), 1e6 * spread.max(1e-300));
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if dist(&at(mid)) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

/// Blends importance weights with a chi-square best response whose ball
/// radius grows with `rho` (full concentration reachable at `rho = 1` from
/// uniform). Buckets without a recorded loss take the mean recorded loss.
pub fn dro_weights(means: &[Option<f64>], q: &BucketWeights, beta: f64, rho: f64) -> Result<Vec<f64>> {
    let w = is_weights(q, beta, &[])?;
    let seen: Vec<f64> = means.iter().flatten().copied().collect();
    if rho == 0.0 || seen.is_empty() {
        return Ok(w);
    }
    let fill = seen.iter().sum::<f64>() / seen.len() as f64;
    let losses: Vec<f64> = means.iter().map(|m| m.unwrap_or(fill)).collect();
    if losses.windows(2).all(|p| p[0] == p[1]) {
        return Ok(w);
    }
    let qn = normalize(q.as_slice());
    // Effective bucket distribution under the importance weights.
    let mass: f64 = qn.iter().zip(&w).map(|(a, b)| a * b).sum();
    let p0: Vec<f64> = qn.iter().zip(&w).map(|(a, b)| a * b / mass).collect();
    let radius = rho * (losses.len() - 1) as f64;
    let p = chi_square_best_response(&p0, &losses, radius);
    Ok((0..w.len())
        .map(|i| {
            let r = if qn[i] > 0.0 { p[i] / qn[i] * mass } else { 0.0 };
            (1.0 - rho) * w[i] + rho * r
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub step: u64,
    pub weights: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub mean_losses: Vec<Option<f64>>,
}

/// Strategy state owned by the training loop.
#[derive(Clone, Debug)]
pub struct Curriculum {
    spec: StrategySpec,
    step: u64,
    q: BucketWeights,
    multipliers: Vec<f64>,
    last_means: Vec<Option<f64>>,
    buffers: LossBuffers,
    q_init: Vec<f64>,
    q_final: Vec<f64>,
    trajectory: Vec<WindowRecord>,
}

impl Curriculum {
    pub fn new(spec: StrategySpec, stats: &[BucketStats], thresholds: &DecileThresholds) -> Result<Self> {
        spec.validate()?;
        let n = NUM_BUCKETS;
        let ones = vec![1.0; n];
        let mut q_init = ones.clone();
        let mut q_final = ones.clone();
        let q = match &spec {
            StrategySpec::UniformRange => uniform_range_weights(thresholds)?,
            StrategySpec::GeometricSchedule { q_init: qi, q_final: qf, .. } => {
                q_init = qi.clone().unwrap_or(ones);
                q_final = qf.clone().unwrap_or_else(|| stats.iter().map(|s| s.mean).collect());
                BucketWeights::new(normalize(&q_init))?
            }
            StrategySpec::PerAdaptive { .. } | StrategySpec::DroAdaptive { .. } => BucketWeights::uniform(n),
            fixed => fixed_weights(fixed)?,
        };
        Ok(Self {
            spec,
            step: 0,
            q,
            multipliers: vec![1.0; n],
            last_means: vec![None; n],
            buffers: LossBuffers::new(n),
            q_init,
            q_final,
            trajectory: Vec::new(),
        })
    }

    pub fn spec(&self) -> &StrategySpec {
        &self.spec
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> &BucketWeights {
        &self.q
    }

    /// Per-bucket loss multipliers for the current step.
    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    pub fn last_means(&self) -> &[Option<f64>] {
        &self.last_means
    }

    pub fn trajectory(&self) -> &[WindowRecord] {
        &self.trajectory
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.spec, StrategySpec::PerAdaptive { .. } | StrategySpec::DroAdaptive { .. })
    }

    /// Records a detached policy loss for a bucket.
    pub fn record(&mut self, bucket: usize, loss: f64) {
        if self.is_adaptive() {
            self.buffers.push(bucket, loss);
        }
    }

    /// Checks that every bucket in a batch has positive probability.
    pub fn check_batch(&self, buckets: &[usize]) -> Result<()> {
        let p = self.q.as_slice();
        match buckets.iter().find(|&&k| p[k] == 0.0) {
            Some(&k) => Err(CoreError::ZeroProbability(k)),
            None => Ok(()),
        }
    }

    /// Moves to the next step, refreshing schedules and window updates.
    pub fn advance(&mut self) -> Result<()> {
        self.step += 1;
        match self.spec.clone() {
            StrategySpec::GeometricSchedule { alpha, .. } => {
                self.q = geometric_weights(self.step, &self.q_init, &self.q_final, alpha)?;
            }
            StrategySpec::PerAdaptive { gamma, beta, epsilon, window } => {
                if self.step.is_multiple_of(window) && !self.buffers.is_empty() {
                    self.last_means = self.buffers.means();
                    self.q = per_update(&mut self.buffers, gamma, epsilon)?;
                    self.multipliers = is_weights(&self.q, beta, &[])?;
                    self.log_window();
                }
            }
            StrategySpec::DroAdaptive { gamma, beta, epsilon, window, rho }
                if self.step.is_multiple_of(window) && !self.buffers.is_empty() => {
                    self.last_means = self.buffers.means();
                    self.q = per_update(&mut self.buffers, gamma, epsilon)?;
                    self.multipliers = dro_weights(&self.last_means, &self.q, beta, rho)?;
                    self.log_window();
                }
            _ => {}
        }
        Ok(())
    }

    fn log_window(&mut self) {
        self.trajectory.push(WindowRecord {
            step: self.step,
            weights: self.q.normalized(),
            multipliers: self.multipliers.clone(),
            mean_losses: self.last_means.clone(),
        });
    }
}
