//! BC + MGAIL training under a curriculum, with per-bucket loss accounting,
//! periodic validation and checkpoint selection.

use std::collections::BTreeMap;

use hardcase_nn::{backward, Adam, AdamConfig, Bound, Checkpoint, Gmm, GmmVars, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{encode_action, obs_tensor, observe_vars, step_vars, AgentConfig, PlanningAgent, StateVars, ACTION_DIM};
use crate::buckets::{BucketStore, Sampled};
use crate::curricula::{Curriculum, DataRegime, StrategySpec, WindowRecord};
use crate::eval::{evaluate_segments, mean_metrics, AgentPolicy, MetricSet};
use crate::features::observe;
use crate::seeding::{stream_rng, Stream};
use crate::world::{RunSegment, FRAMES};
use crate::{CoreError, Result};

/// What the discriminator update descends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorObjective {
    /// Binary cross-entropy with expert states labeled 1 and policy states 0.
    #[default]
    CrossEntropy,
    /// [`discriminator_loss`] itself. It has no interior minimum, so on
    /// indistinguishable states the discriminator saturates.
    AsWritten,
}

/// Where MGAIL rollouts branch off the log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPoint {
    /// Frame 0 of every segment.
    Start,
    /// A uniformly drawn frame that leaves room for the horizon.
    #[default]
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub lambda_bc: f64,
    pub horizon: usize,
    /// Expert frames per example in the BC term, drawn uniformly from the
    /// whole segment.
    pub bc_frames: usize,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub eval_every: u64,
    /// No checkpoint is evaluated before this step.
    pub select_after: u64,
    pub validation_rollouts: usize,
    pub branch: BranchPoint,
    pub discriminator: DiscriminatorObjective,
    pub agent: AgentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_bc: 1.0,
            horizon: 10,
            bc_frames: 10,
            batch: 64,
            steps: 20_000,
            lr: 1e-3,
            eval_every: 1_000,
            select_after: 10_000,
            validation_rollouts: 16,
            branch: BranchPoint::Random,
            discriminator: DiscriminatorObjective::CrossEntropy,
            agent: AgentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
        if !(self.lambda_p >= 0.0 && self.lambda_bc >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.horizon == 0 || self.horizon > FRAMES - 1 {
            return bad("horizon must be in 1..=99");
        }
        if self.batch == 0 || self.bc_frames == 0 || self.steps == 0 || self.eval_every == 0 || self.validation_rollouts == 0 {
            return bad("batch, steps, eval_every and validation_rollouts must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.select_after > self.steps {
            return bad("select_after exceeds steps");
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `actions` per row (`n x 1`).
pub fn bc_nll(tape: &mut Tape, gmm: &Gmm, head: &GmmVars, actions: Var) -> Result<Var> {
    let lp = gmm.log_prob(tape, head, actions)?;
    Ok(tape.neg(lp))
}

/// Mean negative log-likelihood over the batch.
pub fn bc_loss(tape: &mut Tape, gmm: &Gmm, head: &GmmVars, actions: Var) -> Result<Var> {
    let nll = bc_nll(tape, gmm, head, actions)?;
    Ok(tape.mean(nll))
}

/// Supplies normalized ego-frame actions (`n x 3`) during a rollout.
pub trait ActionSource {
    fn actions(&mut self, tape: &mut Tape, gmm: &Gmm, head: &GmmVars, state: &StateVars, k: usize) -> Result<Var>;
}

/// Pre-drawn randomness for one rollout: a component uniform and a
/// standard-normal triple per row and step.
#[derive(Clone, Debug)]
pub struct RolloutNoise {
    pub uniforms: Vec<Vec<f64>>,
    pub normals: Vec<Tensor>,
}

impl RolloutNoise {
    pub fn draw(rows: usize, horizon: usize, rng: &mut impl Rng) -> Self {
        let uniforms = (0..horizon).map(|_| (0..rows).map(|_| rng.random::<f64>()).collect()).collect();
        let normals = (0..horizon)
            .map(|_| {
                let d = (0..rows * ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::from_vec(rows, ACTION_DIM, d).expect("noise shape")
            })
            .collect();
        Self { uniforms, normals }
    }

    pub fn zeros(rows: usize, horizon: usize) -> Self {
        Self { uniforms: vec![vec![0.5; rows]; horizon], normals: vec![Tensor::zeros(rows, ACTION_DIM); horizon] }
    }
}

/// Reparameterized mixture samples; the component is picked from detached
/// weights, the draw `mu + sigma * z` stays on the tape.
pub struct PolicySampler {
    pub noise: RolloutNoise,
}

impl ActionSource for PolicySampler {
    fn actions(&mut self, tape: &mut Tape, gmm: &Gmm, head: &GmmVars, _: &StateVars, k: usize) -> Result<Var> {
        let lw = tape.value(head.log_weights).clone();
        let comps: Vec<usize> = (0..lw.rows())
            .map(|r| {
                let u = self.noise.uniforms[k][r];
                let mut acc = 0.0;
                let row = lw.row_slice(r);
                for (c, l) in row.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        return c;
                    }
                }
                row.len() - 1
            })
            .collect();
        let z = tape.constant(self.noise.normals[k].clone());
        Ok(gmm.sample(tape, head, &comps, z)?)
    }
}

/// Replays logged expert actions, re-encoded at the rollout heading.
pub struct ExpertActions<'a> {
    pub segments: &'a [&'a RunSegment],
    pub starts: &'a [usize],
}

impl ActionSource for ExpertActions<'_> {
    fn actions(&mut self, tape: &mut Tape, _: &Gmm, _: &GmmVars, state: &StateVars, k: usize) -> Result<Var> {
        let states = state.values(tape);
        let data = self
            .segments
            .iter()
            .zip(self.starts)
            .zip(&states)
            .flat_map(|((s, &t0), st)| encode_action(&s.expert_actions[t0 + k], st))
            .collect();
        Ok(tape.constant(Tensor::from_vec(self.segments.len(), ACTION_DIM, data)?))
    }
}

/// A differentiable rollout: states `0..=H` and observations of states
/// `1..=H`.
pub struct Rollout {
    pub states: Vec<StateVars>,
    pub observations: Vec<Var>,
}

/// Branches each segment at `starts[i]` and unrolls `horizon` policy steps
/// through the taped dynamics. Other agents follow the log.
pub fn mgail_rollout(
    agent: &PlanningAgent,
    tape: &mut Tape,
    policy: &Bound,
    segments: &[&RunSegment],
    starts: &[usize],
    horizon: usize,
    source: &mut dyn ActionSource,
) -> Result<Rollout> {
    if horizon == 0 || segments.len() != starts.len() || segments.is_empty() {
        return Err(CoreError::Invalid("rollout needs a horizon and one start per segment".into()));
    }
    if starts.iter().any(|&t0| t0 + horizon > FRAMES - 1) {
        return Err(CoreError::Invalid(format!("horizon {horizon} runs past the segment end")));
    }
    let scenes: Vec<_> = segments.iter().map(|s| &s.scenario).collect();
    let init: Vec<_> = segments.iter().zip(starts).map(|(s, &t0)| s.ego_track[t0]).collect();
    let mut state = StateVars::constant(tape, &init);
    let mut times = starts.to_vec();
    let mut obs = observe_vars(tape, &state, &scenes, &times)?;
    let mut out = Rollout { states: vec![state], observations: Vec::with_capacity(horizon) };
    for k in 0..horizon {
        let head = agent.policy_head(tape, policy, obs)?;
        let a = source.actions(tape, &agent.gmm, &head, &state, k)?;
        state = step_vars(tape, &state, a)?;
        times.iter_mut().for_each(|t| *t += 1);
        obs = observe_vars(tape, &state, &scenes, &times)?;
        out.states.push(state);
        out.observations.push(obs);
    }
    Ok(out)
}

/// Per-row `-log D(s)` averaged over the rollout states (`n x 1`).
pub fn mgail_policy_losses(agent: &PlanningAgent, tape: &mut Tape, disc: &Bound, rollout: &Rollout) -> Result<Var> {
    let mut cols = Vec::with_capacity(rollout.observations.len());
    for &o in &rollout.observations {
        let logit = agent.discriminator_logits(tape, disc, o)?;
        let neg = tape.neg(logit);
        cols.push(tape.softplus(neg));
    }
    let h = cols.len() as f64;
    let all = tape.concat_cols(&cols)?;
    let sum = tape.sum_cols(all);
    Ok(tape.scale(sum, 1.0 / h))
}

pub fn mgail_policy_loss(agent: &PlanningAgent, tape: &mut Tape, disc: &Bound, rollout: &Rollout) -> Result<Var> {
    let per = mgail_policy_losses(agent, tape, disc, rollout)?;
    Ok(tape.mean(per))
}

/// `E_pi[log D] + E_E[log(1 - D)]` from logits, each expectation optionally
/// weighted per row. Training descends this.
pub fn discriminator_loss(
    tape: &mut Tape,
    policy_logits: Var,
    expert_logits: Var,
    policy_weights: Option<Var>,
    expert_weights: Option<Var>,
) -> Result<Var> {
    let neg = tape.neg(policy_logits);
    let sp = tape.softplus(neg);
    let mut log_d = tape.neg(sp);
    let sp = tape.softplus(expert_logits);
    let mut log_1md = tape.neg(sp);
    if let Some(w) = policy_weights {
        log_d = tape.mul(log_d, w)?;
    }
    if let Some(w) = expert_weights {
        log_1md = tape.mul(log_1md, w)?;
    }
    let a = tape.mean(log_d);
    let b = tape.mean(log_1md);
    Ok(tape.add(a, b)?)
}

/// `-E_E[log D] - E_pi[log(1 - D)]` from logits, rows optionally weighted.
pub fn discriminator_cross_entropy(
    tape: &mut Tape,
    policy_logits: Var,
    expert_logits: Var,
    policy_weights: Option<Var>,
    expert_weights: Option<Var>,
) -> Result<Var> {
    let mut pol = tape.softplus(policy_logits);
    let neg = tape.neg(expert_logits);
    let mut exp = tape.softplus(neg);
    if let Some(w) = policy_weights {
        pol = tape.mul(pol, w)?;
    }
    if let Some(w) = expert_weights {
        exp = tape.mul(exp, w)?;
    }
    let a = tape.mean(pol);
    let b = tape.mean(exp);
    Ok(tape.add(a, b)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub bc: f64,
    pub policy: f64,
    pub discriminator: f64,
}

/// Per-example losses for one batch; everything detached.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLosses {
    pub buckets: Vec<usize>,
    pub bc: Vec<f64>,
    pub policy: Vec<f64>,
    /// `lambda_p * policy + lambda_bc * bc`, before IS multipliers.
    pub total: Vec<f64>,
    pub discriminator: f64,
}

/// The agent plus its optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub agent: PlanningAgent,
    pub policy_opt: Adam,
    pub disc_opt: Adam,
}

impl Learner {
    pub fn new(agent: PlanningAgent, lr: f64) -> Self {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let policy_opt = Adam::new(&agent.policy_params, cfg);
        let disc_opt = Adam::new(&agent.discriminator_params, cfg);
        Self { agent, policy_opt, disc_opt }
    }

    /// One update on `batch` with the given per-bucket loss multipliers.
    pub fn step(&mut self, cfg: &TrainConfig, batch: &[Sampled], multipliers: &[f64], step: u64, rng: &mut ChaCha8Rng) -> Result<BatchLosses> {
        let h = cfg.horizon;
        let n = batch.len();
        let segments: Vec<&RunSegment> = batch.iter().map(|s| s.record.segment.as_ref()).collect();
        let starts: Vec<usize> = match cfg.branch {
            BranchPoint::Start => vec![0; n],
            BranchPoint::Random => (0..n).map(|_| rng.random_range(0..=FRAMES - 1 - h)).collect(),
        };
        let noise = RolloutNoise::draw(n, h, rng);
        let frames_rng = rng;
        let m: Vec<f64> = batch.iter().map(|s| multipliers[s.bucket]).collect();
        let agent = &self.agent;

        let mut tape = Tape::new();
        let bp = tape.bind(&agent.policy_params);
        let bd = tape.bind(&agent.discriminator_params);

        // BC on random expert frames, example-major rows.
        let f = cfg.bc_frames;
        let mut obs = Vec::with_capacity(n * f);
        let mut acts = Vec::with_capacity(n * f * ACTION_DIM);
        for s in &segments {
            for _ in 0..f {
                let t = frames_rng.random_range(0..FRAMES - 1);
                let st = s.ego_track[t];
                obs.push(observe(&s.scenario, t, &st));
                acts.extend(encode_action(&s.expert_actions[t], &st));
            }
        }
        let x = tape.constant(obs_tensor(&obs));
        let a = tape.constant(Tensor::from_vec(n * f, ACTION_DIM, acts)?);
        let head = agent.policy_head(&mut tape, &bp, x)?;
        let nll = bc_nll(&mut tape, &agent.gmm, &head, a)?;
        let bc = tape.mean_row_groups(nll, f)?;

        let mut sampler = PolicySampler { noise };
        let rollout = mgail_rollout(agent, &mut tape, &bp, &segments, &starts, h, &mut sampler)?;
        let lp = mgail_policy_losses(agent, &mut tape, &bd, &rollout)?;

        let lp_s = tape.scale(lp, cfg.lambda_p);
        let bc_s = tape.scale(bc, cfg.lambda_bc);
        let per = tape.add(lp_s, bc_s)?;
        let mv = tape.constant(Tensor::column(m.clone()));
        let weighted = tape.mul(per, mv)?;
        let loss = tape.mean(weighted);
        let total = tape.value(loss).item();
        if !total.is_finite() {
            return Err(CoreError::Divergence { step, detail: format!("policy loss is {total}") });
        }
        let g = backward(&tape, loss)?;
        let policy_grads = g.of(&tape, &bp);

        // Discriminator on detached states: rollout steps 1..=H, step-major
        // rows, against the logged states at the same frames.
        let pol_rows: Vec<&Tensor> = rollout.observations.iter().map(|&o| tape.value(o)).collect();
        let mut pol = Vec::with_capacity(n * h * crate::features::OBS_DIM);
        for t in &pol_rows {
            pol.extend_from_slice(t.data());
        }
        let mut exp = Vec::with_capacity(n * h);
        for k in 1..=h {
            for (s, &t0) in segments.iter().zip(&starts) {
                exp.push(observe(&s.scenario, t0 + k, &s.ego_track[t0 + k]));
            }
        }
        let row_w: Vec<f64> = (0..h).flat_map(|_| m.iter().copied()).collect();
        let bc_vals = tape.value(bc).data().to_vec();
        let lp_vals = tape.value(lp).data().to_vec();
        let total_vals = tape.value(per).data().to_vec();
        drop(pol_rows);

        let mut dt = Tape::new();
        let bd2 = dt.bind(&agent.discriminator_params);
        let po = dt.constant(Tensor::from_vec(n * h, crate::features::OBS_DIM, pol)?);
        let eo = dt.constant(obs_tensor(&exp));
        let pl = agent.discriminator_logits(&mut dt, &bd2, po)?;
        let el = agent.discriminator_logits(&mut dt, &bd2, eo)?;
        let w = dt.constant(Tensor::column(row_w));
        let ld = match cfg.discriminator {
            DiscriminatorObjective::CrossEntropy => discriminator_cross_entropy(&mut dt, pl, el, Some(w), Some(w))?,
            DiscriminatorObjective::AsWritten => discriminator_loss(&mut dt, pl, el, Some(w), Some(w))?,
        };
        let ld_val = dt.value(ld).item();
        if !ld_val.is_finite() {
            return Err(CoreError::Divergence { step, detail: format!("discriminator loss is {ld_val}") });
        }
        let gd = backward(&dt, ld)?;
        let disc_grads = gd.of(&dt, &bd2);

        if policy_grads.iter().chain(&disc_grads).any(|t| !t.is_finite()) {
            return Err(CoreError::Divergence { step, detail: "non-finite gradient".into() });
        }
        self.policy_opt.step(&mut self.agent.policy_params, &policy_grads)?;
        self.disc_opt.step(&mut self.agent.discriminator_params, &disc_grads)?;
        if !self.agent.policy_params.is_finite() || !self.agent.discriminator_params.is_finite() {
            return Err(CoreError::Divergence { step, detail: "non-finite parameters after update".into() });
        }
        Ok(BatchLosses { buckets: batch.iter().map(|s| s.bucket).collect(), bc: bc_vals, policy: lp_vals, total: total_vals, discriminator: ld_val })
    }

    pub fn checkpoint(&self, step: u64, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let mut ck = Checkpoint { step, metrics, ..Default::default() };
        ck.params.insert("policy".into(), self.agent.policy_params.clone());
        ck.params.insert("discriminator".into(), self.agent.discriminator_params.clone());
        ck.optimizers.insert("policy".into(), self.policy_opt.clone());
        ck.optimizers.insert("discriminator".into(), self.disc_opt.clone());
        ck
    }
}

/// Rebuilds an agent from a checkpoint written by [`train`].
pub fn agent_from_checkpoint(config: &AgentConfig, ck: &Checkpoint) -> Result<PlanningAgent> {
    let mut rng = stream_rng(Stream::Training, &[0]);
    let mut agent = PlanningAgent::new(config, &mut rng);
    let replace = |slot: &mut ParamSet, name: &str| -> Result<()> {
        let p = ck.param_set(name)?;
        let same = p.names() == slot.names() && p.tensors().iter().zip(slot.tensors()).all(|(a, b)| a.same_shape(b));
        if !same {
            return Err(CoreError::Invalid(format!("checkpoint {name} parameters do not match the agent config")));
        }
        *slot = p.clone();
        Ok(())
    };
    replace(&mut agent.policy_params, "policy")?;
    replace(&mut agent.discriminator_params, "discriminator")?;
    Ok(agent)
}

/// Per-bucket detached policy losses seen during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl LossLog {
    fn push(&mut self, bucket: usize, v: f64) {
        if self.sums.len() <= bucket {
            self.sums.resize(bucket + 1, 0.0);
            self.counts.resize(bucket + 1, 0);
        }
        self.sums[bucket] += v;
        self.counts[bucket] += 1;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub steps: Vec<StepLog>,
    pub windows: Vec<WindowRecord>,
    pub bucket_losses: LossLog,
    pub final_agent: PlanningAgent,
}

pub fn validation_metrics(agent: &PlanningAgent, validation: &[&RunSegment], rollouts: usize, seed: u64, workers: usize) -> Result<BTreeMap<String, f64>> {
    let per = evaluate_segments(&AgentPolicy { agent, greedy: false }, validation, rollouts, seed, workers)?;
    let m = mean_metrics(&per.iter().collect::<Vec<_>>());
    Ok(MetricSet::KEYS.iter().zip(m.values()).map(|(k, v)| (k.to_string(), v)).collect())
}

/// Options that do not change what is learned.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub workers: usize,
    /// Logs detached per-bucket losses even for fixed strategies.
    pub record_losses: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, record_losses: true }
    }
}

/// The training loop: window refresh, weighted bucket sampling, per-example
/// losses, detached loss recording, IS multipliers and descent updates, with
/// validation every `eval_every` steps from `select_after` on.
pub fn train(
    store: &mut BucketStore,
    validation: &[&RunSegment],
    spec: &StrategySpec,
    config: &TrainConfig,
    seed: u64,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if validation.is_empty() {
        return Err(CoreError::Invalid("no validation segments".into()));
    }
    match spec.regime() {
        DataRegime::Full => store.restrict(1.0)?,
        DataRegime::Fraction(f) => store.restrict(f)?,
        DataRegime::TopOfLast(f) => store.keep_top_of_last(f)?,
    }
    let mut curriculum = Curriculum::new(spec.clone(), &store.stats(), store.thresholds())?;
    let mut init_rng = stream_rng(Stream::Training, &[seed, 0]);
    let mut learner = Learner::new(PlanningAgent::new(&config.agent, &mut init_rng), config.lr);
    let mut sample_rng = stream_rng(Stream::Training, &[seed, 1]);
    let mut step_rng = stream_rng(Stream::Training, &[seed, 2]);
    let mut logs = Vec::with_capacity(config.steps as usize);
    let mut checkpoints = Vec::new();
    let mut bucket_losses = LossLog::default();
    for step in 1..=config.steps {
        let batch = store.sample_batch(curriculum.weights(), config.batch, &mut sample_rng)?;
        curriculum.check_batch(&batch.iter().map(|b| b.bucket).collect::<Vec<_>>())?;
        let losses = learner.step(config, &batch, curriculum.multipliers(), step, &mut step_rng)?;
        // The adaptive strategies see the full per-example policy objective.
        for (&b, &l) in losses.buckets.iter().zip(&losses.total) {
            if curriculum.is_adaptive() {
                curriculum.record(b, l);
            }
            if opts.record_losses {
                bucket_losses.push(b, l);
            }
        }
        curriculum.advance()?;
        let n = losses.bc.len() as f64;
        logs.push(StepLog {
            step,
            bc: losses.bc.iter().sum::<f64>() / n,
            policy: losses.policy.iter().sum::<f64>() / n,
            discriminator: losses.discriminator,
        });
        if step >= config.select_after && step % config.eval_every == 0 {
            let metrics = validation_metrics(&learner.agent, validation, config.validation_rollouts, seed, opts.workers)?;
            checkpoints.push(learner.checkpoint(step, metrics));
        }
    }
    if checkpoints.is_empty() {
        let metrics = validation_metrics(&learner.agent, validation, config.validation_rollouts, seed, opts.workers)?;
        checkpoints.push(learner.checkpoint(config.steps, metrics));
    }
    Ok(TrainOutcome {
        checkpoints,
        steps: logs,
        windows: curriculum.trajectory().to_vec(),
        bucket_losses,
        final_agent: learner.agent,
    })
}

/// Lowest validation collision + off-road rate; ties go to the later step.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<(&Checkpoint, f64)> = None;
    for ck in checkpoints {
        let get = |k: &str| {
            ck.metrics
                .get(k)
                .copied()
                .ok_or_else(|| CoreError::Invalid(format!("checkpoint at step {} has no {k} metric", ck.step)))
        };
        let v = get("collision")? + get("offroad")?;
        match best {
            Some((b, bv)) if v > bv || (v == bv && ck.step < b.step) => {}
            _ => best = Some((ck, v)),
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| CoreError::Invalid("no checkpoints to select from".into()))
}
