//! Goal-conditioned planning agent: an MLP policy with a mixture head over
//! ego-frame delta actions, and a state-only discriminator.

use hardcase_nn::{Bound, Gmm, GmmParams, GmmVars, Mlp, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{observe, Observation, OBS_DIM};
use crate::world::{DeltaAction, EgoState, Scenario, DT, MAX_SPEED, MAX_YAW_RATE};
use crate::Result;

pub const ACTION_DIM: usize = 3;
/// Normalization of the (forward, lateral, heading) components. The forward
/// component is a residual from the constant-speed step `speed * DT`, so a
/// unit of it is 5 m/s^2 of acceleration.
pub const ACTION_SCALE: [f64; ACTION_DIM] = [0.05, 0.1, 0.02];
/// Keeps the speed derivative finite at a standstill.
const SPEED_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub policy_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub components: usize,
    /// Log-std floor of the mixture head, in normalized action units.
    pub log_std_min: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { policy_hidden: vec![64, 64], discriminator_hidden: vec![64, 64], components: 8, log_std_min: -1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningAgent {
    pub policy: Mlp,
    pub gmm: Gmm,
    pub policy_params: ParamSet,
    pub discriminator: Mlp,
    pub discriminator_params: ParamSet,
}

impl PlanningAgent {
    pub fn new(config: &AgentConfig, rng: &mut impl Rng) -> Self {
        let gmm = Gmm::new(config.components, ACTION_DIM).with_log_std_min(config.log_std_min);
        let mut sizes = vec![OBS_DIM];
        sizes.extend(&config.policy_hidden);
        sizes.push(gmm.head_width());
        let mut policy_params = ParamSet::new();
        let policy = Mlp::new(&mut policy_params, "policy", &sizes, rng);
        let mut dsizes = vec![OBS_DIM];
        dsizes.extend(&config.discriminator_hidden);
        dsizes.push(1);
        let mut discriminator_params = ParamSet::new();
        let discriminator = Mlp::new(&mut discriminator_params, "disc", &dsizes, rng);
        Self { policy, gmm, policy_params, discriminator, discriminator_params }
    }

    /// Taped mixture parameters for a batch of observations.
    pub fn policy_head(&self, tape: &mut Tape, bound: &Bound, obs: Var) -> Result<GmmVars> {
        let head = self.policy.forward(tape, bound, obs)?;
        Ok(self.gmm.split(tape, head)?)
    }

    /// Taped discriminator logits (`n x 1`); `D = sigmoid(logit)`.
    pub fn discriminator_logits(&self, tape: &mut Tape, bound: &Bound, obs: Var) -> Result<Var> {
        Ok(self.discriminator.forward(tape, bound, obs)?)
    }

    /// Untaped mixtures for a batch of observations.
    pub fn policy_mixtures(&self, obs: &Tensor) -> Result<Vec<GmmParams>> {
        let head = self.policy.infer(&self.policy_params, obs)?;
        Ok((0..head.rows()).map(|r| self.gmm.params_from_row(&head, r)).collect())
    }
}

pub fn obs_tensor(rows: &[Observation]) -> Tensor {
    let data = rows.iter().flat_map(|o| o.values.iter().copied()).collect();
    Tensor::from_vec(rows.len(), OBS_DIM, data).expect("observation width")
}

/// World-frame delta to the normalized ego-frame action taken from `state`.
pub fn encode_action(a: &DeltaAction, state: &EgoState) -> [f64; ACTION_DIM] {
    let (c, s) = (state.heading.cos(), state.heading.sin());
    [
        (a.dx * c + a.dy * s - state.speed * DT) / ACTION_SCALE[0],
        (-a.dx * s + a.dy * c) / ACTION_SCALE[1],
        a.dheading / ACTION_SCALE[2],
    ]
}

pub fn decode_action(u: &[f64], state: &EgoState) -> DeltaAction {
    let (c, s) = (state.heading.cos(), state.heading.sin());
    let f = state.speed * DT + u[0] * ACTION_SCALE[0];
    let l = u[1] * ACTION_SCALE[1];
    DeltaAction::new(f * c - l * s, f * s + l * c, u[2] * ACTION_SCALE[2])
}

/// Ego state as four `n x 1` tape columns.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub x: Var,
    pub y: Var,
    pub heading: Var,
    pub speed: Var,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, states: &[EgoState]) -> Self {
        let col = |f: fn(&EgoState) -> f64| Tensor::column(states.iter().map(f).collect());
        Self {
            x: tape.constant(col(|s| s.x)),
            y: tape.constant(col(|s| s.y)),
            heading: tape.constant(col(|s| s.heading)),
            speed: tape.constant(col(|s| s.speed)),
        }
    }

    pub fn values(&self, tape: &Tape) -> Vec<EgoState> {
        let (x, y, h, v) = (tape.value(self.x), tape.value(self.y), tape.value(self.heading), tape.value(self.speed));
        (0..x.rows())
            .map(|r| EgoState { x: x.data()[r], y: y.data()[r], heading: h.data()[r], speed: v.data()[r] })
            .collect()
    }

    fn as_slice(&self) -> [Var; 4] {
        [self.x, self.y, self.heading, self.speed]
    }
}

/// Observations of each row's state at time `times[r]` in `scenes[r]`,
/// differentiable with respect to the state columns.
pub fn observe_vars(tape: &mut Tape, state: &StateVars, scenes: &[&Scenario], times: &[usize]) -> Result<Var> {
    let states = state.values(tape);
    let obs: Vec<Observation> = states.iter().zip(scenes).zip(times).map(|((s, sc), &t)| observe(sc, t, s)).collect();
    let value = obs_tensor(&obs);
    let jacs: Vec<Tensor> = (0..4)
        .map(|j| {
            let data = obs.iter().flat_map(|o| o.jacobian.iter().map(move |g| g[j])).collect();
            Tensor::from_vec(obs.len(), OBS_DIM, data).expect("jacobian width")
        })
        .collect();
    Ok(tape.row_jacobian(value, &state.as_slice(), jacs)?)
}

/// Taped `s' = s + a` for normalized ego-frame actions (`n x 3`), matching
/// [`crate::world::step_dynamics`].
pub fn step_vars(tape: &mut Tape, s: &StateVars, action: Var) -> Result<StateVars> {
    let f = tape.slice_cols(action, 0, 1)?;
    let f = tape.scale(f, ACTION_SCALE[0]);
    let cruise = tape.scale(s.speed, DT);
    let f = tape.add(f, cruise)?;
    let l = tape.slice_cols(action, 1, 1)?;
    let l = tape.scale(l, ACTION_SCALE[1]);
    let dh = tape.slice_cols(action, 2, 1)?;
    let dh = tape.scale(dh, ACTION_SCALE[2]);
    let c = tape.cos(s.heading);
    let sn = tape.sin(s.heading);
    let fc = tape.mul(f, c)?;
    let ls = tape.mul(l, sn)?;
    let dx = tape.sub(fc, ls)?;
    let fs = tape.mul(f, sn)?;
    let lc = tape.mul(l, c)?;
    let dy = tape.add(fs, lc)?;
    let p = MAX_SPEED * DT;
    let w = MAX_YAW_RATE * DT;
    let dx = tape.clamp(dx, -p, p);
    let dy = tape.clamp(dy, -p, p);
    let dh = tape.clamp(dh, -w, w);
    let x = tape.add(s.x, dx)?;
    let y = tape.add(s.y, dy)?;
    let h = tape.add(s.heading, dh)?;
    let heading = tape.wrap_angle(h);
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let d2 = tape.add(dx2, dy2)?;
    let d2 = tape.add_scalar(d2, SPEED_EPS);
    let dist = tape.sqrt(d2);
    let speed = tape.scale(dist, 1.0 / DT);
    Ok(StateVars { x, y, heading, speed })
}
