use serde::{Deserialize, Serialize};

use super::generate::idm_accel;
use super::{step_dynamics, AgentTrack, DeltaAction, EgoState, Scenario, DT, FRAMES, MAX_SPEED, VEHICLE_LENGTH};
use crate::{CoreError, Result};

const LOOKAHEAD: f64 = 8.0;
const PREDICTION_HORIZON: f64 = 4.0;
/// Lateral half-width of the ego's lane corridor used for conflicts.
const CONFLICT_HALF_WIDTH: f64 = 2.3;

/// Closed-loop ego controller.
pub trait Controller {
    fn act(&mut self, t: usize, ego: &EgoState, scenario: &Scenario) -> DeltaAction;
}

/// Replays a fixed action sequence.
pub struct LogReplay {
    actions: Vec<DeltaAction>,
}

impl LogReplay {
    pub fn new(actions: Vec<DeltaAction>) -> Self {
        Self { actions }
    }
}

impl Controller for LogReplay {
    fn act(&mut self, t: usize, _: &EgoState, _: &Scenario) -> DeltaAction {
        self.actions.get(t).copied().unwrap_or_default()
    }
}

/// Parameters of a scripted development planner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerProfile {
    pub perception_radius: f64,
    pub reaction_delay: usize,
    pub max_brake: f64,
    pub target_speed_bias: f64,
}

impl PlannerProfile {
    pub fn expert() -> Self {
        Self {
            perception_radius: f64::INFINITY,
            reaction_delay: 0,
            max_brake: 8.0,
            target_speed_bias: 1.0,
        }
    }

    pub fn cautious() -> Self {
        Self {
            perception_radius: 60.0,
            reaction_delay: 2,
            max_brake: 7.0,
            target_speed_bias: 0.9,
        }
    }

    pub fn nominal() -> Self {
        Self {
            perception_radius: 40.0,
            reaction_delay: 5,
            max_brake: 6.0,
            target_speed_bias: 1.0,
        }
    }

    pub fn degraded() -> Self {
        Self {
            perception_radius: 25.0,
            reaction_delay: 10,
            max_brake: 4.5,
            target_speed_bias: 1.15,
        }
    }

    /// The three default labeling profiles.
    pub fn labeling_set() -> Vec<(String, PlannerProfile)> {
        vec![
            ("cautious".into(), Self::cautious()),
            ("nominal".into(), Self::nominal()),
            ("degraded".into(), Self::degraded()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.perception_radius > 0.0
            && self.max_brake > 0.0
            && self.target_speed_bias > 0.0
            && self.reaction_delay <= 20;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidProfile(format!("{self:?}")))
        }
    }
}

/// Pure-pursuit steering plus gap-keeping speed control with
/// constant-velocity conflict prediction.
pub struct ScriptedPlanner {
    profile: PlannerProfile,
}

impl ScriptedPlanner {
    pub fn new(profile: PlannerProfile) -> Self {
        Self { profile }
    }

    /// Nearest conflicting obstacle as `(bumper gap, speed along road)`.
    fn leader(&self, t: usize, ego: &EgoState, scenario: &Scenario, s_ego: f64) -> Option<(f64, f64)> {
        let d_lane = scenario.road.lane_offset(scenario.route.lane);
        let frame = t.saturating_sub(self.profile.reaction_delay).min(FRAMES - 1);
        let speed = ego.speed.max(0.5);
        let mut best: Option<(f64, f64)> = None;
        for agent in &scenario.agents {
            let Some(cand) = conflict(agent, frame, ego, scenario, s_ego, d_lane, speed, self.profile.perception_radius) else {
                continue;
            };
            if best.is_none_or(|b| cand.0 < b.0) {
                best = Some(cand);
            }
        }
        best
    }
}

#[allow(clippy::too_many_arguments)]
fn conflict(
    agent: &AgentTrack,
    frame: usize,
    ego: &EgoState,
    scenario: &Scenario,
    s_ego: f64,
    d_lane: f64,
    ego_speed: f64,
    radius: f64,
) -> Option<(f64, f64)> {
    let road = &scenario.road;
    let pose = &agent.poses[frame];
    if pose.position().dist(ego.position()) > radius {
        return None;
    }
    let f = road.to_frenet(pose.position());
    let rel = pose.heading - road.heading_at(f.s);
    let (v_s, v_d) = (pose.speed * rel.cos(), pose.speed * rel.sin());
    let off = f.d - d_lane;
    let (t_in, t_out) = if v_d.abs() < 1e-6 {
        if off.abs() < CONFLICT_HALF_WIDTH {
            (0.0, f64::INFINITY)
        } else {
            return None;
        }
    } else {
        let a = (-CONFLICT_HALF_WIDTH - off) / v_d;
        let b = (CONFLICT_HALF_WIDTH - off) / v_d;
        (a.min(b).max(0.0), a.max(b))
    };
    if t_out < 0.0 || t_in > PREDICTION_HORIZON {
        return None;
    }
    let s_in = f.s + v_s * t_in;
    if s_in <= s_ego {
        return None;
    }
    let gap = s_in - s_ego - VEHICLE_LENGTH;
    if t_in > 0.0 {
        let t_ego = gap.max(0.0) / ego_speed;
        if t_ego < t_in - 1.0 || t_ego > t_out + 0.5 {
            return None;
        }
    }
    Some((gap, v_s.max(0.0)))
}

impl Controller for ScriptedPlanner {
    fn act(&mut self, t: usize, ego: &EgoState, scenario: &Scenario) -> DeltaAction {
        let road = &scenario.road;
        let f = road.to_frenet(ego.position());
        let d_lane = road.lane_offset(scenario.route.lane);

        let target = road.point(f.s + LOOKAHEAD, d_lane);
        let rel = (target - ego.position()).rotate(-ego.heading);
        let dist = rel.norm().max(1e-6);
        let curvature = 2.0 * rel.y / (dist * dist);

        let v_target = scenario.target_speed * self.profile.target_speed_bias;
        let leader = self.leader(t, ego, scenario, f.s);
        let accel = idm_accel(ego.speed, v_target, leader).clamp(-self.profile.max_brake, 2.0);
        let v = (ego.speed + accel * DT).clamp(0.0, MAX_SPEED);

        let dheading = curvature * v * DT;
        let heading = ego.heading + dheading;
        DeltaAction::new(v * DT * heading.cos(), v * DT * heading.sin(), dheading).clamped()
    }
}

/// Closed-loop drive from the scenario's initial state. Returns the state
/// track (`FRAMES` states) and the applied, clamped actions.
pub fn drive(scenario: &Scenario, controller: &mut dyn Controller) -> (Vec<EgoState>, Vec<DeltaAction>) {
    let mut track = Vec::with_capacity(FRAMES);
    let mut actions = Vec::with_capacity(FRAMES - 1);
    track.push(scenario.ego_init);
    for t in 0..FRAMES - 1 {
        let a = controller.act(t, &track[t], scenario).clamped();
        let next = step_dynamics(&track[t], &a);
        actions.push(a);
        track.push(next);
    }
    (track, actions)
}
