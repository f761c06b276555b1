//! Deterministic 2D kinematic driving world.

mod generate;
mod planner;
pub mod road;

use serde::{Deserialize, Serialize};

use crate::geometry::{box_clearance, boxes_overlap, OrientedBox, Polygon, Vec2};
pub use generate::{generate_scenario, KnobDistribution};
pub use planner::{drive, Controller, LogReplay, PlannerProfile, ScriptedPlanner};
pub use road::{Frenet, Road};

/// Simulation step in seconds (10 Hz).
pub const DT: f64 = 0.1;
/// Frames per segment (10 s).
pub const FRAMES: usize = 100;
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 2.0;
pub const MAX_SPEED: f64 = 20.0;
pub const MAX_YAW_RATE: f64 = 1.0;
pub const NEAR_MISS_THRESHOLD: f64 = 0.5;
/// Clearance reported when no agent is ever present.
pub const NO_AGENT_CLEARANCE: f64 = 1e3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl EgoState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn bounding_box(&self) -> OrientedBox {
        OrientedBox::new(self.position(), self.heading, VEHICLE_LENGTH, VEHICLE_WIDTH)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaAction {
    pub dx: f64,
    pub dy: f64,
    pub dheading: f64,
}

impl DeltaAction {
    pub const fn new(dx: f64, dy: f64, dheading: f64) -> Self {
        Self { dx, dy, dheading }
    }

    /// Clamps each component to the kinematic limits.
    pub fn clamped(self) -> Self {
        let p = MAX_SPEED * DT;
        let h = MAX_YAW_RATE * DT;
        Self {
            dx: self.dx.clamp(-p, p),
            dy: self.dy.clamp(-p, p),
            dheading: self.dheading.clamp(-h, h),
        }
    }
}

/// `s' = s + a` with the heading wrapped to `(-pi, pi]`. The speed of the
/// new state is the distance covered over the step.
pub fn step_dynamics(s: &EgoState, a: &DeltaAction) -> EgoState {
    let a = a.clamped();
    EgoState {
        x: s.x + a.dx,
        y: s.y + a.dy,
        heading: hardcase_nn::wrap_angle(s.heading + a.dheading),
        speed: a.dx.hypot(a.dy) / DT,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyKnobs {
    pub agent_density: u32,
    pub min_gap: f64,
    pub event_rate: f64,
    pub curvature: f64,
}

impl Default for DifficultyKnobs {
    fn default() -> Self {
        Self {
            agent_density: 4,
            min_gap: 10.0,
            event_rate: 0.1,
            curvature: 0.0,
        }
    }
}

impl DifficultyKnobs {
    pub fn empty() -> Self {
        Self {
            agent_density: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::CoreError::InvalidKnobs(m.to_string()));
        if !(self.min_gap > 0.0) {
            return bad("min_gap must be positive");
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad("event_rate must lie in [0, 1]");
        }
        if !self.curvature.is_finite() || self.curvature.abs() > 0.01 {
            return bad("curvature magnitude must be at most 0.01 1/m");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Lane,
    CutIn,
    Crossing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl AgentPose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub poses: Vec<AgentPose>,
}

impl AgentTrack {
    pub fn bounding_box(&self, t: usize) -> OrientedBox {
        let p = &self.poses[t];
        OrientedBox::new(p.position(), p.heading, self.length, self.width)
    }
}

/// Goal route: a lane to follow plus the set of lanes forming the road route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub lane: usize,
    pub lanes: Vec<usize>,
    pub start_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub knobs: DifficultyKnobs,
    pub road: Road,
    pub route: Route,
    /// Cruise speed the planners aim for.
    pub target_speed: f64,
    pub ego_init: EgoState,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    pub fn corridor(&self) -> Polygon {
        self.road.corridor()
    }

    /// Goal-lane polyline from the route start to the road end.
    pub fn route_polyline(&self) -> Vec<Vec2> {
        self.road
            .lane_polyline(self.route.lane, self.route.start_s, self.road.length, 2.0)
    }

    /// Smallest bumper-to-bumper gap between same-lane vehicles at frame 0,
    /// counting the ego. Infinite when no pair shares a lane.
    pub fn min_spawn_gap(&self) -> f64 {
        let lane_of = |p: Vec2| -> (usize, f64) {
            let f = self.road.to_frenet(p);
            let lane = (0..self.road.lanes)
                .min_by(|&a, &b| {
                    (f.d - self.road.lane_offset(a))
                        .abs()
                        .total_cmp(&(f.d - self.road.lane_offset(b)).abs())
                })
                .unwrap_or(0);
            (lane, f.s)
        };
        let mut v: Vec<(usize, f64)> = self
            .agents
            .iter()
            .filter(|a| a.kind == AgentKind::Lane)
            .map(|a| lane_of(a.poses[0].position()))
            .collect();
        v.push(lane_of(self.ego_init.position()));
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v.windows(2)
            .filter(|w| w[0].0 == w[1].0)
            .map(|w| w[1].1 - w[0].1 - VEHICLE_LENGTH)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyOutcome {
    pub collision: bool,
    pub near_miss: bool,
    pub offroad: bool,
    pub min_clearance: f64,
}

impl SafetyOutcome {
    /// Binary difficulty label: collision or near miss.
    pub fn positive(&self) -> bool {
        self.collision || self.near_miss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub knobs: DifficultyKnobs,
    pub expert_outcome: SafetyOutcome,
}

/// A 10 s logged snippet: scenario context plus the expert's drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSegment {
    pub id: String,
    pub scenario: Scenario,
    pub ego_track: Vec<EgoState>,
    pub expert_actions: Vec<DeltaAction>,
    pub metadata: SegmentMeta,
}

pub fn detect_collision(ego: &OrientedBox, agents: &[OrientedBox]) -> bool {
    agents.iter().any(|a| boxes_overlap(ego, a))
}

pub fn detect_offroad(ego: &OrientedBox, corridor: &Polygon) -> bool {
    ego.corners().iter().any(|&c| !corridor.contains(c))
}

pub fn detect_near_miss(min_clearance: f64, threshold: f64) -> bool {
    min_clearance < threshold
}

/// True iff at some frame the ego is farther than half a lane width from
/// every lane of the road route.
pub fn route_deviation(ego_track: &[EgoState], road: &Road, route_lanes: &[usize]) -> bool {
    ego_track.iter().any(|s| off_route(s.position(), road, route_lanes))
}

pub fn off_route(p: Vec2, road: &Road, route_lanes: &[usize]) -> bool {
    route_lanes
        .iter()
        .all(|&l| road.distance_to_lane(p, l) > 0.5 * road.lane_width)
}

/// Per-frame tracker for collision, clearance and off-road status.
pub struct OutcomeTracker<'a> {
    scenario: &'a Scenario,
    corridor: &'a Polygon,
    threshold: f64,
    outcome: SafetyOutcome,
}

impl<'a> OutcomeTracker<'a> {
    pub fn new(scenario: &'a Scenario, corridor: &'a Polygon, threshold: f64) -> Self {
        Self {
            scenario,
            corridor,
            threshold,
            outcome: SafetyOutcome {
                min_clearance: NO_AGENT_CLEARANCE,
                ..Default::default()
            },
        }
    }

    pub fn observe(&mut self, t: usize, ego: &EgoState) {
        let eb = ego.bounding_box();
        for a in &self.scenario.agents {
            let ab = a.bounding_box(t);
            let center = eb.center.dist(ab.center);
            if center - eb.radius() - ab.radius() >= self.outcome.min_clearance {
                continue;
            }
            let c = box_clearance(&eb, &ab);
            if c == 0.0 {
                self.outcome.collision = true;
            }
            self.outcome.min_clearance = self.outcome.min_clearance.min(c);
        }
        if !self.outcome.offroad && detect_offroad(&eb, self.corridor) {
            self.outcome.offroad = true;
        }
    }

    pub fn finish(mut self) -> SafetyOutcome {
        self.outcome.near_miss = detect_near_miss(self.outcome.min_clearance, self.threshold);
        self.outcome
    }
}

/// Scores a full ego track against the scenario's replayed agents.
pub fn evaluate_outcome(scenario: &Scenario, ego_track: &[EgoState], threshold: f64) -> SafetyOutcome {
    let corridor = scenario.corridor();
    let mut tracker = OutcomeTracker::new(scenario, &corridor, threshold);
    for (t, s) in ego_track.iter().enumerate() {
        tracker.observe(t, s);
    }
    tracker.finish()
}

/// Runs `controller` from the logged initial state with agents replayed.
pub fn simulate_counterfactual(segment: &RunSegment, controller: &mut dyn Controller) -> SafetyOutcome {
    let (track, _) = drive(&segment.scenario, controller);
    evaluate_outcome(&segment.scenario, &track, NEAR_MISS_THRESHOLD)
}

/// Drives the scenario with the expert planner and records the segment.
pub fn expert_rollout(scenario: &Scenario) -> RunSegment {
    let mut expert = ScriptedPlanner::new(PlannerProfile::expert());
    let (ego_track, expert_actions) = drive(scenario, &mut expert);
    let expert_outcome = evaluate_outcome(scenario, &ego_track, NEAR_MISS_THRESHOLD);
    RunSegment {
        id: segment_id(scenario.seed),
        scenario: scenario.clone(),
        ego_track,
        expert_actions,
        metadata: SegmentMeta {
            knobs: scenario.knobs,
            expert_outcome,
        },
    }
}

pub fn segment_id(seed: u64) -> String {
    format!("seg-{seed:010}")
}
