use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::road::{Road, LANE_WIDTH, ROAD_LENGTH};
use super::{
    AgentKind, AgentPose, AgentTrack, DifficultyKnobs, EgoState, Route, Scenario, DT, FRAMES,
    VEHICLE_LENGTH, VEHICLE_WIDTH,
};
use crate::geometry::Vec2;
use crate::seeding::{stream_rng, Stream};
use crate::{CoreError, Result};

/// Arc length where the ego starts.
pub const EGO_START_S: f64 = 40.0;
const AHEAD_WINDOW: f64 = 120.0;
const MAX_AHEAD_WINDOW: f64 = 300.0;
const BEHIND_WINDOW: f64 = 30.0;

const IDM_ACCEL: f64 = 2.0;
const IDM_DECEL: f64 = 3.0;
const IDM_HEADWAY: f64 = 1.2;
const IDM_JAM_GAP: f64 = 2.5;

/// Intelligent-driver-model acceleration.
pub(crate) fn idm_accel(v: f64, v_target: f64, gap: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v_target.max(0.1)).powi(4);
    let interaction = match gap {
        Some((gap, lead_speed)) => {
            let dv = v - lead_speed;
            let s_star = IDM_JAM_GAP
                + (v * IDM_HEADWAY + v * dv / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt())).max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    IDM_ACCEL * (free - interaction)
}

fn lane_window(lane: usize, ego_lane: usize, min_gap: f64, ahead: f64) -> (f64, f64) {
    if lane == ego_lane {
        (EGO_START_S + VEHICLE_LENGTH + min_gap, EGO_START_S + ahead)
    } else {
        (EGO_START_S - BEHIND_WINDOW, EGO_START_S + ahead)
    }
}

/// Scheduled behavior changes for a simulated lane vehicle.
#[derive(Clone, Debug, Default)]
struct Plan {
    brake: Option<(f64, f64, f64)>,
    lane_change: Option<(f64, f64, f64, f64)>,
}

#[derive(Clone, Debug)]
struct Vehicle {
    s: f64,
    d: f64,
    v: f64,
    v_target: f64,
    kind: AgentKind,
    plan: Plan,
}

fn smoothstep(u: f64) -> (f64, f64) {
    let u = u.clamp(0.0, 1.0);
    (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u))
}

impl Vehicle {
    /// Lateral offset and its rate at time `t`.
    fn lateral(&self, t: f64) -> (f64, f64) {
        match self.plan.lane_change {
            Some((start, dur, from, to)) => {
                let (w, dw) = smoothstep((t - start) / dur);
                (from + (to - from) * w, (to - from) * dw / dur)
            }
            None => (self.d, 0.0),
        }
    }
}

fn simulate_lane_traffic(road: &Road, mut vehicles: Vec<Vehicle>) -> Vec<AgentTrack> {
    let n = vehicles.len();
    let mut poses = vec![Vec::with_capacity(FRAMES); n];
    for frame in 0..FRAMES {
        let t = frame as f64 * DT;
        let lat: Vec<(f64, f64)> = vehicles.iter().map(|v| v.lateral(t)).collect();
        for (i, v) in vehicles.iter().enumerate() {
            let (d, dd) = lat[i];
            let heading = road.heading_at(v.s) + dd.atan2(v.v.max(0.5));
            let p = road.point(v.s, d);
            poses[i].push(AgentPose {
                x: p.x,
                y: p.y,
                heading: hardcase_nn::wrap_angle(heading),
                speed: v.v.hypot(dd),
            });
        }
        let accel: Vec<f64> = (0..n)
            .map(|i| {
                let me = &vehicles[i];
                let leader = (0..n)
                    .filter(|&j| j != i && (lat[j].0 - lat[i].0).abs() < 0.5 * LANE_WIDTH + 0.5)
                    .filter(|&j| vehicles[j].s > me.s)
                    .min_by(|&a, &b| vehicles[a].s.total_cmp(&vehicles[b].s))
                    .map(|j| (vehicles[j].s - me.s - VEHICLE_LENGTH, vehicles[j].v));
                let mut a = idm_accel(me.v, me.v_target, leader);
                if let Some((start, dur, decel)) = me.plan.brake {
                    if t >= start && t < start + dur {
                        a = a.min(-decel);
                    }
                }
                a.max(-9.0)
            })
            .collect();
        for (v, a) in vehicles.iter_mut().zip(accel) {
            let nv = (v.v + a * DT).max(0.0);
            v.s += 0.5 * (v.v + nv) * DT;
            v.v = nv;
        }
    }
    vehicles
        .iter()
        .zip(poses)
        .map(|(v, poses)| AgentTrack {
            kind: v.kind,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            poses,
        })
        .collect()
}

fn gap_ok(occupied: &[(usize, f64)], lane: usize, s: f64, spacing: f64) -> bool {
    occupied
        .iter()
        .all(|&(l, o)| l != lane || (o - s).abs() >= spacing)
}

/// Random non-overlapping slots; falls back to tight packing when random
/// placement keeps failing.
fn place_lane_vehicles(
    rng: &mut impl Rng,
    knobs: &DifficultyKnobs,
    lanes: usize,
    ego_lane: usize,
    spacing: f64,
    ahead: f64,
) -> Option<Vec<(usize, f64)>> {
    let n = knobs.agent_density as usize;
    let mut occupied: Vec<(usize, f64)> = vec![(ego_lane, EGO_START_S)];
    'attempt: for _ in 0..200 {
        let lane = rng.random_range(0..lanes);
        let (lo, hi) = lane_window(lane, ego_lane, knobs.min_gap, ahead);
        let s = rng.random_range(lo..hi);
        if gap_ok(&occupied, lane, s, spacing) {
            occupied.push((lane, s));
            if occupied.len() == n + 1 {
                break 'attempt;
            }
        }
    }
    if occupied.len() == n + 1 {
        return Some(occupied.split_off(1));
    }
    let mut packed = Vec::with_capacity(n);
    for lane in 0..lanes {
        let (lo, hi) = lane_window(lane, ego_lane, knobs.min_gap, ahead);
        let mut s = lo;
        while s <= hi && packed.len() < n {
            packed.push((lane, s));
            s += spacing;
        }
    }
    (packed.len() == n).then_some(packed)
}

/// Builds a scenario from a seed and difficulty knobs.
pub fn generate_scenario(seed: u64, knobs: &DifficultyKnobs) -> Result<Scenario> {
    knobs.validate()?;
    let mut rng = stream_rng(Stream::Scenario, &[seed]);
    let spacing = knobs.min_gap + VEHICLE_LENGTH;
    let need = knobs.agent_density as f64 * spacing;
    let capacity = |lanes: usize| -> f64 {
        let ego = MAX_AHEAD_WINDOW - VEHICLE_LENGTH - knobs.min_gap;
        ego + (lanes - 1) as f64 * (MAX_AHEAD_WINDOW + BEHIND_WINDOW)
    };
    if need > capacity(3) {
        return Err(CoreError::InfeasibleKnobs(format!(
            "{} agents at min_gap {:.2} m need {:.0} m of lane but 3 lanes offer {:.0} m",
            knobs.agent_density,
            knobs.min_gap,
            need,
            capacity(3)
        )));
    }
    let mut lanes = rng.random_range(1..=3usize);
    while lanes < 3 && need > 0.8 * capacity(lanes) {
        lanes += 1;
    }
    // Sparse traffic stays near the ego; long convoys spread further ahead.
    let ahead = (1.6 * need / lanes as f64 + 40.0).clamp(AHEAD_WINDOW, MAX_AHEAD_WINDOW);
    let road = Road {
        lanes,
        lane_width: LANE_WIDTH,
        length: ROAD_LENGTH,
        curvature: knobs.curvature,
        origin: Vec2::new(rng.random_range(-1000.0..1000.0), rng.random_range(-1000.0..1000.0)),
        heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    };
    let ego_lane = rng.random_range(0..lanes);
    let target_speed = rng.random_range(9.0..15.0);
    let ego_speed = target_speed * rng.random_range(0.85..1.0);
    let ego_pos = road.point(EGO_START_S, road.lane_offset(ego_lane));
    let ego_init = EgoState {
        x: ego_pos.x,
        y: ego_pos.y,
        heading: road.heading_at(EGO_START_S),
        speed: ego_speed,
    };

    let mut vehicles = Vec::new();
    let slots = place_lane_vehicles(&mut rng, knobs, lanes, ego_lane, spacing, ahead).ok_or_else(|| {
        CoreError::InfeasibleKnobs(format!(
            "could not place {} agents with min_gap {:.2} m",
            knobs.agent_density, knobs.min_gap
        ))
    })?;
    let mut occupied: Vec<(usize, f64)> = vec![(ego_lane, EGO_START_S)];
    for (lane, s) in slots {
        occupied.push((lane, s));
        let factor = if lane == ego_lane {
            rng.random_range(0.5..1.05)
        } else {
            rng.random_range(0.7..1.1)
        };
        let v_target = target_speed * factor;
        vehicles.push(Vehicle {
            s,
            d: road.lane_offset(lane),
            v: v_target * rng.random_range(0.85..1.0),
            v_target,
            kind: AgentKind::Lane,
            plan: Plan::default(),
        });
    }

    let mut crossings = Vec::new();
    if knobs.agent_density > 0 {
        // Background hazards scale with the number of vehicles.
        let d_ego = road.lane_offset(ego_lane);
        for v in vehicles.iter_mut() {
            if rng.random_bool(0.5 * knobs.event_rate) {
                let start = rng.random_range(0.5..8.0);
                v.plan.brake = Some((start, rng.random_range(1.0..2.5), rng.random_range(3.0..6.0)));
            }
            if lanes > 1 && rng.random_bool(0.5 * knobs.event_rate) {
                let lane = ((v.d / road.lane_width) + 0.5 * (lanes as f64 - 1.0)).round() as i64;
                let in_ego_lane = (v.d - d_ego).abs() < 0.1;
                let toward = if in_ego_lane {
                    if lane == 0 || (lane + 1 < lanes as i64 && rng.random_bool(0.5)) { lane + 1 } else { lane - 1 }
                } else if v.d < d_ego {
                    lane + 1
                } else {
                    lane - 1
                };
                let gap = knobs.min_gap * rng.random_range(0.3..1.5) + VEHICLE_LENGTH;
                let random_start = rng.random_range(0.5..7.0);
                let dur = rng.random_range(2.0..4.0);
                // Merges into the ego lane are timed to land just ahead of the
                // ego's nominal position when that happens within the segment.
                let closing = ego_speed - v.v;
                let timed = (road.lane_offset(toward as usize) - d_ego).abs() < 0.1 && closing.abs() > 0.1;
                let start = if timed {
                    let t = (EGO_START_S + gap - v.s) / -closing;
                    if (0.5..7.0).contains(&t) { t } else { random_start }
                } else {
                    random_start
                };
                v.plan.lane_change = Some((start, dur, v.d, road.lane_offset(toward as usize)));
            }
        }
        // Lead vehicle brakes hard.
        if rng.random_bool(knobs.event_rate) {
            let lead = vehicles
                .iter_mut()
                .filter(|v| (v.d - d_ego).abs() < 0.1 && v.s > EGO_START_S)
                .min_by(|a, b| a.s.total_cmp(&b.s));
            let start = rng.random_range(1.0..6.0);
            let decel = rng.random_range(4.0..7.0);
            let dur = rng.random_range(1.0..3.0);
            if let Some(v) = lead {
                v.plan.brake = Some((start, dur, decel));
            }
        }
        // Adjacent-lane vehicle cuts in ahead of the ego.
        let exposure = (knobs.agent_density as f64 / 6.0).min(1.0);
        if rng.random_bool(knobs.event_rate * exposure) {
            let side: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
            let t_cut = rng.random_range(1.5..5.0);
            let gap = knobs.min_gap * rng.random_range(0.3..1.5) + VEHICLE_LENGTH;
            let speed = ego_speed * rng.random_range(0.7..1.0);
            let dur = rng.random_range(2.5..3.5);
            let from_lane = ego_lane as i64 + side;
            let from_lane = if (0..lanes as i64).contains(&from_lane) {
                Some(from_lane as usize)
            } else {
                let other = ego_lane as i64 - side;
                (0..lanes as i64).contains(&other).then_some(other as usize)
            };
            if let Some(from) = from_lane {
                let s = EGO_START_S + ego_speed * t_cut + gap - speed * t_cut;
                if s > 0.0 {
                    let (d0, d1) = (road.lane_offset(from), road.lane_offset(ego_lane));
                    vehicles.push(Vehicle {
                        s,
                        d: d0,
                        v: speed,
                        v_target: speed,
                        kind: AgentKind::CutIn,
                        plan: Plan {
                            brake: None,
                            lane_change: Some((t_cut, dur, d0, d1)),
                        },
                    });
                }
            }
        }
        // Crossing agents timed to meet the ego's nominal path.
        {
            if rng.random_bool(knobs.event_rate * exposure) {
                let t_meet = rng.random_range(2.5..8.0);
                let s_c = EGO_START_S + ego_speed * t_meet;
                let speed = rng.random_range(4.0..9.0);
                let t_pass = t_meet + rng.random_range(-0.8..0.8);
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                if s_c < road.length - 10.0 {
                    crossings.push((s_c, speed, t_pass, dir));
                }
            }
        }
    }

    let mut agents = simulate_lane_traffic(&road, vehicles);
    for (s_c, speed, t_pass, dir) in crossings {
        let d_lane = road.lane_offset(ego_lane);
        let base = road.point(s_c, 0.0);
        let normal = Vec2::from_angle(road.heading_at(s_c)).perp();
        let heading = hardcase_nn::wrap_angle(road.heading_at(s_c) + dir * FRAC_PI_2);
        let poses = (0..FRAMES)
            .map(|f| {
                let d = d_lane + dir * speed * (f as f64 * DT - t_pass);
                let p = base + normal * d;
                AgentPose {
                    x: p.x,
                    y: p.y,
                    heading,
                    speed,
                }
            })
            .collect();
        agents.push(AgentTrack {
            kind: AgentKind::Crossing,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            poses,
        });
    }

    Ok(Scenario {
        seed,
        knobs: *knobs,
        road,
        route: Route {
            lane: ego_lane,
            lanes: (0..lanes).collect(),
            start_s: EGO_START_S,
        },
        target_speed,
        ego_init,
        agents,
    })
}

/// Distribution of difficulty knobs used to synthesize corpora. Half the
/// segments are empty roads by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobDistribution {
    pub empty_fraction: f64,
    pub max_density: u32,
    pub min_gap_range: (f64, f64),
    pub event_rate_range: (f64, f64),
    pub max_curvature: f64,
    pub straight_fraction: f64,
}

impl Default for KnobDistribution {
    fn default() -> Self {
        Self {
            empty_fraction: 0.5,
            max_density: 10,
            min_gap_range: (2.0, 15.0),
            event_rate_range: (0.0, 0.8),
            max_curvature: 0.007,
            straight_fraction: 0.4,
        }
    }
}

impl KnobDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> DifficultyKnobs {
        let empty = rng.random_bool(self.empty_fraction);
        let agent_density = if empty { 0 } else { rng.random_range(1..=self.max_density) };
        let (g0, g1) = self.min_gap_range;
        let (e0, e1) = self.event_rate_range;
        let curvature = if rng.random_bool(self.straight_fraction) {
            0.0
        } else {
            rng.random_range(-self.max_curvature..=self.max_curvature)
        };
        DifficultyKnobs {
            agent_density,
            min_gap: rng.random_range(g0..=g1),
            event_rate: rng.random_range(e0..=e1),
            curvature,
        }
    }
}
