//! Fixed-width ego-frame observation vector shared by the policy and the
//! discriminator, with its Jacobian with respect to the ego state.

use crate::geometry::Vec2;
use crate::world::{EgoState, Scenario, VEHICLE_LENGTH};

pub const AGENT_SLOTS: usize = 8;
pub const AGENT_FEATURES: usize = 7;
pub const ROUTE_POINTS: usize = 10;
pub const ROUTE_SPACING: f64 = 5.0;
pub const BOUNDARY_POINTS: usize = 5;
pub const BOUNDARY_SPACING: f64 = 10.0;
pub const PERCEPTION_RANGE: f64 = 50.0;
pub const POSITION_SCALE: f64 = 20.0;
pub const VELOCITY_SCALE: f64 = 10.0;

const ROUTE_START: usize = 1;
const BOUNDARY_START: usize = ROUTE_START + 2 * ROUTE_POINTS;
const AGENT_START: usize = BOUNDARY_START + 4 * BOUNDARY_POINTS;
const CONTEXT_START: usize = AGENT_START + AGENT_SLOTS * AGENT_FEATURES;
const LEAD_START: usize = CONTEXT_START + 1;
pub const OBS_DIM: usize = LEAD_START + 3;

/// Partials of one feature with respect to `(x, y, heading, speed)`.
pub type StateGradient = [f64; 4];

#[derive(Clone, Debug)]
pub struct Observation {
    pub values: [f64; OBS_DIM],
    pub jacobian: [StateGradient; OBS_DIM],
}

/// Writes `R(-h) (p - e)` as two features along with partials, where `dp`
/// holds `dp/dx, dp/dy` for points that slide with the ego's arc length.
fn put_local(obs: &mut Observation, k: usize, u: Vec2, dp: (Vec2, Vec2), h: f64) {
    let (c, s) = (h.cos(), h.sin());
    let lx = u.x * c + u.y * s;
    let ly = -u.x * s + u.y * c;
    let du_dx = dp.0 - Vec2::new(1.0, 0.0);
    let du_dy = dp.1 - Vec2::new(0.0, 1.0);
    let fwd = Vec2::new(c, s);
    let left = Vec2::new(-s, c);
    obs.values[k] = lx / POSITION_SCALE;
    obs.values[k + 1] = ly / POSITION_SCALE;
    obs.jacobian[k] = [du_dx.dot(fwd) / POSITION_SCALE, du_dy.dot(fwd) / POSITION_SCALE, ly / POSITION_SCALE, 0.0];
    obs.jacobian[k + 1] = [du_dx.dot(left) / POSITION_SCALE, du_dy.dot(left) / POSITION_SCALE, -lx / POSITION_SCALE, 0.0];
}

pub fn observe(scenario: &Scenario, t: usize, ego: &EgoState) -> Observation {
    let mut obs = Observation { values: [0.0; OBS_DIM], jacobian: [[0.0; 4]; OBS_DIM] };
    let road = &scenario.road;
    let e = ego.position();
    let h = ego.heading;

    obs.values[0] = ego.speed / VELOCITY_SCALE;
    obs.jacobian[0][3] = 1.0 / VELOCITY_SCALE;

    let f = road.to_frenet(e);
    let (ds, _) = road.frenet_gradient(f);
    let along = |obs: &mut Observation, k: usize, offset: f64, d: f64| {
        let s = f.s + offset;
        let tangent = road.point_ds(s, d);
        let dp = (tangent * ds.x, tangent * ds.y);
        put_local(obs, k, road.point(s, d) - e, dp, h);
    };

    let d_lane = road.lane_offset(scenario.route.lane);
    for i in 0..ROUTE_POINTS {
        along(&mut obs, ROUTE_START + 2 * i, i as f64 * ROUTE_SPACING, d_lane);
    }
    let hw = road.half_width();
    for i in 0..BOUNDARY_POINTS {
        let offset = i as f64 * BOUNDARY_SPACING;
        along(&mut obs, BOUNDARY_START + 4 * i, offset, hw);
        along(&mut obs, BOUNDARY_START + 4 * i + 2, offset, -hw);
    }

    let mut near: Vec<(f64, usize)> = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| (a.poses[t].position().dist(e), i))
        .filter(|&(d, _)| d <= PERCEPTION_RANGE)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let (c, s) = (h.cos(), h.sin());
    let fwd = Vec2::new(c, s);
    let left = Vec2::new(-s, c);
    for (slot, &(_, i)) in near.iter().take(AGENT_SLOTS).enumerate() {
        let pose = scenario.agents[i].poses[t];
        let k = AGENT_START + slot * AGENT_FEATURES;
        let fixed = (Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0));
        put_local(&mut obs, k, pose.position() - e, fixed, h);

        let rel = pose.heading - h;
        obs.values[k + 2] = rel.cos();
        obs.values[k + 3] = rel.sin();
        obs.jacobian[k + 2] = [0.0, 0.0, rel.sin(), 0.0];
        obs.jacobian[k + 3] = [0.0, 0.0, -rel.cos(), 0.0];

        let va = pose.velocity();
        let (vf, vl) = (va.dot(fwd), va.dot(left));
        obs.values[k + 4] = (vf - ego.speed) / VELOCITY_SCALE;
        obs.values[k + 5] = vl / VELOCITY_SCALE;
        obs.jacobian[k + 4] = [0.0, 0.0, vl / VELOCITY_SCALE, -1.0 / VELOCITY_SCALE];
        obs.jacobian[k + 5] = [0.0, 0.0, -vf / VELOCITY_SCALE, 0.0];

        obs.values[k + 6] = 1.0;
    }

    obs.values[CONTEXT_START] = scenario.target_speed / VELOCITY_SCALE;

    // Nearest vehicle ahead inside the goal lane, measured along the road.
    let reach = 0.5 * road.lane_width + 1.0;
    let lead = scenario
        .agents
        .iter()
        .filter_map(|a| {
            let p = a.poses[t];
            let fa = road.to_frenet(p.position());
            let gap = fa.s - f.s - 0.5 * (a.length + VEHICLE_LENGTH);
            let ahead = fa.s > f.s && (fa.d - d_lane).abs() < reach && gap < PERCEPTION_RANGE;
            ahead.then(|| (gap, p.speed * (p.heading - road.heading_at(fa.s)).cos()))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match lead {
        Some((gap, v)) => {
            obs.values[LEAD_START] = gap / POSITION_SCALE;
            obs.jacobian[LEAD_START] = [-ds.x / POSITION_SCALE, -ds.y / POSITION_SCALE, 0.0, 0.0];
            obs.values[LEAD_START + 1] = (v - ego.speed) / VELOCITY_SCALE;
            obs.jacobian[LEAD_START + 1] = [0.0, 0.0, 0.0, -1.0 / VELOCITY_SCALE];
            obs.values[LEAD_START + 2] = 1.0;
        }
        None => obs.values[LEAD_START] = PERCEPTION_RANGE / POSITION_SCALE,
    }
    obs
}
