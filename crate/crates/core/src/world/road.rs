//! Analytic road: a straight or constant-curvature reference line with
//! parallel lanes, placed in the world by a rigid transform.

use serde::{Deserialize, Serialize};

use crate::geometry::{Polygon, Vec2};

pub const LANE_WIDTH: f64 = 3.5;
pub const ROAD_LENGTH: f64 = 400.0;
pub const CORRIDOR_MARGIN: f64 = 0.25;
const CORRIDOR_SAMPLE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub lanes: usize,
    pub lane_width: f64,
    pub length: f64,
    /// Signed curvature of the reference line (left turn positive).
    pub curvature: f64,
    pub origin: Vec2,
    pub heading: f64,
}

/// Road-aligned coordinates: arc length along the centerline and signed
/// lateral offset (left positive).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frenet {
    pub s: f64,
    pub d: f64,
}

impl Road {
    pub fn straight(lanes: usize) -> Self {
        Self {
            lanes,
            lane_width: LANE_WIDTH,
            length: ROAD_LENGTH,
            curvature: 0.0,
            origin: Vec2::default(),
            heading: 0.0,
        }
    }

    fn is_straight(&self) -> bool {
        self.curvature.abs() < 1e-12
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.lanes as f64 * self.lane_width
    }

    /// Lateral offset of lane `i`'s center; lane 0 is rightmost.
    pub fn lane_offset(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.lanes as f64 - 1.0)) * self.lane_width
    }

    fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.heading)
    }

    fn local_to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.origin
    }

    pub fn point(&self, s: f64, d: f64) -> Vec2 {
        let local = if self.is_straight() {
            Vec2::new(s, d)
        } else {
            let r = 1.0 / self.curvature;
            let th = s * self.curvature;
            let m = r - d;
            Vec2::new(th.sin() * m, r - th.cos() * m)
        };
        self.local_to_world(local)
    }

    /// Reference-line heading at arc length `s`, in world frame.
    pub fn heading_at(&self, s: f64) -> f64 {
        hardcase_nn::wrap_angle(self.heading + s * self.curvature)
    }

    pub fn to_frenet(&self, p: Vec2) -> Frenet {
        let q = self.to_local(p);
        if self.is_straight() {
            return Frenet { s: q.x, d: q.y };
        }
        let r = 1.0 / self.curvature;
        let sgn = r.signum();
        let phi = (sgn * q.x).atan2(sgn * (r - q.y));
        let m = sgn * q.x.hypot(r - q.y);
        Frenet {
            s: phi / self.curvature,
            d: r - m,
        }
    }

    /// Partial derivatives of `(s, d)` with respect to world `(x, y)`:
    /// returns `(ds/dp, dd/dp)`.
    pub fn frenet_gradient(&self, f: Frenet) -> (Vec2, Vec2) {
        let theta = self.heading_at(f.s);
        let t = Vec2::from_angle(theta);
        let n = t.perp();
        let scale = 1.0 - self.curvature * f.d;
        (t * (1.0 / scale), n)
    }

    /// `d point / ds` at fixed `d`.
    pub fn point_ds(&self, s: f64, d: f64) -> Vec2 {
        Vec2::from_angle(self.heading_at(s)) * (1.0 - self.curvature * d)
    }

    /// Drivable corridor: lane union widened by a small margin.
    pub fn corridor(&self) -> Polygon {
        let hw = self.half_width() + CORRIDOR_MARGIN;
        let n = (self.length / CORRIDOR_SAMPLE).ceil() as usize;
        let ss: Vec<f64> = (0..=n).map(|i| (i as f64 * CORRIDOR_SAMPLE).min(self.length)).collect();
        let mut v: Vec<Vec2> = ss.iter().map(|&s| self.point(s, -hw)).collect();
        v.extend(ss.iter().rev().map(|&s| self.point(s, hw)));
        Polygon::new(v)
    }

    /// Lane-center polyline sampled every `step` meters over `[s0, s1]`.
    pub fn lane_polyline(&self, lane: usize, s0: f64, s1: f64, step: f64) -> Vec<Vec2> {
        let d = self.lane_offset(lane);
        let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.point((s0 + i as f64 * step).min(s1), d))
            .collect()
    }

    /// Distance from `p` to lane `lane`'s centerline segment `[0, length]`.
    pub fn distance_to_lane(&self, p: Vec2, lane: usize) -> f64 {
        let f = self.to_frenet(p);
        let d = self.lane_offset(lane);
        if f.s < 0.0 {
            p.dist(self.point(0.0, d))
        } else if f.s > self.length {
            p.dist(self.point(self.length, d))
        } else {
            (f.d - d).abs()
        }
    }
}
