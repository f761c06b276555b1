//! Planar primitives: vectors, oriented boxes and simple polygons.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(a: f64) -> Self {
        Self::new(a.cos(), a.sin())
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    /// Counter-clockwise rotation by `a`.
    pub fn rotate(self, a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rectangle with a center, heading and full extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let f = Vec2::from_angle(self.heading);
        (f, f.perp())
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (f, l) = self.axes();
        let (hf, hl) = (f * (0.5 * self.length), l * (0.5 * self.width));
        let c = self.center;
        [c + hf + hl, c - hf + hl, c - hf - hl, c + hf - hl]
    }

    /// Half-diagonal, the radius of the bounding circle.
    pub fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    fn projected_radius(&self, axis: Vec2) -> f64 {
        let (f, l) = self.axes();
        0.5 * self.length * f.dot(axis).abs() + 0.5 * self.width * l.dot(axis).abs()
    }
}

/// Separating-axis overlap test. Touching boxes count as overlapping.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = b.center - a.center;
    let (af, al) = a.axes();
    let (bf, bl) = b.axes();
    [af, al, bf, bl]
        .into_iter()
        .all(|axis| d.dot(axis).abs() <= a.projected_radius(axis) + b.projected_radius(axis))
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(a + ab * t)
}

/// Exact minimum distance between two boxes; zero when they overlap.
pub fn box_clearance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if boxes_overlap(a, b) {
        return 0.0;
    }
    let (ca, cb) = (a.corners(), b.corners());
    let mut best = f64::INFINITY;
    for (pts, edges) in [(&ca, &cb), (&cb, &ca)] {
        for &p in pts.iter() {
            for i in 0..4 {
                best = best.min(point_segment_distance(p, edges[i], edges[(i + 1) % 4]));
            }
        }
    }
    best
}

/// Simple polygon with a y-slab edge index for fast containment queries.
#[derive(Clone, Debug)]
pub struct Polygon {
    vertices: Vec<Vec2>,
    y_min: f64,
    slab_height: f64,
    slabs: Vec<Vec<u32>>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        let n = vertices.len();
        let y_min = vertices.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let y_max = vertices.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let slab_count = (n / 2).clamp(1, 512);
        let slab_height = ((y_max - y_min) / slab_count as f64).max(1e-9);
        let mut slabs = vec![Vec::new(); slab_count];
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let lo = ((a.y.min(b.y) - y_min) / slab_height).floor().max(0.0) as usize;
            let hi = (((a.y.max(b.y) - y_min) / slab_height).floor() as usize).min(slab_count - 1);
            for s in slabs.iter_mut().take(hi + 1).skip(lo) {
                s.push(i as u32);
            }
        }
        Self {
            vertices,
            y_min,
            slab_height,
            slabs,
        }
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    /// Even-odd ray casting; points exactly on an edge may go either way.
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let s = (p.y - self.y_min) / self.slab_height;
        if s < 0.0 || s >= self.slabs.len() as f64 + 1.0 {
            return false;
        }
        let slab = &self.slabs[(s as usize).min(self.slabs.len() - 1)];
        let mut inside = false;
        for &i in slab {
            let i = i as usize;
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}
