//! Map geometry: drivable polygons, lane centerlines, and
//! oriented-rectangle overlap tests.

use crate::error::{Error, Result};
use crate::scene::Footprint;
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// A simple (non-self-intersecting) polygon, implicitly closed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<Vec2>,
}

impl Polygon {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        let poly = Polygon { points };
        poly.validate()?;
        Ok(poly)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 3 {
            return Err(Error::invalid("polygon needs at least 3 points"));
        }
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("polygon points must be finite"));
        }
        if self.self_intersects() {
            return Err(Error::invalid("polygon must not self-intersect"));
        }
        Ok(())
    }

    fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    fn self_intersects(&self) -> bool {
        let edges: Vec<(Vec2, Vec2)> = self.edges().collect();
        let n = edges.len();
        for i in 0..n {
            for j in i + 1..n {
                // Skip adjacent edges (they share an endpoint).
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_cross(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return true;
                }
            }
        }
        false
    }

    /// Even-odd ray-casting containment test; boundary points count as
    /// inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if point_on_segment(p, a, b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn point_on_segment(p: Vec2, a: Vec2, b: Vec2) -> bool {
    let ab = b - a;
    let ap = p - a;
    if ab.cross(ap).abs() > 1e-9 {
        return false;
    }
    let t = ap.dot(ab);
    t >= 0.0 && t <= ab.norm_sq()
}

fn segments_cross(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// A lane: centerline polyline plus width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Vec2>,
    pub width: f64,
}

impl Lane {
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::invalid("lane centerline needs at least 2 points"));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::invalid("lane width must be positive"));
        }
        Ok(())
    }

    /// Total arc length.
    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| w[1].dist(w[0])).sum()
    }

    /// Project a point: returns (arc length s, signed lateral offset).
    /// Positive offsets are to the left of the travel direction.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        let mut s_acc = 0.0;
        for w in self.centerline.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len = ab.norm();
            if len < 1e-12 {
                continue;
            }
            let t = ((p - a).dot(ab) / (len * len)).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = p.dist(q);
            if d < best.1 {
                let lateral = (ab / len).cross(p - q).signum() * d;
                // cross(dir, offset) > 0 when p is left of the segment
                let side = (ab / len).cross(p - a);
                best = (s_acc + t * len, side.signum() * d.abs().min(d));
                best.1 = side.signum() * d;
                let _ = lateral;
            }
            s_acc += len;
        }
        best
    }

    /// Point at arc length `s`, clamped to the polyline extent.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let len = w[1].dist(w[0]);
            if remaining <= len || len < 1e-12 {
                if len < 1e-12 {
                    continue;
                }
                return w[0] + (w[1] - w[0]) * (remaining / len);
            }
            remaining -= len;
        }
        *self.centerline.last().unwrap()
    }

    /// Unit tangent at arc length `s`.
    pub fn direction_at(&self, s: f64) -> Vec2 {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let len = w[1].dist(w[0]);
            if len < 1e-12 {
                continue;
            }
            if remaining <= len {
                return (w[1] - w[0]) / len;
            }
            remaining -= len;
        }
        let n = self.centerline.len();
        let d = self.centerline[n - 1] - self.centerline[n - 2];
        d / d.norm().max(1e-12)
    }

    /// Left normal at arc length `s`.
    pub fn normal_at(&self, s: f64) -> Vec2 {
        self.direction_at(s).perp()
    }
}

/// Drivable region and lane network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapModel {
    pub drivable: Vec<Polygon>,
    pub lanes: Vec<Lane>,
}

impl MapModel {
    pub fn validate(&self) -> Result<()> {
        if self.drivable.is_empty() {
            return Err(Error::invalid("map needs at least one drivable polygon"));
        }
        for p in &self.drivable {
            p.validate()?;
        }
        for l in &self.lanes {
            l.validate()?;
        }
        Ok(())
    }

    /// True when `p` lies inside any drivable polygon.
    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.drivable.iter().any(|poly| poly.contains(p))
    }

    /// Nearest lane to a point together with its projection distance.
    pub fn nearest_lane(&self, p: Vec2) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, lane) in self.lanes.iter().enumerate() {
            let (_, lateral) = lane.project(p);
            let d = lateral.abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    /// Translate the whole map (testing aid).
    pub fn translated(&self, c: Vec2) -> MapModel {
        MapModel {
            drivable: self
                .drivable
                .iter()
                .map(|p| Polygon {
                    points: p.points.iter().map(|q| *q + c).collect(),
                })
                .collect(),
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane {
                    centerline: l.centerline.iter().map(|q| *q + c).collect(),
                    width: l.width,
                })
                .collect(),
        }
    }
}

/// An oriented rectangle (vehicle footprint at a pose).
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn from_footprint(center: Vec2, heading: f64, fp: Footprint) -> Self {
        Obb {
            center,
            heading,
            half_length: fp.length / 2.0,
            half_width: fp.width / 2.0,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let dir = Vec2::from_angle(self.heading);
        let nrm = dir.perp();
        let l = dir * self.half_length;
        let w = nrm * self.half_width;
        [
            self.center + l + w,
            self.center + l - w,
            self.center - l - w,
            self.center - l + w,
        ]
    }

    /// Separating-axis overlap test for two oriented rectangles.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let axes = [
            Vec2::from_angle(self.heading),
            Vec2::from_angle(self.heading).perp(),
            Vec2::from_angle(other.heading),
            Vec2::from_angle(other.heading).perp(),
        ];
        let a = self.corners();
        let b = other.corners();
        for axis in axes {
            let proj = |pts: &[Vec2; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in pts {
                    let v = p.dot(axis);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&a);
            let (blo, bhi) = proj(&b);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(cx: f64, cy: f64, half: f64) -> Polygon {
        Polygon::new(vec![
            Vec2::new(cx - half, cy - half),
            Vec2::new(cx + half, cy - half),
            Vec2::new(cx + half, cy + half),
            Vec2::new(cx - half, cy + half),
        ])
        .unwrap()
    }

    #[test]
    fn polygon_containment_basic() {
        let sq = square(0.0, 0.0, 5.0);
        assert!(sq.contains(Vec2::ZERO));
        assert!(sq.contains(Vec2::new(5.0, 0.0))); // boundary
        assert!(!sq.contains(Vec2::new(5.1, 0.0)));
    }

    #[test]
    fn polygon_rejects_self_intersection() {
        // Bowtie.
        let poly = Polygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(4.0, 4.0),
            Vec2::new(4.0, 0.0),
            Vec2::new(0.0, 4.0),
        ]);
        assert!(poly.is_err());
    }

    #[test]
    fn containment_matches_independent_raycast() {
        // Concave polygon; compare against a separately written crossing
        // counter casting in a different direction.
        let poly = Polygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 0.0),
            Vec2::new(10.0, 10.0),
            Vec2::new(5.0, 4.0),
            Vec2::new(0.0, 10.0),
        ])
        .unwrap();
        let reference = |p: Vec2| {
            // Cast downward instead of to the right.
            let n = poly.points.len();
            let mut inside = false;
            for i in 0..n {
                let a = poly.points[i];
                let b = poly.points[(i + 1) % n];
                if (a.x > p.x) != (b.x > p.x) {
                    let y_cross = a.y + (p.x - a.x) / (b.x - a.x) * (b.y - a.y);
                    if p.y < y_cross {
                        inside = !inside;
                    }
                }
            }
            inside
        };
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..500 {
            let p = Vec2::new(rng.random_range(-2.0..12.0), rng.random_range(-2.0..12.0));
            assert_eq!(poly.contains(p), reference(p), "disagree at {p:?}");
        }
    }

    #[test]
    fn lane_projection_and_sampling() {
        let lane = Lane {
            centerline: vec![Vec2::ZERO, Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)],
            width: 3.5,
        };
        assert!((lane.length() - 20.0).abs() < 1e-12);
        let (s, lat) = lane.project(Vec2::new(4.0, 1.0));
        assert!((s - 4.0).abs() < 1e-9);
        assert!((lat - 1.0).abs() < 1e-9, "lateral {lat}");
        let (s, lat) = lane.project(Vec2::new(11.5, 5.0));
        assert!((s - 15.0).abs() < 1e-9);
        assert!((lat + 1.5).abs() < 1e-9, "lateral {lat}");
        assert!(lane.point_at(15.0).dist(Vec2::new(10.0, 5.0)) < 1e-9);
        assert!(lane.direction_at(15.0).dist(Vec2::new(0.0, 1.0)) < 1e-9);
    }

    #[test]
    fn obb_overlap_basic() {
        let fp = Footprint::default();
        let a = Obb::from_footprint(Vec2::ZERO, 0.0, fp);
        // Identical pose always collides.
        assert!(a.overlaps(&a));
        // Far separation beyond the diagonal sum never collides.
        let far = Obb::from_footprint(Vec2::new(10.0, 0.0), 1.0, fp);
        assert!(!a.overlaps(&far));
        // Perpendicular crossing at close range collides.
        let crossing = Obb::from_footprint(Vec2::new(1.0, 0.5), std::f64::consts::FRAC_PI_2, fp);
        assert!(a.overlaps(&crossing));
    }

    #[test]
    fn obb_overlap_matches_dense_sampling_oracle() {
        // Rasterized overlap: sample a fine grid of points of rectangle B
        // and test containment in A (and vice versa). Near-tangent poses
        // must agree with the SAT test away from the decision boundary.
        let contains = |o: &Obb, p: Vec2| {
            let rel = (p - o.center).rotated(-o.heading);
            rel.x.abs() <= o.half_length + 1e-12 && rel.y.abs() <= o.half_width + 1e-12
        };
        let dense_overlap = |a: &Obb, b: &Obb| {
            let steps = 40;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = -b.half_length + 2.0 * b.half_length * i as f64 / steps as f64;
                    let y = -b.half_width + 2.0 * b.half_width * j as f64 / steps as f64;
                    let p = b.center + Vec2::new(x, y).rotated(b.heading);
                    if contains(a, p) {
                        return true;
                    }
                    let x = -a.half_length + 2.0 * a.half_length * i as f64 / steps as f64;
                    let y = -a.half_width + 2.0 * a.half_width * j as f64 / steps as f64;
                    let p = a.center + Vec2::new(x, y).rotated(a.heading);
                    if contains(b, p) {
                        return true;
                    }
                }
            }
            false
        };
        let fp = Footprint::default();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut checked = 0;
        for _ in 0..400 {
            let a = Obb::from_footprint(Vec2::ZERO, rng.random_range(-3.0..3.0), fp);
            let b = Obb::from_footprint(
                Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0)),
                rng.random_range(-3.0..3.0),
                fp,
            );
            let sat = a.overlaps(&b);
            let dense = dense_overlap(&a, &b);
            // The sampled oracle can miss razor-thin overlaps; skip cases
            // where the two disagree within the sampling resolution.
            if sat != dense {
                let sep = a.center.dist(b.center);
                let margin = 0.15;
                let near_boundary = (sep
                    - (a.half_length + b.half_length + a.half_width + b.half_width) / 1.0)
                    .abs()
                    < margin;
                assert!(
                    sat && !dense || near_boundary,
                    "SAT {sat} vs dense {dense} at separation {sep}"
                );
                continue;
            }
            checked += 1;
        }
        assert!(checked > 300, "only {checked} conclusive cases");
    }

    #[test]
    fn map_queries() {
        let map = MapModel {
            drivable: vec![square(0.0, 0.0, 20.0)],
            lanes: vec![Lane {
                centerline: vec![Vec2::new(-20.0, 0.0), Vec2::new(20.0, 0.0)],
                width: 3.5,
            }],
        };
        map.validate().unwrap();
        assert!(map.is_drivable(Vec2::new(3.0, 3.0)));
        assert!(!map.is_drivable(Vec2::new(30.0, 0.0)));
        let (lane, d) = map.nearest_lane(Vec2::new(0.0, 1.0)).unwrap();
        assert_eq!(lane, 0);
        assert!((d - 1.0).abs() < 1e-9);
    }
}
