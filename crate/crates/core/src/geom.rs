//! 2D geometry primitives: poses, oriented boxes, polylines, and polygons.
//!
//! All angles are radians normalized to `(-pi, pi]`, all lengths meters.
//! Lateral offsets are signed positive to the left of the travel direction.

use alloc::vec::Vec;
use core::f64::consts::PI;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("polyline needs at least 2 points, got {0}")]
    DegeneratePolyline(usize),
}

/// Normalize an angle to the half-open interval `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = libm::fmod(a + PI, two_pi);
    if r <= 0.0 {
        r += two_pi;
    }
    r - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }

    fn sub(&self, other: &Point2) -> (f64, f64) {
        (self.x - other.x, self.y - other.y)
    }
}

/// Position plus heading; heading is kept normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Unit vector along the heading.
    pub fn direction(&self) -> (f64, f64) {
        (libm::cos(self.heading), libm::sin(self.heading))
    }
}

/// Oriented rectangle described by center pose and full extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Point2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    pub fn from_pose(pose: &Pose2D, length: f64, width: f64) -> Self {
        Self::new(pose.position(), pose.heading, length, width)
    }

    /// Corners in order front-left, front-right, rear-right, rear-left.
    pub fn corners(&self) -> [Point2; 4] {
        let (c, s) = (libm::cos(self.heading), libm::sin(self.heading));
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
        local.map(|(lx, ly)| {
            Point2::new(
                self.center.x + lx * c - ly * s,
                self.center.y + lx * s + ly * c,
            )
        })
    }

    /// Radius of the circumscribed circle, for cheap rejection tests.
    pub fn circumradius(&self) -> f64 {
        libm::hypot(self.length, self.width) / 2.0
    }

    /// Separating-axis overlap test for two oriented rectangles.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        // Cheap circle rejection first; the SAT below is exact.
        let dist = self.center.distance(&other.center);
        if dist > self.circumradius() + other.circumradius() {
            return false;
        }
        let ca = self.corners();
        let cb = other.corners();
        let axes = [
            (libm::cos(self.heading), libm::sin(self.heading)),
            (-libm::sin(self.heading), libm::cos(self.heading)),
            (libm::cos(other.heading), libm::sin(other.heading)),
            (-libm::sin(other.heading), libm::cos(other.heading)),
        ];
        for (ax, ay) in axes {
            let (mut min_a, mut max_a) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in &ca {
                let d = p.x * ax + p.y * ay;
                min_a = min_a.min(d);
                max_a = max_a.max(d);
            }
            let (mut min_b, mut max_b) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in &cb {
                let d = p.x * ax + p.y * ay;
                min_b = min_b.min(d);
                max_b = max_b.max(d);
            }
            if max_a < min_b || max_b < min_a {
                return false;
            }
        }
        true
    }

    /// True if `p` lies inside or on the rectangle.
    pub fn contains(&self, p: &Point2) -> bool {
        let (c, s) = (libm::cos(self.heading), libm::sin(self.heading));
        let (dx, dy) = p.sub(&self.center);
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }
}

fn point_segment_distance(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    closest_on_segment(p, a, b).distance(p)
}

fn closest_on_segment(p: &Point2, a: &Point2, b: &Point2) -> Point2 {
    let (abx, aby) = b.sub(a);
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return *a;
    }
    let (apx, apy) = p.sub(a);
    let t = ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0);
    Point2::new(a.x + t * abx, a.y + t * aby)
}

fn segments_intersect(a1: &Point2, a2: &Point2, b1: &Point2, b2: &Point2) -> bool {
    let d = |p: &Point2, q: &Point2, r: &Point2| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
    let d1 = d(b1, b2, a1);
    let d2 = d(b1, b2, a2);
    let d3 = d(a1, a2, b1);
    let d4 = d(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: &Point2, q: &Point2, r: &Point2| {
        d(p, q, r) == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(b1, b2, a1) || on(b1, b2, a2) || on(a1, a2, b1) || on(a1, a2, b2)
}

/// Minimum distance between a segment and an oriented box (0 when touching).
pub fn segment_box_distance(a: &Point2, b: &Point2, bx: &OrientedBox) -> f64 {
    if bx.contains(a) || bx.contains(b) {
        return 0.0;
    }
    let corners = bx.corners();
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let (c1, c2) = (&corners[i], &corners[(i + 1) % 4]);
        if segments_intersect(a, b, c1, c2) {
            return 0.0;
        }
        best = best.min(point_segment_distance(c1, a, b));
        best = best.min(point_segment_distance(c2, a, b));
        best = best.min(point_segment_distance(a, c1, c2));
        best = best.min(point_segment_distance(b, c1, c2));
    }
    best
}

/// Polyline with precomputed cumulative arc lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeomError> {
        if points.len() < 2 {
            return Err(GeomError::DegeneratePolyline(points.len()));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 1..points.len() {
            acc += points[i].distance(&points[i - 1]);
            cumulative.push(acc);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Insert points so no segment is longer than `max_spacing`.
    pub fn resample(&self, max_spacing: f64) -> Polyline {
        let mut pts = Vec::new();
        for i in 1..self.points.len() {
            let (a, b) = (self.points[i - 1], self.points[i]);
            let seg = a.distance(&b);
            let n = libm::ceil(seg / max_spacing).max(1.0) as usize;
            for k in 0..n {
                let t = k as f64 / n as f64;
                pts.push(Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
            }
        }
        pts.push(*self.points.last().unwrap());
        Polyline::new(pts).expect("resample keeps >= 2 points")
    }

    /// Point and tangent heading at arc length `s`, clamped to the ends.
    pub fn sample_at(&self, s: f64) -> (Point2, f64) {
        let s = s.clamp(0.0, self.length());
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[idx], self.points[idx + 1]);
        let seg = b.distance(&a);
        let t = if seg > 0.0 {
            (s - self.cumulative[idx]) / seg
        } else {
            0.0
        };
        let p = Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        let heading = libm::atan2(b.y - a.y, b.x - a.x);
        (p, heading)
    }

    /// Like [`Polyline::sample_at`] but extrapolates along the end tangents
    /// instead of clamping, so rollouts can run past the mapped route.
    pub fn sample_at_extended(&self, s: f64) -> (Point2, f64) {
        if s >= 0.0 && s <= self.length() {
            return self.sample_at(s);
        }
        let (anchor, heading, overshoot) = if s < 0.0 {
            let (p, h) = self.sample_at(0.0);
            (p, h, s)
        } else {
            let (p, h) = self.sample_at(self.length());
            (p, h, s - self.length())
        };
        (
            Point2::new(
                anchor.x + overshoot * libm::cos(heading),
                anchor.y + overshoot * libm::sin(heading),
            ),
            heading,
        )
    }

    /// Projection restricted to segments within `window` meters of arc
    /// position `near_s`. Equivalent to [`Polyline::project`] when the point
    /// stays near the path; O(window) instead of O(length).
    pub fn project_near(&self, p: &Point2, near_s: f64, window: f64) -> (f64, f64) {
        let lo_s = (near_s - window).max(0.0);
        let hi_s = (near_s + window).min(self.length());
        let lo = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&lo_s).unwrap())
        {
            Ok(i) | Err(i) => i.saturating_sub(1),
        };
        let hi = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&hi_s).unwrap())
        {
            Ok(i) | Err(i) => (i + 1).min(self.points.len() - 1),
        };
        self.project_range(p, lo.max(0), hi.max(1))
    }

    /// Nearest-segment projection: `(arc_length, signed_lateral_offset)`,
    /// offset positive to the left of the travel direction.
    pub fn project(&self, p: &Point2) -> (f64, f64) {
        self.project_range(p, 0, self.points.len() - 1)
    }

    fn project_range(&self, p: &Point2, first: usize, last: usize) -> (f64, f64) {
        let mut best_d2 = f64::INFINITY;
        let mut best = (0.0, 0.0);
        for i in (first + 1)..=last {
            let (a, b) = (self.points[i - 1], self.points[i]);
            let q = closest_on_segment(p, &a, &b);
            let d2 = (q.x - p.x) * (q.x - p.x) + (q.y - p.y) * (q.y - p.y);
            if d2 < best_d2 {
                best_d2 = d2;
                let seg = b.distance(&a);
                let arc = self.cumulative[i - 1] + q.distance(&a);
                // Sign from the cross product of segment direction and the
                // vector to the point: positive means left of travel.
                let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
                let lateral = if seg > 0.0 {
                    libm::copysign(libm::sqrt(d2), cross)
                } else {
                    libm::sqrt(d2)
                };
                best = (arc, lateral);
            }
        }
        best
    }

    /// Parallel polyline shifted laterally; positive `offset` shifts left.
    pub fn offset_left(&self, offset: f64) -> Polyline {
        let n = self.points.len();
        let mut pts = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = if i + 1 < n {
                (self.points[i], self.points[i + 1])
            } else {
                (self.points[i - 1], self.points[i])
            };
            let seg = a.distance(&b);
            let (nx, ny) = if seg > 0.0 {
                (-(b.y - a.y) / seg, (b.x - a.x) / seg)
            } else {
                (0.0, 0.0)
            };
            pts.push(Point2::new(
                self.points[i].x + nx * offset,
                self.points[i].y + ny * offset,
            ));
        }
        Polyline::new(pts).expect("offset keeps point count")
    }

    /// Minimum distance from the polyline to an oriented box.
    pub fn distance_to_box(&self, bx: &OrientedBox) -> f64 {
        let mut best = f64::INFINITY;
        for i in 1..self.points.len() {
            best = best.min(segment_box_distance(&self.points[i - 1], &self.points[i], bx));
            if best == 0.0 {
                return 0.0;
            }
        }
        best
    }
}

/// Closed polygon. The boundary ring does not repeat the first vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    /// Even-odd containment test; boundary points count as inside.
    pub fn contains(&self, p: &Point2) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (vi, vj) = (&self.vertices[i], &self.vertices[j]);
            if point_segment_distance(p, vi, vj) < 1e-12 {
                return true;
            }
            if (vi.y > p.y) != (vj.y > p.y) {
                let x_cross = vi.x + (p.y - vi.y) / (vj.y - vi.y) * (vj.x - vi.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Distance outside the polygon: 0 when inside, else distance to the
    /// nearest boundary edge.
    pub fn distance_outside(&self, p: &Point2) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let (a, b) = (&self.vertices[i], &self.vertices[(i + 1) % n]);
            best = best.min(point_segment_distance(p, a, b));
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn straight_lane_x() -> Polyline {
        let pts = (0..=100).map(|i| Point2::new(i as f64, 0.0)).collect();
        Polyline::new(pts).unwrap()
    }

    #[test]
    fn normalize_angle_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    #[test]
    fn corners_axis_aligned() {
        let bx = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, 0.0), 4.0, 2.0);
        let cs = bx.corners();
        for c in &cs {
            assert!((c.x.abs() - 2.0).abs() < 1e-12);
            assert!((c.y.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corners_rotated_90() {
        let bx = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, PI / 2.0), 4.0, 2.0);
        for c in bx.corners() {
            assert!((c.x.abs() - 1.0).abs() < 1e-9);
            assert!((c.y.abs() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn corners_rotated_45_offset() {
        // 2x2 box at (1,1) rotated 45 degrees: corners are (1,1) plus the
        // rotation of (+-1, +-1), i.e. (1 +- sqrt(2), 1) and (1, 1 +- sqrt(2)).
        let bx = OrientedBox::from_pose(&Pose2D::new(1.0, 1.0, PI / 4.0), 2.0, 2.0);
        let r = libm::sqrt(2.0);
        let expect = [
            Point2::new(1.0, 1.0 + r),
            Point2::new(1.0 + r, 1.0),
            Point2::new(1.0, 1.0 - r),
            Point2::new(1.0 - r, 1.0),
        ];
        for e in &expect {
            assert!(
                bx.corners().iter().any(|c| c.distance(e) < 1e-9),
                "missing corner {e:?}"
            );
        }
    }

    #[test]
    fn boxes_identical_intersect() {
        let bx = OrientedBox::from_pose(&Pose2D::new(3.0, -2.0, 0.7), 4.0, 2.0);
        assert!(bx.intersects(&bx));
    }

    #[test]
    fn boxes_far_apart_disjoint() {
        let a = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, 0.3), 4.0, 2.0);
        let b = OrientedBox::from_pose(&Pose2D::new(100.0, 0.0, -0.8), 4.0, 2.0);
        assert!(!a.intersects(&b));
    }

    #[test]
    fn boxes_bumper_gap() {
        // Two 4x2 boxes nose to tail: centers 3.9 m apart overlap (gap would
        // be -0.1 m), 4.1 m apart leaves a 0.1 m gap.
        let a = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, 0.0), 4.0, 2.0);
        let touching = OrientedBox::from_pose(&Pose2D::new(3.9, 0.0, 0.0), 4.0, 2.0);
        let clear = OrientedBox::from_pose(&Pose2D::new(4.1, 0.0, 0.0), 4.0, 2.0);
        assert!(a.intersects(&touching));
        assert!(!a.intersects(&clear));
    }

    #[test]
    fn project_point_on_centerline() {
        let lane = straight_lane_x();
        let (s, o) = lane.project(&Point2::new(5.0, 0.0));
        assert!((s - 5.0).abs() < 1e-12);
        assert!(o.abs() < 1e-12);
    }

    #[test]
    fn project_left_positive_right_negative() {
        let lane = straight_lane_x();
        let (s, o) = lane.project(&Point2::new(5.0, 1.0));
        assert!((s - 5.0).abs() < 1e-12 && (o - 1.0).abs() < 1e-12);
        let (s, o) = lane.project(&Point2::new(5.0, -1.0));
        assert!((s - 5.0).abs() < 1e-12 && (o + 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_left_shifts_left_of_travel() {
        let lane = straight_lane_x();
        let shifted = lane.offset_left(1.5);
        // Travel along +x: left is +y.
        assert!((shifted.points()[10].y - 1.5).abs() < 1e-12);
    }

    #[test]
    fn polygon_contains_and_distance() {
        let poly = Polygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 10.0),
            Point2::new(0.0, 10.0),
        ]);
        assert!(poly.contains(&Point2::new(5.0, 5.0)));
        assert!(!poly.contains(&Point2::new(11.0, 5.0)));
        assert!((poly.distance_outside(&Point2::new(11.0, 5.0)) - 1.0).abs() < 1e-12);
        assert_eq!(poly.distance_outside(&Point2::new(5.0, 5.0)), 0.0);
    }

    #[test]
    fn segment_box_distance_basics() {
        let bx = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, 0.0), 4.0, 2.0);
        let through = segment_box_distance(&Point2::new(-5.0, 0.0), &Point2::new(5.0, 0.0), &bx);
        assert_eq!(through, 0.0);
        let above = segment_box_distance(&Point2::new(-5.0, 3.0), &Point2::new(5.0, 3.0), &bx);
        assert!((above - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_recovers_lateral_offset(d in -3.0f64..3.0, s in 1.0f64..99.0) {
            let lane = straight_lane_x();
            let (arc, lateral) = lane.project(&Point2::new(s, d));
            prop_assert!((lateral - d).abs() < 1e-6);
            prop_assert!((arc - s).abs() < 1e-6);
        }

        #[test]
        fn box_intersection_symmetric(
            x in -6.0f64..6.0, y in -6.0f64..6.0,
            ha in -3.14f64..3.14, hb in -3.14f64..3.14,
        ) {
            let a = OrientedBox::from_pose(&Pose2D::new(0.0, 0.0, ha), 4.0, 2.0);
            let b = OrientedBox::from_pose(&Pose2D::new(x, y, hb), 3.0, 1.5);
            prop_assert_eq!(a.intersects(&b), b.intersects(&a));
            prop_assert!(a.intersects(&a));
        }
    }
}
