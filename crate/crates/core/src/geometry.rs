//! Planar poses, oriented rectangles, polylines and separating-axis overlap.
//!
//! Conventions: yaw is measured counter-clockwise from +x and kept in (-π, π];
//! lateral offsets are positive to the left of the direction of travel.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::ops::{Add, Mul, Neg, Sub};

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum segment length accepted by [`Polyline::new`].
pub const MIN_SEGMENT: f64 = 1e-6;

/// Wraps an angle into (-π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle - TAU * ((angle + PI) / TAU).floor();
    if a <= -PI {
        a += TAU;
    }
    if a > PI {
        a -= TAU;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Vec2 { x: c, y: s }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product; positive when `other` is to the left.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotated by +90 degrees.
    pub fn perp(self) -> Vec2 {
        Vec2 { x: -self.y, y: self.x }
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2 { x: c * self.x - s * self.y, y: s * self.x + c * self.y }
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Vec2 {
        self + (other - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2 { x: self.x + rhs.x, y: self.y + rhs.y }
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2 { x: self.x - rhs.x, y: self.y - rhs.y }
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2 { x: self.x * rhs, y: self.y * rhs }
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2 { x: -self.x, y: -self.y }
    }
}

/// Planar pose. The yaw is normalized on construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2D { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.yaw)
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn to_global(&self, local: Vec2) -> Vec2 {
        local.rotate(self.yaw) + self.position()
    }

    /// Maps a world-frame point into this pose's local frame.
    pub fn to_local(&self, global: Vec2) -> Vec2 {
        (global - self.position()).rotate(-self.yaw)
    }

    /// `self ∘ other`: `other` expressed in this pose's frame, returned in the world frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let p = self.to_global(other.position());
        Pose2D::new(p.x, p.y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2D {
        let p = Vec2::ZERO - self.position().rotate(-self.yaw);
        Pose2D::new(p.x, p.y, -self.yaw)
    }
}

/// Rigid transform of ego-frame points into the world frame.
pub fn transform_to_global(local_points: &[Vec2], ego_pose: &Pose2D) -> Vec<Vec2> {
    local_points.iter().map(|p| ego_pose.to_global(*p)).collect()
}

/// Inverse of [`transform_to_global`].
pub fn transform_to_local(global_points: &[Vec2], ego_pose: &Pose2D) -> Vec<Vec2> {
    global_points.iter().map(|p| ego_pose.to_local(*p)).collect()
}

/// Closed oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose2D,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2D, half_length: f64, half_width: f64) -> Result<Self> {
        if !(half_length > 0.0 && half_width > 0.0) {
            return Err(Error::InvalidBox { half_length, half_width });
        }
        Ok(OrientedBox { center, half_length, half_width })
    }

    /// Same extents placed at another pose.
    pub fn moved_to(&self, center: Pose2D) -> Self {
        OrientedBox { center, ..*self }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        let u = self.center.heading();
        [u, u.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, v] = self.axes();
        let c = self.center.position();
        let a = u * self.half_length;
        let b = v * self.half_width;
        [c + a + b, c - a + b, c - a - b, c + a - b]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let local = self.center.to_local(p);
        local.x.abs() <= self.half_length && local.y.abs() <= self.half_width
    }

    pub fn circumradius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        let [u, v] = self.axes();
        let c = self.center.position().dot(axis);
        let r = self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs();
        (c - r, c + r)
    }
}

/// True iff the two closed rectangles intersect (touching counts).
pub fn sat_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let reach = a.circumradius() + b.circumradius();
    if a.center.position().distance(b.center.position()) > reach {
        return false;
    }
    let [a0, a1] = a.axes();
    let [b0, b1] = b.axes();
    for axis in [a0, a1, b0, b1] {
        let (amin, amax) = a.project(axis);
        let (bmin, bmax) = b.project(axis);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

/// Largest separating gap over the four candidate axes, or 0 when the boxes overlap.
/// This is a lower bound on the Euclidean distance between the rectangles and is
/// exact when one box's face is the closest feature.
pub fn box_gap(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let [a0, a1] = a.axes();
    let [b0, b1] = b.axes();
    let mut gap: f64 = 0.0;
    for axis in [a0, a1, b0, b1] {
        let (amin, amax) = a.project(axis);
        let (bmin, bmax) = b.project(axis);
        gap = gap.max(bmin - amax).max(amin - bmax);
    }
    gap
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arclength: f64,
    pub lateral_offset: f64,
    pub segment_heading: f64,
    pub foot: Vec2,
    /// Unsigned Euclidean distance to the foot point.
    pub distance: f64,
}

/// Ordered sequence of points with cached cumulative arclength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<Vec2>> for Polyline {
    type Error = Error;
    fn try_from(points: Vec<Vec2>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(line: Polyline) -> Self {
        line.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPolyline("fewer than two points"));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let len = w[0].distance(w[1]);
            if !(len >= MIN_SEGMENT) {
                return Err(Error::InvalidPolyline("coincident consecutive points"));
            }
            let last = *cumulative.last().unwrap_or(&0.0);
            cumulative.push(last + len);
        }
        Ok(Polyline { points, cumulative })
    }

    /// Drops points closer than [`MIN_SEGMENT`] to their predecessor. Returns `None`
    /// when fewer than two distinct points remain.
    pub fn deduplicated(points: &[Vec2]) -> Option<Self> {
        let mut kept: Vec<Vec2> = Vec::with_capacity(points.len());
        for &p in points {
            match kept.last() {
                Some(&q) if q.distance(p) < MIN_SEGMENT => {}
                _ => kept.push(p),
            }
        }
        Polyline::new(kept).ok()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap_or(core::cmp::Ordering::Less)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point at arclength `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        self.points[i].lerp(self.points[i + 1], t)
    }

    /// Heading of the segment containing arclength `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s.clamp(0.0, self.length()));
        (self.points[i + 1] - self.points[i]).angle()
    }

    pub fn pose_at(&self, s: f64) -> Pose2D {
        let p = self.point_at(s);
        Pose2D::new(p.x, p.y, self.heading_at(s))
    }

    /// Orthogonal projection onto the nearest segment (first one on ties).
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best: Option<(f64, usize, f64)> = None;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let d = self.points[i + 1] - a;
            let len2 = d.dot(d);
            let t = ((p - a).dot(d) / len2).clamp(0.0, 1.0);
            let foot = a + d * t;
            let dist = p.distance(foot);
            if best.is_none_or(|(bd, _, _)| dist < bd) {
                best = Some((dist, i, t));
            }
        }
        let (distance, i, t) = best.unwrap_or((0.0, 0, 0.0));
        let a = self.points[i];
        let d = self.points[i + 1] - a;
        let foot = a + d * t;
        let dir = d * (1.0 / d.norm());
        Projection {
            arclength: self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]),
            lateral_offset: dir.cross(p - foot),
            segment_heading: dir.angle(),
            foot,
            distance,
        }
    }

    /// Sub-polyline covering arclengths `[start, end]` (clamped).
    pub fn window(&self, start: f64, end: f64) -> Result<Polyline> {
        let total = self.length();
        let start = start.clamp(0.0, total);
        let end = end.clamp(0.0, total);
        let mut pts = Vec::new();
        pts.push(self.point_at(start));
        for (i, &c) in self.cumulative.iter().enumerate() {
            if c > start && c < end {
                pts.push(self.points[i]);
            }
        }
        pts.push(self.point_at(end));
        Polyline::deduplicated(&pts).ok_or(Error::InvalidPolyline("empty window"))
    }
}

/// Arclength, signed lateral offset and heading error of a pose against a polyline.
pub fn project_onto_polyline(point: Vec2, heading: f64, line: &Polyline) -> (f64, f64, f64) {
    let pr = line.project(point);
    (pr.arclength, pr.lateral_offset, normalize_angle(heading - pr.segment_heading))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!(close(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
        assert!(close(normalize_angle(7.0 * TAU + 0.25), 0.25, 1e-9));
    }

    #[test]
    fn transform_identity_and_quarter_turn() {
        let p = [Vec2::new(1.0, 0.0)];
        assert_eq!(transform_to_global(&p, &Pose2D::new(0.0, 0.0, 0.0)), vec![Vec2::new(1.0, 0.0)]);
        let q = transform_to_global(&p, &Pose2D::new(0.0, 0.0, PI / 2.0));
        assert!(close(q[0].x, 0.0, 1e-9) && close(q[0].y, 1.0, 1e-9));
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let pose = Pose2D::new(3.0, -2.0, 0.7);
        let id = pose.compose(&pose.inverse());
        assert!(close(id.x, 0.0, 1e-12) && close(id.y, 0.0, 1e-12) && close(id.yaw, 0.0, 1e-12));
    }

    #[test]
    fn sat_basic_cases() {
        let a = OrientedBox::new(Pose2D::new(0.0, 0.0, 0.0), 1.0, 1.0).unwrap();
        assert!(sat_overlap(&a, &a));
        let b = a.moved_to(Pose2D::new(10.0, 0.0, 0.0));
        assert!(!sat_overlap(&a, &b));
        // touching edges count
        let c = a.moved_to(Pose2D::new(2.0, 0.0, 0.0));
        assert!(sat_overlap(&a, &c));
    }

    #[test]
    fn box_gap_axis_aligned() {
        let a = OrientedBox::new(Pose2D::new(0.0, 0.0, 0.0), 2.0, 1.0).unwrap();
        let b = a.moved_to(Pose2D::new(7.0, 0.0, 0.0));
        assert!(close(box_gap(&a, &b), 3.0, 1e-12));
        assert!(close(box_gap(&a, &a.moved_to(Pose2D::new(0.0, 3.5, 0.0))), 1.5, 1e-12));
        assert_eq!(box_gap(&a, &a), 0.0);
    }

    #[test]
    fn box_rejects_non_positive_extent() {
        assert!(OrientedBox::new(Pose2D::default(), 0.0, 1.0).is_err());
    }

    #[test]
    fn polyline_validation() {
        assert!(Polyline::new(vec![Vec2::new(0.0, 0.0)]).is_err());
        assert!(Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0)]).is_err());
        assert!(Polyline::deduplicated(&[Vec2::ZERO, Vec2::ZERO]).is_none());
    }

    #[test]
    fn projection_examples() {
        let line = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)]).unwrap();
        let (s, d, h) = project_onto_polyline(Vec2::new(4.0, 0.0), 0.0, &line);
        assert_eq!((s, d, h), (4.0, 0.0, 0.0));
        let (s, d, h) = project_onto_polyline(Vec2::new(5.0, 2.0), 0.0, &line);
        assert!(close(s, 5.0, 1e-12) && close(d, 2.0, 1e-12) && close(h, 0.0, 1e-12));
        let (s, _, _) = project_onto_polyline(Vec2::new(15.0, 1.0), 0.0, &line);
        assert_eq!(s, 10.0);
        let (_, d, _) = project_onto_polyline(Vec2::new(5.0, -1.5), 0.0, &line);
        assert!(close(d, -1.5, 1e-12));
    }

    #[test]
    fn window_keeps_interior_vertices() {
        let line = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)]).unwrap();
        let w = line.window(5.0, 15.0).unwrap();
        assert_eq!(w.points().len(), 3);
        assert!(close(w.length(), 10.0, 1e-12));
    }
}
