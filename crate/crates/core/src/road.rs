//! Lane strips, route windows and the deviation / lane-membership measures
//! shared by the closed-loop world and the counterfactual engine.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Polyline, Pose2D, Vec2};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneTag {
    Driving,
    Opposite,
    Emergency,
    Connector,
}

/// A lane as a centerline strip of constant width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Polyline,
    pub width: f64,
    pub tag: LaneTag,
}

impl Lane {
    /// Portion of the lane between two centerline arclengths, or `None` if the
    /// requested span collapses.
    pub fn window(&self, start: f64, end: f64) -> Option<Lane> {
        let centerline = self.centerline.window(start, end).ok()?;
        Some(Lane { centerline, width: self.width, tag: self.tag })
    }
}

/// A slice of the route polyline together with the global arclength at which it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteWindow {
    pub line: Polyline,
    pub offset: f64,
}

impl RouteWindow {
    pub fn full(route: &Polyline) -> Self {
        RouteWindow { line: route.clone(), offset: 0.0 }
    }

    /// Window of `route` covering global arclengths `[start, end]` (clamped).
    pub fn of(route: &Polyline, start: f64, end: f64) -> Result<Self> {
        let start = start.clamp(0.0, route.length());
        let end = end.clamp(start, route.length());
        if end - start < 1e-3 {
            // stay valid at the very end of the route
            let s0 = (route.length() - 1.0).max(0.0);
            return Ok(RouteWindow { line: route.window(s0, route.length())?, offset: s0 });
        }
        Ok(RouteWindow { line: route.window(start, end)?, offset: start })
    }

    pub fn end(&self) -> f64 {
        self.offset + self.line.length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadParams {
    /// Extra lateral tolerance beyond half the lane width before a pose counts as offroad.
    pub offroad_margin: f64,
    /// Route lateral offset above which a pose counts as offroute.
    pub offroute_threshold: f64,
}

impl Default for RoadParams {
    fn default() -> Self {
        RoadParams { offroad_margin: 0.5, offroute_threshold: 4.0 }
    }
}

/// Everything the reward and infraction logic needs to know about one pose.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoadMeasure {
    /// Global route arclength of the projection.
    pub route_s: f64,
    pub route_lateral: f64,
    pub heading_error: f64,
    /// Absolute offset to the centerline of the lane the pose is attributed to.
    pub lane_offset: f64,
    pub lane: Option<usize>,
    pub offroad: bool,
    pub offroute: bool,
    pub opposite: bool,
    pub emergency: bool,
}

impl RoadMeasure {
    /// Route deviation d_g.
    pub fn d_route(&self) -> f64 {
        self.route_lateral.abs()
    }

    /// Heading deviation d_h.
    pub fn d_heading(&self) -> f64 {
        self.heading_error.abs()
    }
}

/// Metres of lateral distance one radian of heading mismatch is worth when
/// attributing a pose to one of several overlapping lanes.
const HEADING_ATTRIBUTION_WEIGHT: f64 = 2.0;

/// Projects `pose` onto the route window and the lanes.
pub fn measure_pose(route: &RouteWindow, lanes: &[Lane], pose: &Pose2D, params: &RoadParams) -> RoadMeasure {
    let p = pose.position();
    let rp = route.line.project(p);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut nearest = f64::INFINITY;
    let mut on_road = false;
    for (i, lane) in lanes.iter().enumerate() {
        let proj = lane.centerline.project(p);
        nearest = nearest.min(proj.distance);
        let half = 0.5 * lane.width;
        if proj.distance <= half + params.offroad_margin {
            on_road = true;
        }
        if proj.distance <= half {
            let score =
                proj.distance + HEADING_ATTRIBUTION_WEIGHT * normalize_angle(pose.yaw - proj.segment_heading).abs();
            if best.is_none_or(|(_, s, _)| score < s) {
                best = Some((i, score, proj.distance));
            }
        }
    }
    let (lane, lane_offset) = match best {
        Some((i, _, d)) => (Some(i), d),
        None => (None, if nearest.is_finite() { nearest } else { 0.0 }),
    };
    let tag = lane.map(|i| lanes[i].tag);
    RoadMeasure {
        route_s: route.offset + rp.arclength,
        route_lateral: rp.lateral_offset,
        heading_error: normalize_angle(pose.yaw - rp.segment_heading),
        lane_offset,
        lane,
        offroad: !on_road,
        offroute: rp.lateral_offset.abs() > params.offroute_threshold,
        opposite: tag == Some(LaneTag::Opposite),
        emergency: tag == Some(LaneTag::Emergency),
    }
}

/// Lanes whose centerline comes within `radius` of `center`, trimmed to the
/// part of each centerline inside that radius.
pub fn nearby_lanes(lanes: &[Lane], center: Vec2, radius: f64) -> Vec<Lane> {
    let mut out = Vec::new();
    for lane in lanes {
        let proj = lane.centerline.project(center);
        if proj.distance > radius {
            continue;
        }
        let reach = (radius * radius - proj.distance * proj.distance).max(0.0).sqrt();
        if let Some(w) = lane.window(proj.arclength - reach, proj.arclength + reach) {
            out.push(w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn straight(y: f64, tag: LaneTag) -> Lane {
        Lane { centerline: Polyline::new(vec![Vec2::new(0.0, y), Vec2::new(100.0, y)]).unwrap(), width: 3.5, tag }
    }

    fn road() -> (RouteWindow, Vec<Lane>) {
        let lanes = vec![straight(0.0, LaneTag::Driving), straight(3.5, LaneTag::Opposite), straight(-3.5, LaneTag::Emergency)];
        (RouteWindow::full(&lanes[0].centerline), lanes)
    }

    #[test]
    fn centered_pose_is_clean() {
        let (route, lanes) = road();
        let m = measure_pose(&route, &lanes, &Pose2D::new(10.0, 0.0, 0.0), &RoadParams::default());
        assert_eq!(m.lane, Some(0));
        assert!(!m.offroad && !m.offroute && !m.opposite && !m.emergency);
        assert_eq!(m.route_s, 10.0);
    }

    #[test]
    fn opposite_and_emergency_tags() {
        let (route, lanes) = road();
        let p = RoadParams::default();
        assert!(measure_pose(&route, &lanes, &Pose2D::new(10.0, 3.4, 0.0), &p).opposite);
        assert!(measure_pose(&route, &lanes, &Pose2D::new(10.0, -3.4, 0.0), &p).emergency);
    }

    #[test]
    fn offroad_beyond_margin() {
        let (route, lanes) = road();
        let p = RoadParams::default();
        // outer edge of the emergency lane sits at y = -5.25
        assert!(!measure_pose(&route, &lanes, &Pose2D::new(10.0, -5.6, 0.0), &p).offroad);
        assert!(measure_pose(&route, &lanes, &Pose2D::new(10.0, -5.8, 0.0), &p).offroad);
        assert!(measure_pose(&route, &lanes, &Pose2D::new(10.0, -5.8, 0.0), &p).offroute);
    }

    #[test]
    fn window_offsets_arclength() {
        let (_, lanes) = road();
        let w = RouteWindow::of(&lanes[0].centerline, 20.0, 60.0).unwrap();
        let m = measure_pose(&w, &lanes, &Pose2D::new(30.0, 0.0, 0.0), &RoadParams::default());
        assert!((m.route_s - 30.0).abs() < 1e-12);
        assert_eq!(w.end(), 60.0);
    }

    #[test]
    fn nearby_lanes_trims() {
        let (_, lanes) = road();
        let near = nearby_lanes(&lanes, Vec2::new(50.0, 0.0), 10.0);
        assert_eq!(near.len(), 3);
        assert!(near[0].centerline.length() <= 20.0 + 1e-9);
    }
}
