//! Built-in scenario templates. Every template uses 3.5 m lanes and mid-size
//! car footprints (4.5 m × 1.9 m).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::scenario::*;
use crate::geometry::{OrientedBox, Polyline, Vec2};
use crate::road::{Lane, LaneTag};

pub const LANE_WIDTH: f64 = 3.5;
const CAR_HALF_LENGTH: f64 = 2.25;
const CAR_HALF_WIDTH: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    FollowOvertake,
    LeftTurn,
    PedestrianCrossing,
    StopSign,
    Merge,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::FollowOvertake,
        TemplateKind::LeftTurn,
        TemplateKind::PedestrianCrossing,
        TemplateKind::StopSign,
        TemplateKind::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::FollowOvertake => "follow_overtake",
            TemplateKind::LeftTurn => "left_turn",
            TemplateKind::PedestrianCrossing => "pedestrian_crossing",
            TemplateKind::StopSign => "stop_sign",
            TemplateKind::Merge => "merge",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn scenario(self) -> Scenario {
        match self {
            TemplateKind::FollowOvertake => follow_overtake(),
            TemplateKind::LeftTurn => left_turn(),
            TemplateKind::PedestrianCrossing => pedestrian_crossing(),
            TemplateKind::StopSign => stop_sign(),
            TemplateKind::Merge => merge(),
        }
    }
}

fn line(points: &[(f64, f64)]) -> Polyline {
    Polyline::new(points.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).expect("template polyline")
}

fn lane(points: &[(f64, f64)], tag: LaneTag) -> Lane {
    Lane { centerline: line(points), width: LANE_WIDTH, tag }
}

fn car(path: Polyline, start: Range, speed: Range, desired: Range, behavior: AgentBehavior) -> AgentSpec {
    AgentSpec {
        path,
        half_length: CAR_HALF_LENGTH,
        half_width: CAR_HALF_WIDTH,
        start,
        speed,
        desired_speed: desired,
        behavior,
        connector: None,
    }
}

fn ego(speed: Range) -> EgoSpec {
    EgoSpec { initial_speed: speed, ..EgoSpec::default() }
}

/// Zone along the route covering `before` metres ahead of the stop line and
/// `after` metres past it.
fn trigger_zone(route: &Polyline, stop_line: f64, before: f64, after: f64) -> OrientedBox {
    let mid = stop_line + 0.5 * (after - before);
    let pose = route.pose_at(mid);
    OrientedBox { center: pose, half_length: 0.5 * (before + after), half_width: 0.5 * LANE_WIDTH }
}

/// Straight two-lane road with a slower reactive leader and scripted oncoming traffic.
pub fn follow_overtake() -> Scenario {
    let route = line(&[(0.0, 0.0), (160.0, 0.0)]);
    let oncoming = line(&[(260.0, LANE_WIDTH), (-20.0, LANE_WIDTH)]);
    Scenario {
        name: String::from("follow_overtake"),
        lanes: vec![
            lane(&[(0.0, 0.0), (200.0, 0.0)], LaneTag::Driving),
            lane(&[(200.0, LANE_WIDTH), (0.0, LANE_WIDTH)], LaneTag::Opposite),
            lane(&[(0.0, -LANE_WIDTH), (200.0, -LANE_WIDTH)], LaneTag::Emergency),
        ],
        route,
        traffic_controls: vec![],
        agents: vec![
            car(
                line(&[(0.0, 0.0), (220.0, 0.0)]),
                Range::new(22.0, 32.0),
                Range::new(4.0, 6.0),
                Range::new(4.0, 6.0),
                AgentBehavior::Reactive,
            ),
            car(oncoming.clone(), Range::new(40.0, 90.0), Range::new(8.0, 10.0), Range::fixed(9.0), AgentBehavior::Scripted),
            car(oncoming, Range::new(130.0, 170.0), Range::new(8.0, 10.0), Range::fixed(9.0), AgentBehavior::Scripted),
        ],
        pedestrians: vec![],
        ego: ego(Range::new(6.0, 8.0)),
        max_steps: 400,
    }
}

fn quarter_arc(center: (f64, f64), radius: f64, from: f64, to: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|k| {
            let t = from + (to - from) * k as f64 / n as f64;
            (center.0 + radius * t.cos(), center.1 + radius * t.sin())
        })
        .collect()
}

/// Signalized junction: the ego turns left across scripted oncoming traffic.
pub fn left_turn() -> Scenario {
    let h = 0.5 * LANE_WIDTH;
    let j = 7.0;
    let arc = quarter_arc((-j, -j), j + h, 0.0, FRAC_PI_2, 12);
    let mut route_pts = vec![(h, -60.0)];
    route_pts.extend(arc.iter().copied());
    route_pts.push((-70.0, h));
    let route = line(&route_pts);
    let stop_line = 60.0 - j;
    let oncoming = line(&[(-h, 150.0), (-h, -80.0)]);
    let flow = |start: Range| car(oncoming.clone(), start, Range::new(8.0, 10.0), Range::fixed(9.0), AgentBehavior::Scripted);
    Scenario {
        name: String::from("left_turn"),
        lanes: vec![
            lane(&[(h, -80.0), (h, 80.0)], LaneTag::Driving),
            lane(&[(-h, 150.0), (-h, -80.0)], LaneTag::Opposite),
            Lane { centerline: line(&arc), width: LANE_WIDTH, tag: LaneTag::Connector },
            lane(&[(-j, h), (-80.0, h)], LaneTag::Driving),
            lane(&[(-80.0, -h), (80.0, -h)], LaneTag::Opposite),
        ],
        traffic_controls: vec![TrafficControl {
            kind: ControlKind::RedLight,
            trigger_zone: trigger_zone(&route, stop_line, 5.0, 3.0),
            stop_line_arclength: stop_line,
            schedule: Some(PhaseSchedule { green_steps: 160, red_steps: 60, offset: StepRange { lo: 0, hi: 219 } }),
        }],
        route,
        agents: vec![flow(Range::new(20.0, 45.0)), flow(Range::new(65.0, 90.0)), flow(Range::new(110.0, 135.0))],
        pedestrians: vec![],
        ego: ego(Range::new(5.0, 8.0)),
        max_steps: 350,
    }
}

/// Straight road with a pedestrian stepping out from the right curb.
pub fn pedestrian_crossing() -> Scenario {
    Scenario {
        name: String::from("pedestrian_crossing"),
        lanes: vec![
            lane(&[(0.0, 0.0), (150.0, 0.0)], LaneTag::Driving),
            lane(&[(150.0, LANE_WIDTH), (0.0, LANE_WIDTH)], LaneTag::Opposite),
        ],
        route: line(&[(0.0, 0.0), (130.0, 0.0)]),
        traffic_controls: vec![],
        agents: vec![],
        pedestrians: vec![PedestrianSpec {
            spawn_step: StepRange { lo: 20, hi: 40 },
            crossing: line(&[(45.0, -5.0), (45.0, 8.0)]),
            speed: Range::new(1.2, 1.8),
        }],
        ego: ego(Range::new(7.0, 9.0)),
        max_steps: 300,
    }
}

/// Four-way junction with a stop sign for the ego and cross traffic with priority.
pub fn stop_sign() -> Scenario {
    let h = 0.5 * LANE_WIDTH;
    let stop_line = 55.0;
    let route = line(&[(0.0, 0.0), (130.0, 0.0)]);
    let cx = stop_line + 2.0 + LANE_WIDTH;
    Scenario {
        name: String::from("stop_sign"),
        lanes: vec![
            lane(&[(0.0, 0.0), (150.0, 0.0)], LaneTag::Driving),
            lane(&[(150.0, LANE_WIDTH), (0.0, LANE_WIDTH)], LaneTag::Opposite),
            lane(&[(cx + h, -70.0), (cx + h, 70.0)], LaneTag::Driving),
            lane(&[(cx - h, 70.0), (cx - h, -70.0)], LaneTag::Driving),
        ],
        traffic_controls: vec![TrafficControl {
            kind: ControlKind::StopSign,
            trigger_zone: trigger_zone(&route, stop_line, 5.0, 3.0),
            stop_line_arclength: stop_line,
            schedule: None,
        }],
        route,
        agents: vec![
            car(
                line(&[(cx + h, -90.0), (cx + h, 90.0)]),
                Range::new(0.0, 40.0),
                Range::new(7.0, 9.0),
                Range::new(7.0, 9.0),
                AgentBehavior::Reactive,
            ),
            car(
                line(&[(cx - h, 90.0), (cx - h, -90.0)]),
                Range::new(20.0, 60.0),
                Range::new(7.0, 9.0),
                Range::fixed(8.0),
                AgentBehavior::Scripted,
            ),
        ],
        pedestrians: vec![],
        ego: ego(Range::new(6.0, 8.0)),
        max_steps: 350,
    }
}

/// On-ramp merging into a main lane with reactive side flow.
pub fn merge() -> Scenario {
    let main = line(&[(-40.0, 0.0), (240.0, 0.0)]);
    let flow = |start: Range| car(main.clone(), start, Range::new(7.0, 9.0), Range::new(8.0, 10.0), AgentBehavior::Reactive);
    Scenario {
        name: String::from("merge"),
        lanes: vec![
            lane(&[(-40.0, 0.0), (200.0, 0.0)], LaneTag::Driving),
            lane(&[(0.0, -LANE_WIDTH), (70.0, -LANE_WIDTH)], LaneTag::Driving),
        ],
        route: line(&[(0.0, -LANE_WIDTH), (35.0, -LANE_WIDTH), (65.0, 0.0), (170.0, 0.0)]),
        traffic_controls: vec![],
        agents: vec![flow(Range::new(20.0, 35.0)), flow(Range::new(55.0, 70.0)), flow(Range::new(90.0, 105.0))],
        pedestrians: vec![],
        ego: ego(Range::new(6.0, 8.0)),
        max_steps: 350,
    }
}

/// Every template, in [`TemplateKind::ALL`] order.
pub fn all() -> Vec<Scenario> {
    TemplateKind::ALL.iter().map(|k| k.scenario()).collect()
}
