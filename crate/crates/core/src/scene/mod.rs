//! Vectorized map and agent data model.

mod fixture;
mod frame;
mod graph;

pub use fixture::{MapFixture, MAP_FIXTURE_VERSION};
pub use frame::{wrap_angle, Frame, RigidTransform};
pub use graph::{
    build_lane_graph, dilated_adjacency, Direction, LaneGraph, LanePolyline, Relation,
    MAX_HOPS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("polyline {id}: {reason}")]
    DegeneratePolyline { id: u32, reason: String },
    #[error("polyline {id} references unknown lane {target}")]
    UnknownLane { id: u32, target: u32 },
    #[error("hop count {0} outside 1..=6")]
    HopRange(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("map fixture: {0}")]
    Fixture(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0);
    p.dist(a.lerp(b, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Bicycle,
    Pedestrian,
}

impl AgentClass {
    pub fn index(self) -> usize {
        match self {
            AgentClass::Car => 0,
            AgentClass::Bicycle => 1,
            AgentClass::Pedestrian => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    #[default]
    None,
    Left,
    Right,
}

impl Turn {
    pub fn index(self) -> usize {
        match self {
            Turn::None => 0,
            Turn::Left => 1,
            Turn::Right => 2,
        }
    }
}

/// One history record: displacement since the previous step and a
/// perception flag. Unperceived steps carry zero displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub dx: f64,
    pub dy: f64,
    pub flag: bool,
}

impl HistoryStep {
    pub fn perceived(dx: f64, dy: f64) -> Self {
        HistoryStep { dx, dy, flag: true }
    }

    pub fn missing() -> Self {
        HistoryStep {
            dx: 0.0,
            dy: 0.0,
            flag: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub class: AgentClass,
    /// Oldest first; the last entry is the step ending at t = 0.
    pub history: Vec<HistoryStep>,
    /// Position at t = 0.
    pub anchor: Point,
    /// Absolute positions for t = 1..=t_fut, when known.
    pub future: Option<Vec<Point>>,
}

impl AgentTrack {
    pub fn perceived_frames(&self) -> usize {
        self.history.iter().filter(|h| h.flag).count()
    }

    /// Speed at t = 0 in m/s from the last displacement at `hz`.
    pub fn current_speed(&self, hz: f64) -> f64 {
        self.history
            .last()
            .map_or(0.0, |h| h.dx.hypot(h.dy) * hz)
    }

    /// Heading of the most recent non-zero perceived displacement.
    pub fn heading(&self) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|h| h.flag && (h.dx != 0.0 || h.dy != 0.0))
            .map(|h| h.dy.atan2(h.dx))
    }

    /// Absolute positions of the history, oldest first, ending at the anchor.
    pub fn history_positions(&self) -> Vec<Point> {
        let mut pts = vec![self.anchor];
        let mut p = self.anchor;
        for h in self.history.iter().rev() {
            p = Point::new(p.x - h.dx, p.y - h.dy);
            pts.push(p);
        }
        pts.reverse();
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneVector {
    /// Source polyline id.
    pub lane_id: u32,
    pub dx: f64,
    pub dy: f64,
    pub heading: f64,
    pub turn: Turn,
    pub traf: bool,
    pub intersect: bool,
    /// Segment midpoint.
    pub anchor: Point,
}

impl LaneVector {
    pub fn start(&self) -> Point {
        Point::new(self.anchor.x - self.dx / 2.0, self.anchor.y - self.dy / 2.0)
    }

    pub fn end(&self) -> Point {
        Point::new(self.anchor.x + self.dx / 2.0, self.anchor.y + self.dy / 2.0)
    }

    pub fn length(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn distance_to(&self, p: Point) -> f64 {
        point_segment_distance(p, self.start(), self.end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(10.0, 0.0);
        assert_eq!(point_segment_distance(Point::new(5.0, 1.0), a, b), 1.0);
        assert_eq!(point_segment_distance(Point::new(-3.0, 4.0), a, b), 5.0);
        assert_eq!(point_segment_distance(Point::new(13.0, 4.0), a, b), 5.0);
    }

    #[test]
    fn history_positions_end_at_anchor() {
        let t = AgentTrack {
            agent_id: 0,
            class: AgentClass::Car,
            history: vec![HistoryStep::perceived(1.0, 0.0); 3],
            anchor: Point::new(5.0, 2.0),
            future: None,
        };
        let p = t.history_positions();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], Point::new(2.0, 2.0));
        assert_eq!(*p.last().unwrap(), t.anchor);
        assert_eq!(t.heading(), Some(0.0));
        assert!((t.current_speed(10.0) - 10.0).abs() < 1e-12);
    }
}
