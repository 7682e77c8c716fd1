use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AgentTrack, HistoryStep, LaneGraph, Point};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// A planar rotation followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: f64,
    pub translation: Point,
}

impl RigidTransform {
    pub fn new(rotation: f64, translation: Point) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform::new(0.0, Point::default())
    }

    pub fn apply_vector(&self, v: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn apply_point(&self, p: Point) -> Point {
        self.apply_vector(p).add(self.translation)
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h + self.rotation)
    }

    pub fn apply_track(&self, t: &AgentTrack) -> AgentTrack {
        AgentTrack {
            history: t
                .history
                .iter()
                .map(|h| {
                    let v = self.apply_vector(Point::new(h.dx, h.dy));
                    HistoryStep {
                        dx: v.x,
                        dy: v.y,
                        flag: h.flag,
                    }
                })
                .collect(),
            anchor: self.apply_point(t.anchor),
            future: t
                .future
                .as_ref()
                .map(|f| f.iter().map(|&p| self.apply_point(p)).collect()),
            ..t.clone()
        }
    }

    pub fn apply_graph(&self, g: &LaneGraph) -> LaneGraph {
        let mut out = g.clone();
        for v in &mut out.vectors {
            let d = self.apply_vector(Point::new(v.dx, v.dy));
            v.dx = d.x;
            v.dy = d.y;
            v.heading = self.apply_heading(v.heading);
            v.anchor = self.apply_point(v.anchor);
        }
        out
    }
}

/// Ego-centred frame: origin at the ego anchor, +x along the ego heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Point,
    pub heading: f64,
    /// False when the ego never moved during its history; heading is then 0.
    pub heading_defined: bool,
}

impl Frame {
    pub fn from_ego(ego: &AgentTrack) -> Self {
        let heading = ego.heading();
        if heading.is_none() {
            log::warn!("ego heading undefined; framing with heading 0");
        }
        Frame {
            origin: ego.anchor,
            heading: heading.unwrap_or(0.0),
            heading_defined: heading.is_some(),
        }
    }

    /// Transform taking global coordinates into this frame.
    pub fn to_local(&self) -> RigidTransform {
        let rot = RigidTransform::new(-self.heading, Point::default());
        let t = rot.apply_vector(self.origin);
        RigidTransform::new(-self.heading, Point::new(-t.x, -t.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentClass;

    fn ego(anchor: Point, dx: f64, dy: f64) -> AgentTrack {
        AgentTrack {
            agent_id: 0,
            class: AgentClass::Car,
            history: vec![HistoryStep::perceived(dx, dy); 4],
            anchor,
            future: None,
        }
    }

    #[test]
    fn ego_facing_north() {
        let e = ego(Point::new(100.0, 50.0), 0.0, 1.0);
        let f = Frame::from_ego(&e).to_local();
        let o = f.apply_point(Point::new(100.0, 50.0));
        assert!(o.x.abs() < 1e-12 && o.y.abs() < 1e-12);
        let north = f.apply_point(Point::new(100.0, 51.0));
        assert!((north.x - 1.0).abs() < 1e-12 && north.y.abs() < 1e-12);
    }

    #[test]
    fn identity_pose_changes_nothing() {
        let e = ego(Point::default(), 1.0, 0.0);
        let f = Frame::from_ego(&e).to_local();
        let p = Point::new(3.5, -2.25);
        assert_eq!(f.apply_point(p), p);
        assert_eq!(f.apply_track(&e), e);
    }

    #[test]
    fn stationary_ego_falls_back_to_zero_heading() {
        let e = ego(Point::new(1.0, 1.0), 0.0, 0.0);
        let fr = Frame::from_ego(&e);
        assert!(!fr.heading_defined);
        assert_eq!(fr.heading, 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.5, 20.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((a - w) / (2.0 * PI)).round() * 2.0 * PI - (a - w) < 1e-9);
        }
    }
}
