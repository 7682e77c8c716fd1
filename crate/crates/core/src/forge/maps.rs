//! Built-in toy maps in a canonical frame. Lanes are 3.5 m apart.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scene::{LanePolyline, Point, Turn};

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Straight,
    Curve,
    LaneChange,
    #[serde(rename = "T_junction")]
    TJunction,
    Crossing,
}

impl MapKind {
    pub const ALL: [MapKind; 5] = [
        MapKind::Straight,
        MapKind::Curve,
        MapKind::LaneChange,
        MapKind::TJunction,
        MapKind::Crossing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Straight => "straight",
            MapKind::Curve => "curve",
            MapKind::LaneChange => "lane_change",
            MapKind::TJunction => "T_junction",
            MapKind::Crossing => "crossing",
        }
    }

    /// Whether agents may change into a neighbour lane.
    pub fn allows_lane_change(self) -> bool {
        matches!(self, MapKind::Straight | MapKind::Curve | MapKind::LaneChange)
    }

    /// Upper bound on agents the generator will place.
    pub fn capacity(self) -> usize {
        match self {
            MapKind::Straight | MapKind::Curve | MapKind::LaneChange => 12,
            MapKind::TJunction => 10,
            MapKind::Crossing => 14,
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown map kind `{s}`"))
    }
}

fn lane(id: u32, points: Vec<Point>, successors: &[u32]) -> LanePolyline {
    LanePolyline {
        id,
        points,
        turn: Turn::None,
        traf: false,
        intersect: false,
        successors: successors.to_vec(),
        left: None,
        right: None,
    }
}

fn seg(a: (f64, f64), b: (f64, f64)) -> Vec<Point> {
    vec![Point::new(a.0, a.1), Point::new(b.0, b.1)]
}

fn arc(center: Point, r: f64, a0: f64, a1: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            Point::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect()
}

/// Quadratic Bezier from `a` to `b` bending towards `c`.
fn bend(a: (f64, f64), c: (f64, f64), b: (f64, f64), n: usize) -> Vec<Point> {
    let (a, c, b) = (
        Point::new(a.0, a.1),
        Point::new(c.0, c.1),
        Point::new(b.0, b.1),
    );
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            a.lerp(c, t).lerp(c.lerp(b, t), t)
        })
        .collect()
}

fn turning(mut l: LanePolyline, turn: Turn) -> LanePolyline {
    l.turn = turn;
    l.intersect = true;
    l
}

fn through(mut l: LanePolyline) -> LanePolyline {
    l.intersect = true;
    l
}

fn stop_line(mut l: LanePolyline) -> LanePolyline {
    l.traf = true;
    l
}

fn two_lane(l1: Vec<Point>, l2: Vec<Point>) -> Vec<LanePolyline> {
    let mut a = lane(1, l1, &[]);
    let mut b = lane(2, l2, &[]);
    a.left = Some(2);
    b.right = Some(1);
    vec![a, b]
}

/// Centerline polylines of a built-in map.
pub fn map_polylines(kind: MapKind) -> Vec<LanePolyline> {
    const L: f64 = 150.0;
    match kind {
        MapKind::Straight | MapKind::LaneChange => {
            two_lane(seg((0.0, 0.0), (L, 0.0)), seg((0.0, LANE_WIDTH), (L, LANE_WIDTH)))
        }
        MapKind::Curve => {
            // Left-hand bend: lane 2 is the inner arc.
            let r = 75.0;
            let c = Point::new(0.0, r);
            let (a0, a1) = (-FRAC_PI_2, -FRAC_PI_2 + L / r);
            two_lane(arc(c, r, a0, a1, 150), arc(c, r - LANE_WIDTH, a0, a1, 150))
        }
        MapKind::TJunction => t_junction(),
        MapKind::Crossing => crossing(),
    }
}

fn t_junction() -> Vec<LanePolyline> {
    const A: f64 = 50.0;
    const J: f64 = 6.0;
    let h = LANE_WIDTH / 2.0;
    vec![
        // eastbound main road
        stop_line(lane(1, seg((-J - A, -h), (-J, -h)), &[2, 11])),
        through(lane(2, seg((-J, -h), (J, -h)), &[3])),
        lane(3, seg((J, -h), (J + A, -h)), &[]),
        // westbound main road
        stop_line(lane(4, seg((J + A, h), (J, h)), &[5, 12])),
        through(lane(5, seg((J, h), (-J, h)), &[6])),
        lane(6, seg((-J, h), (-J - A, h)), &[]),
        // side road from the south
        stop_line(lane(7, seg((h, -J - A), (h, -J)), &[9, 10])),
        lane(8, seg((-h, -J), (-h, -J - A)), &[]),
        turning(lane(9, bend((h, -J), (h, -h), (J, -h), 24), &[3]), Turn::Right),
        turning(lane(10, bend((h, -J), (h, h), (-J, h), 32), &[6]), Turn::Left),
        turning(lane(11, bend((-J, -h), (-h, -h), (-h, -J), 24), &[8]), Turn::Right),
        turning(lane(12, bend((J, h), (-h, h), (-h, -J), 32), &[8]), Turn::Left),
    ]
}

fn crossing() -> Vec<LanePolyline> {
    const A: f64 = 45.0;
    const J: f64 = 6.0;
    let h = LANE_WIDTH / 2.0;
    // Build the eastbound approach then rotate it to the other three arms.
    let rot = |p: Point, q: usize| {
        let a = q as f64 * FRAC_PI_2;
        let (s, c) = a.sin_cos();
        Point::new(c * p.x - s * p.y, s * p.x + c * p.y)
    };
    let mut out = Vec::new();
    for q in 0..4usize {
        let base = 10 * q as u32;
        let r = |pts: Vec<Point>| pts.into_iter().map(|p| rot(p, q)).collect::<Vec<_>>();
        let next_out = |k: usize| 10 * ((q + k) % 4) as u32 + 3;
        // approach, through, exit; turns leave from the approach
        out.push(stop_line(lane(
            base + 1,
            r(seg((-J - A, -h), (-J, -h))),
            &[base + 2, base + 4, base + 5],
        )));
        out.push(through(lane(base + 2, r(seg((-J, -h), (J, -h))), &[next_out(0)])));
        out.push(lane(base + 3, r(seg((J, -h), (J + A, -h))), &[]));
        // right turn ends on the arm rotated by -90 degrees
        out.push(turning(
            lane(base + 4, r(bend((-J, -h), (-h, -h), (-h, -J), 24)), &[next_out(3)]),
            Turn::Right,
        ));
        out.push(turning(
            lane(base + 5, r(bend((-J, -h), (h, -h), (h, J), 32)), &[next_out(1)]),
            Turn::Left,
        ));
    }
    out
}

/// Lane-id sequences from every source lane to every sink.
pub fn map_routes(polys: &[LanePolyline]) -> Vec<Vec<u32>> {
    let has_pred: std::collections::BTreeSet<u32> =
        polys.iter().flat_map(|p| p.successors.iter().copied()).collect();
    let by_id = |id: u32| polys.iter().find(|p| p.id == id).expect("known lane");
    let mut routes = Vec::new();
    let mut stack: Vec<Vec<u32>> = polys
        .iter()
        .filter(|p| !has_pred.contains(&p.id))
        .map(|p| vec![p.id])
        .collect();
    while let Some(r) = stack.pop() {
        let last = by_id(*r.last().unwrap());
        if last.successors.is_empty() || r.len() > 8 {
            routes.push(r);
        } else {
            for s in &last.successors {
                let mut n = r.clone();
                n.push(*s);
                stack.push(n);
            }
        }
    }
    routes.sort();
    routes
}
