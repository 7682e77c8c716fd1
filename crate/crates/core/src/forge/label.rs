//! Ground-truth maneuver and lane labels computed from full futures.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Maneuver, Scenario, HZ};
use crate::scene::{wrap_angle, LaneGraph, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Fewer perceived history steps than this makes an agent unknown.
    pub u_min: usize,
    /// Mean future speed below which a yielding agent counts as stopped.
    pub stop_speed: f64,
    /// Mean future acceleration below which a yielding agent decelerates.
    pub decel: f64,
    /// Longitudinal reach of a yield cause, meters.
    pub yield_distance: f64,
    /// Longitudinal reach of a lead agent for following, meters.
    pub follow_distance: f64,
    /// Half width of the corridor ahead of an agent, meters.
    pub lateral_band: f64,
    pub follow_alignment_deg: f64,
    pub heading_change_deg: f64,
    pub lane_half_width: f64,
    /// Distance under which a future point touches a lane vector.
    pub lane_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            u_min: 5,
            stop_speed: 0.5,
            decel: -0.5,
            yield_distance: 15.0,
            follow_distance: 30.0,
            lateral_band: 2.0,
            follow_alignment_deg: 10.0,
            heading_change_deg: 15.0,
            lane_half_width: 1.75,
            lane_threshold: 1.5,
        }
    }
}

/// Positions for t = 0..=t_fut, or only t = 0 when the future is unknown.
fn positions(sc: &Scenario, i: usize) -> Vec<Point> {
    let a = &sc.agents[i];
    let mut p = vec![a.anchor];
    if let Some(f) = &a.future {
        p.extend(f.iter().copied());
    }
    p
}

/// Heading at every time in `pos`, holding the last value while stationary.
fn headings(sc: &Scenario, i: usize, pos: &[Point]) -> Vec<f64> {
    let first_move = pos
        .windows(2)
        .map(|w| w[1].sub(w[0]))
        .find(|d| d.norm() > 0.05)
        .map(|d| d.y.atan2(d.x));
    let mut h = sc.agents[i].heading().or(first_move).unwrap_or(0.0);
    let mut out = vec![h];
    for w in pos.windows(2) {
        let d = w[1].sub(w[0]);
        if d.norm() > 0.05 {
            h = d.y.atan2(d.x);
        }
        out.push(h);
    }
    out
}

fn frame_coords(from: Point, heading: f64, to: Point) -> (f64, f64) {
    let (s, c) = heading.sin_cos();
    let r = to.sub(from);
    (r.x * c + r.y * s, -r.x * s + r.y * c)
}

fn has_yield_cause(sc: &Scenario, i: usize, pos: &[Point], head: &[f64], cfg: &LabelConfig) -> bool {
    (0..sc.agents.len()).filter(|&j| j != i).any(|j| {
        let other = positions(sc, j);
        pos.iter().zip(head).zip(&other).any(|((&p, &h), &q)| {
            let (lon, lat) = frame_coords(p, h, q);
            lon > 0.0 && lon <= cfg.yield_distance && lat.abs() <= cfg.lateral_band
        })
    })
}

fn has_lead(sc: &Scenario, i: usize, head0: f64, cfg: &LabelConfig) -> bool {
    let me = &sc.agents[i];
    let tol = cfg.follow_alignment_deg.to_radians();
    sc.agents.iter().enumerate().filter(|(j, _)| *j != i).any(|(_, o)| {
        let (lon, lat) = frame_coords(me.anchor, head0, o.anchor);
        let aligned = o.heading().is_some_and(|h| wrap_angle(h - head0).abs() <= tol);
        lon > 0.0 && lon <= cfg.follow_distance && lat.abs() <= cfg.lateral_band && aligned
    })
}

/// Lane vectors reachable from `start` along successor or predecessor links.
fn corridor(g: &LaneGraph, start: usize) -> BTreeSet<usize> {
    let mut seen: BTreeSet<usize> = [start].into();
    for set in [&g.succ[0], &g.pred[0]] {
        let mut stack = vec![start];
        let mut local: BTreeSet<usize> = [start].into();
        while let Some(v) = stack.pop() {
            for &(_, w) in set.range((v, 0)..=(v, usize::MAX)) {
                if local.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.extend(local);
    }
    seen
}

fn leaves_corridor(sc: &Scenario, pos: &[Point], cfg: &LabelConfig) -> bool {
    let g = &sc.graph;
    let Some((start, _)) = g.nearest_vector(pos[0]) else {
        return false;
    };
    let lane = corridor(g, start);
    pos[1..].iter().any(|&p| {
        let on_map = g.nearest_vector(p).is_some_and(|(_, d)| d <= cfg.lane_half_width);
        let in_lane = lane
            .iter()
            .any(|&v| g.vectors[v].distance_to(p) <= cfg.lane_half_width);
        on_map && !in_lane
    })
}

/// Priority-ordered maneuver label of agent `i`.
pub fn label_maneuver(sc: &Scenario, i: usize, cfg: &LabelConfig) -> Maneuver {
    let a = &sc.agents[i];
    if a.perceived_frames() < cfg.u_min {
        return Maneuver::U;
    }
    let pos = positions(sc, i);
    let head = headings(sc, i, &pos);
    if pos.len() > 1 && has_yield_cause(sc, i, &pos, &head, cfg) {
        let steps = (pos.len() - 1) as f64;
        let mean_speed = pos.windows(2).map(|w| w[0].dist(w[1])).sum::<f64>() * HZ / steps;
        if mean_speed < cfg.stop_speed {
            return Maneuver::S;
        }
        let max_turn = head.iter().map(|h| wrap_angle(h - head[0]).abs()).fold(0.0, f64::max);
        if max_turn > cfg.heading_change_deg.to_radians() || leaves_corridor(sc, &pos, cfg) {
            return Maneuver::N;
        }
        let v0 = a.current_speed(HZ);
        let n = pos.len();
        let v1 = pos[n - 1].dist(pos[n - 2]) * HZ;
        if (v1 - v0) / (steps / HZ) < cfg.decel {
            return Maneuver::D;
        }
    }
    if has_lead(sc, i, head[0], cfg) {
        return Maneuver::F;
    }
    Maneuver::I
}

/// Marks every lane vector that some future point passes within `threshold` of.
pub fn label_lanes(future: &[Point], graph: &LaneGraph, threshold: f64) -> Vec<bool> {
    graph
        .vectors
        .iter()
        .map(|v| future.iter().any(|&p| v.distance_to(p) < threshold))
        .collect()
}
