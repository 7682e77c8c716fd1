//! Framed network inputs extracted from a scenario.
//!
//! Everything here is expressed in the ego frame, so the result does not
//! depend on where the raw scenario sits in the world.

use crate::encoder::LaneAdjacency;
use crate::error::HtResult;
use crate::forge::{Maneuver, Scenario};
use crate::scene::{AgentTrack, Point};
use crate::tensor::Tensor;

pub const AGENT_FEATS: usize = 8;
pub const LANE_FEATS: usize = 11;
/// Anchor coordinates are divided by this before entering the network.
pub const POS_SCALE: f64 = 50.0;
/// Lane displacement scale.
const LANE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInputs {
    pub agent_ids: Vec<u32>,
    /// `[t_hst, AGENT_FEATS]` per agent.
    pub histories: Vec<Tensor>,
    /// Agent positions at t = 0.
    pub agent_pos: Vec<Point>,
    /// `[Nl, LANE_FEATS]`, `None` on an empty map.
    pub lane_feats: Option<Tensor>,
    /// Lane vector midpoints.
    pub lane_pos: Vec<Point>,
    pub adjacency: LaneAdjacency,
    /// Future positions relative to each agent's anchor, when known.
    pub futures: Vec<Option<Vec<Point>>>,
    pub maneuvers: Vec<Maneuver>,
    pub lane_labels: Vec<Vec<bool>>,
}

impl SceneInputs {
    pub fn from_scenario(sc: &Scenario, dilations: &[usize]) -> HtResult<SceneInputs> {
        let local = sc.to_local_frame();
        let n = local.agents.len();
        if sc.maneuver_labels.len() != n || sc.lane_labels.len() != n {
            return Err(crate::error::HtError::Labels(format!(
                "{n} agents but {} maneuver and {} lane label rows",
                sc.maneuver_labels.len(),
                sc.lane_labels.len()
            )));
        }
        let nl = local.graph.len();
        if let Some(row) = sc.lane_labels.iter().find(|r| r.len() != nl) {
            return Err(crate::error::HtError::Labels(format!(
                "lane label row of {} for {nl} lane vectors",
                row.len()
            )));
        }
        let lane_feats = (nl > 0).then(|| {
            Tensor::from_fn(nl, LANE_FEATS, |r, c| {
                let v = &local.graph.vectors[r];
                match c {
                    0 => v.dx / LANE_SCALE,
                    1 => v.dy / LANE_SCALE,
                    2 => v.heading.cos(),
                    3 => v.heading.sin(),
                    4..=6 => f64::from(u8::from(v.turn.index() == c - 4)),
                    7 => f64::from(u8::from(v.traf)),
                    8 => f64::from(u8::from(v.intersect)),
                    9 => v.anchor.x / POS_SCALE,
                    _ => v.anchor.y / POS_SCALE,
                }
            })
        });
        Ok(SceneInputs {
            agent_ids: local.agents.iter().map(|a| a.agent_id).collect(),
            histories: local.agents.iter().map(agent_features).collect(),
            agent_pos: local.agents.iter().map(|a| a.anchor).collect(),
            lane_feats,
            lane_pos: local.graph.vectors.iter().map(|v| v.anchor).collect(),
            adjacency: LaneAdjacency::from_graph(&local.graph, dilations)?,
            futures: local
                .agents
                .iter()
                .map(|a| a.future.as_ref().map(|f| f.iter().map(|p| p.sub(a.anchor)).collect()))
                .collect(),
            maneuvers: sc.maneuver_labels.clone(),
            lane_labels: sc.lane_labels.clone(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.histories.len()
    }

    pub fn n_lanes(&self) -> usize {
        self.lane_pos.len()
    }

    /// Largest absolute difference between two framings of the same scene;
    /// infinite when their shapes differ.
    pub fn max_abs_diff(&self, other: &SceneInputs) -> f64 {
        if self.n_agents() != other.n_agents()
            || self.n_lanes() != other.n_lanes()
            || self.adjacency != other.adjacency
            || self.maneuvers != other.maneuvers
            || self.lane_labels != other.lane_labels
        {
            return f64::INFINITY;
        }
        let pts = |a: &[Point], b: &[Point]| {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            a.iter()
                .zip(b)
                .map(|(p, q)| (p.x - q.x).abs().max((p.y - q.y).abs()))
                .fold(0.0, f64::max)
        };
        let mut d = pts(&self.agent_pos, &other.agent_pos).max(pts(&self.lane_pos, &other.lane_pos));
        for (a, b) in self.histories.iter().zip(&other.histories) {
            d = d.max(a.max_abs_diff(b));
        }
        if let (Some(a), Some(b)) = (&self.lane_feats, &other.lane_feats) {
            d = d.max(a.max_abs_diff(b));
        }
        for (a, b) in self.futures.iter().zip(&other.futures) {
            match (a, b) {
                (Some(a), Some(b)) => d = d.max(pts(a, b)),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        d
    }
}

/// Per-step features: displacement, perception flag, class one-hot and the
/// scaled anchor (repeated on every step).
fn agent_features(a: &AgentTrack) -> Tensor {
    let cls = a.class.index();
    Tensor::from_fn(a.history.len(), AGENT_FEATS, |r, c| {
        let h = &a.history[r];
        match c {
            0 => h.dx,
            1 => h.dy,
            2 => f64::from(u8::from(h.flag)),
            3..=5 => f64::from(u8::from(cls == c - 3)),
            6 => a.anchor.x / POS_SCALE,
            _ => a.anchor.y / POS_SCALE,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{generate_scenario, MapKind};
    use crate::scene::RigidTransform;

    fn moved(sc: &Scenario, tf: &RigidTransform) -> Scenario {
        Scenario {
            graph: tf.apply_graph(&sc.graph),
            agents: sc.agents.iter().map(|a| tf.apply_track(a)).collect(),
            ..sc.clone()
        }
    }

    #[test]
    fn shapes() {
        let sc = generate_scenario(MapKind::TJunction, 4, 2).unwrap();
        let x = SceneInputs::from_scenario(&sc, &[1, 2]).unwrap();
        assert_eq!(x.n_agents(), 4);
        assert_eq!(x.histories[0].shape(), &[20, AGENT_FEATS]);
        assert_eq!(x.lane_feats.as_ref().unwrap().shape(), &[sc.graph.len(), LANE_FEATS]);
        // The ego sits at the origin of its own frame.
        assert!(x.agent_pos[0].norm() < 1e-12);
        assert_eq!(x.futures[0].as_ref().unwrap().len(), 30);
    }

    #[test]
    fn rigid_motion_leaves_inputs_unchanged() {
        let sc = generate_scenario(MapKind::Crossing, 5, 9).unwrap();
        let base = SceneInputs::from_scenario(&sc, &[1, 2]).unwrap();
        for (rot, tx, ty) in [(0.7, 100.0, -40.0), (-2.9, -3e3, 1e3), (3.1, 0.0, 5.0)] {
            let tf = RigidTransform::new(rot, Point::new(tx, ty));
            let other = SceneInputs::from_scenario(&moved(&sc, &tf), &[1, 2]).unwrap();
            assert!(base.max_abs_diff(&other) <= 1e-9, "{}", base.max_abs_diff(&other));
        }
    }

    #[test]
    fn label_mismatch_rejected() {
        let mut sc = generate_scenario(MapKind::Straight, 3, 1).unwrap();
        sc.lane_labels[1].pop();
        assert!(SceneInputs::from_scenario(&sc, &[1, 2]).is_err());
    }
}
