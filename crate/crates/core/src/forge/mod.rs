//! Synthetic scenarios: toy maps, kinematic agents, labels and noise.

mod io;
mod label;
mod maps;
mod noise;
mod sim;

pub use io::{
    load_scenarios, read_scenarios, save_scenarios, write_scenarios, ScenarioReader, ScenarioWriter,
    SCENARIO_FORMAT, SCENARIO_VERSION,
};
pub use label::{label_lanes, label_maneuver, LabelConfig};
pub use maps::{map_polylines, map_routes, MapKind, LANE_WIDTH};
pub use noise::{inject_noise, NoiseMode, NoiseSpec};
pub use sim::{generate, generate_scenario, generate_with, AgentPlan, GenConfig, Route};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AgentTrack, Frame, LaneGraph, SceneError};

pub const T_HST: usize = 20;
pub const T_FUT: usize = 30;
pub const HZ: f64 = 10.0;
pub const DT: f64 = 1.0 / HZ;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("map `{map}` cannot hold {requested} agents")]
    MapTooSmall { map: String, requested: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ForgeError>;

/// Maneuver classes in priority order (index 0 wins ties).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Maneuver {
    /// Yield and stop.
    S,
    /// Yield with nudge or lane change.
    N,
    /// Yield and decrease speed.
    D,
    /// Following a lead agent.
    F,
    /// Ignore: free to act.
    I,
    /// Unknown: perceived too briefly.
    U,
}

impl Maneuver {
    pub const ALL: [Maneuver; 6] = [
        Maneuver::S,
        Maneuver::N,
        Maneuver::D,
        Maneuver::F,
        Maneuver::I,
        Maneuver::U,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Maneuver> {
        Maneuver::ALL.get(i).copied()
    }

    /// Priority number, 1 (highest) to 6.
    pub fn priority(self) -> usize {
        self.index() + 1
    }

    pub fn is_yield(self) -> bool {
        matches!(self, Maneuver::S | Maneuver::N | Maneuver::D)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Maneuver::S => "S",
            Maneuver::N => "N",
            Maneuver::D => "D",
            Maneuver::F => "F",
            Maneuver::I => "I",
            Maneuver::U => "U",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub map_kind: MapKind,
    pub seed: u64,
    pub graph: LaneGraph,
    /// Index 0 is the ego vehicle.
    pub agents: Vec<AgentTrack>,
    pub maneuver_labels: Vec<Maneuver>,
    /// One row per agent, one column per lane vector.
    pub lane_labels: Vec<Vec<bool>>,
}

impl Scenario {
    pub fn ego(&self) -> &AgentTrack {
        &self.agents[0]
    }

    pub fn frame(&self) -> Frame {
        Frame::from_ego(self.ego())
    }

    /// Re-expresses every position, displacement and heading in the ego frame.
    pub fn to_local_frame(&self) -> Scenario {
        let tf = self.frame().to_local();
        Scenario {
            graph: tf.apply_graph(&self.graph),
            agents: self.agents.iter().map(|a| tf.apply_track(a)).collect(),
            ..self.clone()
        }
    }

    /// Recomputes both label sets from the stored futures.
    pub fn relabel(&mut self, cfg: &LabelConfig) {
        self.maneuver_labels = (0..self.agents.len())
            .map(|i| label_maneuver(self, i, cfg))
            .collect();
        self.lane_labels = self
            .agents
            .iter()
            .map(|a| label_lanes(a.future.as_deref().unwrap_or(&[]), &self.graph, cfg.lane_threshold))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_order_matches_symbols() {
        let syms: Vec<_> = Maneuver::ALL.iter().map(|m| m.symbol()).collect();
        assert_eq!(syms, ["S", "N", "D", "F", "I", "U"]);
        assert_eq!(Maneuver::S.priority(), 1);
        assert_eq!(Maneuver::U.priority(), 6);
        assert!(Maneuver::D.is_yield() && !Maneuver::F.is_yield());
    }
}
