//! Map fixture files: one map per TOML document.
//!
//! ```toml
//! version = 1
//! name = "two-lane straight"
//! segment_length = 10.0      # optional, meters
//! overlap_threshold = 2.5    # optional, meters
//!
//! [[lanes]]
//! id = 1
//! points = [{ x = 0.0, y = 0.0 }, { x = 100.0, y = 0.0 }]
//! turn = "none"              # none | left | right
//! traf = false
//! intersect = false
//! successors = [3]
//! left = 2                   # optional neighbour lane id
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_lane_graph, LaneGraph, LanePolyline, Result, SceneError};

pub const MAP_FIXTURE_VERSION: u32 = 1;

fn default_segment() -> f64 {
    10.0
}

fn default_overlap() -> f64 {
    2.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFixture {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_segment")]
    pub segment_length: f64,
    #[serde(default = "default_overlap")]
    pub overlap_threshold: f64,
    pub lanes: Vec<LanePolyline>,
}

impl MapFixture {
    pub fn new(name: impl Into<String>, lanes: Vec<LanePolyline>) -> Self {
        MapFixture {
            version: MAP_FIXTURE_VERSION,
            name: name.into(),
            segment_length: default_segment(),
            overlap_threshold: default_overlap(),
            lanes,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let fx: MapFixture = toml::from_str(text).map_err(|e| SceneError::Fixture(e.to_string()))?;
        if fx.version != MAP_FIXTURE_VERSION {
            return Err(SceneError::Fixture(format!(
                "version {} unsupported (expected {MAP_FIXTURE_VERSION})",
                fx.version
            )));
        }
        Ok(fx)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::Fixture(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn build(&self) -> Result<LaneGraph> {
        build_lane_graph(&self.lanes, self.segment_length, self.overlap_threshold)
    }
}
