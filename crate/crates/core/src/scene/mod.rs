//! Scenario model: agent tracks over a 91-step window plus static map data.

pub mod raster;
pub mod synthetic;
mod targets;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Point2};

pub use raster::{rasterize_map, rasterize_occupancy, rasterize_with_flow, Footprint, MAP_CHANNELS};
pub use synthetic::{make_synthetic_scenario, make_synthetic_scenario_with, SyntheticConfig, SyntheticKind};
pub use targets::{
    assemble_input, build_history_flow, build_history_flow_with_stride, build_waypoint_targets, AgentStateTensor,
    InputFeatures, WaypointTargets,
};

/// Total timesteps per scenario: 10 history, 1 current, 80 future.
pub const NUM_TIMESTEPS: usize = 91;
pub const CURRENT_INDEX: usize = 10;
pub const HISTORY_STEPS: usize = 10;
pub const NUM_WAYPOINTS: usize = 8;
pub const STEPS_PER_WAYPOINT: usize = 10;
pub const TIMESTEP_S: f64 = 0.1;
pub const FREQ_HZ: f64 = 10.0;
pub const DEFAULT_MAX_AGENTS: usize = 64;
/// Values per agent per step in the state tensor: x, y, vx, vy, heading, class.
pub const STATE_FEATURES: usize = 6;

/// Timestep index of waypoint `k` (1-based).
pub const fn waypoint_index(k: usize) -> usize {
    CURRENT_INDEX + STEPS_PER_WAYPOINT * k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentClass {
    pub fn code(self) -> f64 {
        match self {
            AgentClass::Vehicle => 0.0,
            AgentClass::Pedestrian => 1.0,
            AgentClass::Cyclist => 2.0,
        }
    }
}

/// Which agent classes a raster includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassFilter {
    pub vehicle: bool,
    pub pedestrian: bool,
    pub cyclist: bool,
}

impl ClassFilter {
    pub const VEHICLES: ClassFilter = ClassFilter {
        vehicle: true,
        pedestrian: false,
        cyclist: false,
    };
    pub const ALL: ClassFilter = ClassFilter {
        vehicle: true,
        pedestrian: true,
        cyclist: true,
    };

    pub fn from_classes(classes: &[AgentClass]) -> Self {
        let has = |c| classes.contains(&c);
        Self {
            vehicle: has(AgentClass::Vehicle),
            pedestrian: has(AgentClass::Pedestrian),
            cyclist: has(AgentClass::Cyclist),
        }
    }

    pub fn contains(&self, class: AgentClass) -> bool {
        match class {
            AgentClass::Vehicle => self.vehicle,
            AgentClass::Pedestrian => self.pedestrian,
            AgentClass::Cyclist => self.cyclist,
        }
    }
}

impl Default for ClassFilter {
    fn default() -> Self {
        Self::VEHICLES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        Self::default()
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: i64,
    pub class: AgentClass,
    #[serde(rename = "length_m")]
    pub length: f64,
    #[serde(rename = "width_m")]
    pub width: f64,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn state(&self, t: usize) -> Option<&AgentState> {
        self.states.get(t).filter(|s| s.valid)
    }

    pub fn footprint_at(&self, t: usize) -> Option<Footprint> {
        self.state(t).map(|s| Footprint {
            center: s.position(),
            heading: s.heading,
            length: self.length,
            width: self.width,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    RoadLine,
    LaneEdge,
    Crosswalk,
}

impl PolylineKind {
    pub const ALL: [PolylineKind; 3] = [PolylineKind::RoadLine, PolylineKind::LaneEdge, PolylineKind::Crosswalk];

    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    #[serde(rename = "type")]
    pub kind: PolylineKind,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightState {
    pub const ALL: [LightState; 4] = [
        LightState::Red,
        LightState::Yellow,
        LightState::Green,
        LightState::Unknown,
    ];

    pub fn channel(self) -> usize {
        PolylineKind::ALL.len() + self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub x: f64,
    pub y: f64,
    pub states: Vec<LightState>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapData {
    #[serde(default)]
    pub polylines: Vec<Polyline>,
    #[serde(default)]
    pub traffic_lights: Vec<TrafficLight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub freq_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub agents: Vec<AgentTrack>,
    #[serde(default)]
    pub map: MapData,
}

impl Scenario {
    pub fn empty(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            freq_hz: FREQ_HZ,
            grid: None,
            agents: Vec::new(),
            map: MapData::default(),
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self, max_agents: usize) -> Result<()> {
        if self.freq_hz != FREQ_HZ {
            return Err(Error::Freq(self.freq_hz));
        }
        if self.agents.len() > max_agents {
            return Err(Error::MalformedScenario(format!(
                "{} agents exceeds the limit of {max_agents}",
                self.agents.len()
            )));
        }
        if let Some(spec) = &self.grid {
            spec.validate()?;
        }
        let mut ids = HashSet::new();
        for (i, agent) in self.agents.iter().enumerate() {
            if !ids.insert(agent.id) {
                return Err(Error::MalformedScenario(format!("duplicate agent id {}", agent.id)));
            }
            if agent.states.len() != NUM_TIMESTEPS {
                return Err(Error::MalformedScenario(format!(
                    "agents[{i}].states has {} entries, expected {NUM_TIMESTEPS}",
                    agent.states.len()
                )));
            }
            let any_valid = agent.states.iter().any(|s| s.valid);
            if any_valid && !(agent.length > 0.0 && agent.width > 0.0) {
                return Err(Error::MalformedScenario(format!(
                    "agents[{i}] needs positive extent, got {}x{}",
                    agent.length, agent.width
                )));
            }
            for (t, s) in agent.states.iter().enumerate() {
                let finite = [s.x, s.y, s.vx, s.vy, s.heading].iter().all(|v| v.is_finite());
                if s.valid && !finite {
                    return Err(Error::MalformedScenario(format!(
                        "agents[{i}].states[{t}] is valid but not finite"
                    )));
                }
            }
        }
        for (i, line) in self.map.polylines.iter().enumerate() {
            if line.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::MalformedScenario(format!(
                    "map.polylines[{i}] has non-finite vertex"
                )));
            }
        }
        for (i, light) in self.map.traffic_lights.iter().enumerate() {
            if light.states.len() != NUM_TIMESTEPS {
                return Err(Error::MalformedScenario(format!(
                    "map.traffic_lights[{i}].states has {} entries, expected {NUM_TIMESTEPS}",
                    light.states.len()
                )));
            }
            if !(light.x.is_finite() && light.y.is_finite()) {
                return Err(Error::MalformedScenario(format!("map.traffic_lights[{i}] not finite")));
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_timesteps(&self) -> Result<()> {
        match self.agents.iter().position(|a| a.states.len() != NUM_TIMESTEPS) {
            Some(i) => Err(Error::MalformedScenario(format!(
                "agents[{i}].states has {} entries, expected {NUM_TIMESTEPS}",
                self.agents[i].states.len()
            ))),
            None => Ok(()),
        }
    }

    /// The scenario's grid: the declared override, else a default-size grid
    /// centered on the first currently-valid agent with its heading up.
    pub fn grid_spec(&self) -> GridSpec {
        if let Some(spec) = self.grid {
            return spec;
        }
        let anchor = self.agents.iter().find_map(|a| a.state(CURRENT_INDEX));
        match anchor {
            Some(s) => GridSpec::default().with_origin(s.position(), s.heading - std::f64::consts::FRAC_PI_2),
            None => GridSpec::default(),
        }
    }
}
