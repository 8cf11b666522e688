//! Deterministic reference predictors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Grid, GridSpec, OccupancyGrid, Point2};
use crate::losses::PredictionSet;
use crate::scene::raster::{rasterize_with_flow, Footprint};
use crate::scene::{InputFeatures, Scenario, CURRENT_INDEX, NUM_WAYPOINTS, STEPS_PER_WAYPOINT, TIMESTEP_S};

/// Logit magnitude standing in for certainty; sigmoid(15) is within 1e-6
/// of 1 while cross-entropy stays finite.
pub const CERTAIN_LOGIT: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Persistence,
    #[serde(alias = "cv")]
    ConstantVelocity,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::ConstantVelocity => "cv",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(BaselineKind::Persistence),
            "cv" | "constant_velocity" | "constant-velocity" => Ok(BaselineKind::ConstantVelocity),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}' (expected persistence or cv)"
            ))),
        }
    }
}

fn certain_logits(occ: &OccupancyGrid) -> Grid {
    occ.map(|v| if v >= 0.5 { CERTAIN_LOGIT } else { -CERTAIN_LOGIT })
}

fn empty_logits(spec: GridSpec) -> Grid {
    Grid::from_fn(spec, 1, |_, _, _| -CERTAIN_LOGIT)
}

/// Everything stays where it is now.
pub fn persistence_predict(input: &InputFeatures) -> PredictionSet {
    let observed = certain_logits(input.current_occ());
    PredictionSet {
        observed_logits: vec![observed; NUM_WAYPOINTS],
        occluded_logits: vec![empty_logits(input.spec); NUM_WAYPOINTS],
        flow: vec![FlowField::zeros(input.spec); NUM_WAYPOINTS],
    }
}

/// Extrapolates every currently valid agent at its current velocity with a
/// fixed heading, rasterizing occupancy and backward flow at each waypoint
/// the same way ground truth is built.
pub fn constant_velocity_predict(input: &InputFeatures, scenario: &Scenario) -> Result<PredictionSet> {
    scenario.ensure_timesteps()?;
    let spec = input.spec;
    let movers: Vec<MovingBox> = scenario
        .agents
        .iter()
        .filter(|a| input.classes.contains(a.class))
        .filter_map(|a| {
            let s = a.state(CURRENT_INDEX)?;
            Some(MovingBox {
                start: a.footprint_at(CURRENT_INDEX)?,
                velocity: (s.vx, s.vy),
            })
        })
        .collect();

    let horizon = |k: usize| (k * STEPS_PER_WAYPOINT) as f64 * TIMESTEP_S;
    let mut observed_logits = Vec::with_capacity(NUM_WAYPOINTS);
    let mut flow = Vec::with_capacity(NUM_WAYPOINTS);
    for k in 1..=NUM_WAYPOINTS {
        let items: Vec<(Footprint, Option<Footprint>)> = movers
            .iter()
            .map(|m| (m.at(horizon(k)), Some(m.at(horizon(k - 1)))))
            .collect();
        let (occ, fl) = rasterize_with_flow(&spec, &items);
        observed_logits.push(certain_logits(&occ));
        flow.push(fl);
    }
    Ok(PredictionSet {
        observed_logits,
        occluded_logits: vec![empty_logits(spec); NUM_WAYPOINTS],
        flow,
    })
}

pub fn predict(kind: BaselineKind, input: &InputFeatures, scenario: &Scenario) -> Result<PredictionSet> {
    match kind {
        BaselineKind::Persistence => Ok(persistence_predict(input)),
        BaselineKind::ConstantVelocity => constant_velocity_predict(input, scenario),
    }
}

struct MovingBox {
    start: Footprint,
    velocity: (f64, f64),
}

impl MovingBox {
    fn at(&self, seconds: f64) -> Footprint {
        Footprint {
            center: Point2::new(
                self.start.center.x + self.velocity.0 * seconds,
                self.start.center.y + self.velocity.1 * seconds,
            ),
            ..self.start
        }
    }
}
