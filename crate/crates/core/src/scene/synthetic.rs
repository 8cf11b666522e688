//! Seeded synthetic scenarios with analytic motion.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::grid::GridSpec;

use super::{
    AgentClass, AgentState, AgentTrack, LightState, MapData, Polyline, PolylineKind, Scenario, TrafficLight,
    CURRENT_INDEX, FREQ_HZ, NUM_TIMESTEPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Parked agents.
    Static,
    /// Constant-velocity agents.
    Linear,
    /// Constant speed and yaw rate.
    Turning,
    /// One observed linear agent; the rest are invalid at the current step
    /// and appear later.
    Appearing,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::Static,
        SyntheticKind::Linear,
        SyntheticKind::Turning,
        SyntheticKind::Appearing,
    ];

    fn salt(self) -> u64 {
        match self {
            SyntheticKind::Static => 0x5354,
            SyntheticKind::Linear => 0x4c49,
            SyntheticKind::Turning => 0x5455,
            SyntheticKind::Appearing => 0x4150,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Static => "static",
            SyntheticKind::Linear => "linear",
            SyntheticKind::Turning => "turning",
            SyntheticKind::Appearing => "appearing",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub min_agents: usize,
    pub max_agents: usize,
    /// Agents start (at the current step) within this distance of the origin
    /// along each axis.
    pub spawn_half_extent_m: f64,
    pub speed_range: (f64, f64),
    /// Yaw-rate magnitude range for turning agents, rad/s.
    pub yaw_rate_range: (f64, f64),
    pub length_m: f64,
    pub width_m: f64,
    /// First valid step for late-appearing agents, inclusive range.
    pub appear_range: (usize, usize),
    pub grid: Option<GridSpec>,
    pub with_map: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_agents: 2,
            max_agents: 4,
            spawn_half_extent_m: 12.0,
            speed_range: (2.0, 5.0),
            yaw_rate_range: (0.15, 0.35),
            length_m: 4.5,
            width_m: 2.0,
            appear_range: (CURRENT_INDEX + 21, CURRENT_INDEX + 51),
            grid: Some(GridSpec::default()),
            with_map: true,
        }
    }
}

pub fn make_synthetic_scenario(seed: u64, kind: SyntheticKind) -> Scenario {
    make_synthetic_scenario_with(seed, kind, &SyntheticConfig::default())
}

fn time_of(i: usize) -> f64 {
    (i as f64 - CURRENT_INDEX as f64) / FREQ_HZ
}

pub fn make_synthetic_scenario_with(seed: u64, kind: SyntheticKind, cfg: &SyntheticConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind.salt());
    let n = rng.random_range(cfg.min_agents..=cfg.max_agents.max(cfg.min_agents));
    let half = cfg.spawn_half_extent_m;

    let mut agents = Vec::with_capacity(n);
    for a in 0..n {
        let x0 = rng.random_range(-half..=half);
        let y0 = rng.random_range(-half..=half);
        let h0 = rng.random_range(-PI..PI);
        let speed = match kind {
            SyntheticKind::Static => 0.0,
            _ => rng.random_range(cfg.speed_range.0..=cfg.speed_range.1),
        };
        let yaw_rate = match kind {
            SyntheticKind::Turning => {
                let mag = rng.random_range(cfg.yaw_rate_range.0..=cfg.yaw_rate_range.1);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
            _ => 0.0,
        };
        let first_valid = match kind {
            SyntheticKind::Appearing if a > 0 => rng.random_range(cfg.appear_range.0..=cfg.appear_range.1),
            _ => 0,
        };

        let states = (0..NUM_TIMESTEPS)
            .map(|i| {
                let t = time_of(i);
                let (x, y, heading) = if yaw_rate == 0.0 {
                    let (s, c) = h0.sin_cos();
                    (x0 + speed * c * t, y0 + speed * s * t, h0)
                } else {
                    let h = h0 + yaw_rate * t;
                    let r = speed / yaw_rate;
                    (x0 + r * (h.sin() - h0.sin()), y0 - r * (h.cos() - h0.cos()), h)
                };
                let (s, c) = heading.sin_cos();
                AgentState {
                    x,
                    y,
                    vx: speed * c,
                    vy: speed * s,
                    heading,
                    valid: i >= first_valid,
                }
            })
            .collect();
        agents.push(AgentTrack {
            id: a as i64 + 1,
            class: AgentClass::Vehicle,
            length: cfg.length_m,
            width: cfg.width_m,
            states,
        });
    }

    let map = if cfg.with_map {
        let dir = rng.random_range(-PI..PI);
        let off = rng.random_range(-half..=half);
        let (s, c) = dir.sin_cos();
        let span = 60.0;
        let line = |shift: f64| {
            vec![
                [-span * c - (off + shift) * s, -span * s + (off + shift) * c],
                [span * c - (off + shift) * s, span * s + (off + shift) * c],
            ]
        };
        let switch = rng.random_range(20..70);
        MapData {
            polylines: vec![
                Polyline {
                    kind: PolylineKind::RoadLine,
                    points: line(0.0),
                },
                Polyline {
                    kind: PolylineKind::LaneEdge,
                    points: line(3.5),
                },
            ],
            traffic_lights: vec![TrafficLight {
                x: rng.random_range(-half..=half),
                y: rng.random_range(-half..=half),
                states: (0..NUM_TIMESTEPS)
                    .map(|i| match i {
                        i if i < switch => LightState::Green,
                        i if i < switch + 10 => LightState::Yellow,
                        _ => LightState::Red,
                    })
                    .collect(),
            }],
        }
    } else {
        MapData::default()
    };

    Scenario {
        id: format!("synthetic-{kind}-{seed}"),
        freq_hz: FREQ_HZ,
        grid: cfg.grid,
        agents,
        map,
    }
}
