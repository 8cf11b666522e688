use crate::error::Result;
use crate::grid::{combine_occupancy, FlowField, Grid, GridSpec, OccupancyGrid};

use super::raster::{backward_flow_at, for_each_cell_in, rasterize_map, rasterize_occupancy};
use super::{
    waypoint_index, ClassFilter, Scenario, CURRENT_INDEX, DEFAULT_MAX_AGENTS, HISTORY_STEPS, NUM_WAYPOINTS,
    STATE_FEATURES,
};

/// Ground truth for the 8 one-second waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointTargets {
    pub observed_occ: Vec<OccupancyGrid>,
    pub occluded_occ: Vec<OccupancyGrid>,
    pub flow: Vec<FlowField>,
}

impl WaypointTargets {
    pub fn num_waypoints(&self) -> usize {
        self.observed_occ.len()
    }

    pub fn spec(&self) -> &GridSpec {
        self.observed_occ[0].spec()
    }

    /// Occupancy of all agents at waypoint `k` (0-based).
    pub fn all_occ(&self, k: usize) -> OccupancyGrid {
        combine_occupancy(&self.observed_occ[k], &self.occluded_occ[k]).expect("targets share one spec")
    }
}

/// Waypoint ground truth: occupancy split by visibility at the current step,
/// plus backward flow between consecutive waypoints.
pub fn build_waypoint_targets(scenario: &Scenario, spec: &GridSpec, classes: ClassFilter) -> Result<WaypointTargets> {
    scenario.ensure_timesteps()?;
    let agents: Vec<_> = scenario.agents.iter().filter(|a| classes.contains(a.class)).collect();
    let mut observed_occ = Vec::with_capacity(NUM_WAYPOINTS);
    let mut occluded_occ = Vec::with_capacity(NUM_WAYPOINTS);
    let mut flow = Vec::with_capacity(NUM_WAYPOINTS);
    for k in 1..=NUM_WAYPOINTS {
        let (t, t_prev) = (waypoint_index(k), waypoint_index(k - 1));
        let mut obs = OccupancyGrid::zeros(*spec);
        let mut occ = OccupancyGrid::zeros(*spec);
        let mut fl = FlowField::zeros(*spec);
        let mut claimed = vec![false; spec.cells()];
        for agent in &agents {
            let Some(cur) = agent.footprint_at(t) else {
                continue;
            };
            let prev = agent.footprint_at(t_prev);
            let observed = agent.state(CURRENT_INDEX).is_some();
            let target = if observed { &mut obs } else { &mut occ };
            for_each_cell_in(spec, &cur, |r, c| {
                target.set_cell(r, c, 1.0);
                let i = r * spec.width_cells + c;
                if claimed[i] {
                    return;
                }
                claimed[i] = true;
                if let Some(prev) = &prev {
                    let (dx, dy) = backward_flow_at(spec, r, c, &cur, prev);
                    fl.set_cell(r, c, dx, dy);
                }
            });
        }
        observed_occ.push(obs);
        occluded_occ.push(occ);
        flow.push(fl);
    }
    Ok(WaypointTargets {
        observed_occ,
        occluded_occ,
        flow,
    })
}

/// Backward flow between consecutive history frames, most recent first:
/// field `j` relates frame t-j to frame t-j-1. Units are cells per step.
pub fn build_history_flow(scenario: &Scenario, spec: &GridSpec, classes: ClassFilter) -> Result<Vec<FlowField>> {
    build_history_flow_with_stride(scenario, spec, classes, 1)
}

/// As [`build_history_flow`] with frames `stride` steps apart. Pairs whose
/// earlier frame would precede the window are left zero.
pub fn build_history_flow_with_stride(
    scenario: &Scenario,
    spec: &GridSpec,
    classes: ClassFilter,
    stride: usize,
) -> Result<Vec<FlowField>> {
    scenario.ensure_timesteps()?;
    let stride = stride.max(1);
    let agents: Vec<_> = scenario.agents.iter().filter(|a| classes.contains(a.class)).collect();
    let mut fields = Vec::with_capacity(HISTORY_STEPS);
    for j in 0..HISTORY_STEPS {
        let mut fl = FlowField::zeros(*spec);
        let t = CURRENT_INDEX - j;
        if let Some(t_prev) = t.checked_sub(stride) {
            let mut claimed = vec![false; spec.cells()];
            for agent in &agents {
                let Some(cur) = agent.footprint_at(t) else {
                    continue;
                };
                let prev = agent.footprint_at(t_prev);
                for_each_cell_in(spec, &cur, |r, c| {
                    let i = r * spec.width_cells + c;
                    if std::mem::replace(&mut claimed[i], true) {
                        return;
                    }
                    if let Some(prev) = &prev {
                        let (dx, dy) = backward_flow_at(spec, r, c, &cur, prev);
                        fl.set_cell(r, c, dx, dy);
                    }
                });
            }
        }
        fields.push(fl);
    }
    Ok(fields)
}

/// Padded agent-state tensor: agents x (history + current) x features.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStateTensor {
    pub max_agents: usize,
    pub steps: usize,
    /// `max_agents * steps * STATE_FEATURES` values.
    pub values: Vec<f64>,
    /// `max_agents * steps` validity flags.
    pub valid: Vec<bool>,
}

impl AgentStateTensor {
    pub fn row(&self, agent: usize, step: usize) -> &[f64] {
        let i = (agent * self.steps + step) * STATE_FEATURES;
        &self.values[i..i + STATE_FEATURES]
    }

    pub fn is_valid(&self, agent: usize, step: usize) -> bool {
        self.valid[agent * self.steps + step]
    }
}

/// Model input bundle. All rasters share `spec`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFeatures {
    pub spec: GridSpec,
    pub classes: ClassFilter,
    /// Frames t-10 ..= t.
    pub history_occ: Vec<OccupancyGrid>,
    pub map_raster: Grid,
    pub history_flow: Vec<FlowField>,
    pub agent_states: AgentStateTensor,
}

impl InputFeatures {
    pub fn current_occ(&self) -> &OccupancyGrid {
        self.history_occ.last().expect("history includes the current frame")
    }
}

pub fn assemble_input(scenario: &Scenario, spec: &GridSpec, classes: ClassFilter) -> Result<InputFeatures> {
    scenario.ensure_timesteps()?;
    let history_occ = (0..=CURRENT_INDEX)
        .map(|t| rasterize_occupancy(scenario, t, spec, classes))
        .collect();
    let map_raster = rasterize_map(scenario, spec);
    let history_flow = build_history_flow(scenario, spec, classes)?;

    let steps = CURRENT_INDEX + 1;
    let max_agents = DEFAULT_MAX_AGENTS;
    let mut values = vec![0.0; max_agents * steps * STATE_FEATURES];
    let mut valid = vec![false; max_agents * steps];
    for (a, agent) in scenario.agents.iter().take(max_agents).enumerate() {
        for t in 0..steps {
            let s = &agent.states[t];
            if !s.valid {
                continue;
            }
            let i = (a * steps + t) * STATE_FEATURES;
            values[i..i + STATE_FEATURES].copy_from_slice(&[s.x, s.y, s.vx, s.vy, s.heading, agent.class.code()]);
            valid[a * steps + t] = true;
        }
    }
    Ok(InputFeatures {
        spec: *spec,
        classes,
        history_occ,
        map_raster,
        history_flow,
        agent_states: AgentStateTensor {
            max_agents,
            steps,
            values,
            valid,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::scene::{AgentClass, AgentState, AgentTrack, NUM_TIMESTEPS, TIMESTEP_S};

    fn moving_agent(id: i64, speed: f64, first_valid: usize) -> AgentTrack {
        let states = (0..NUM_TIMESTEPS)
            .map(|i| {
                let t = (i as f64 - CURRENT_INDEX as f64) * TIMESTEP_S;
                AgentState {
                    x: speed * t,
                    y: 1.0,
                    vx: speed,
                    vy: 0.0,
                    heading: 0.0,
                    valid: i >= first_valid,
                }
            })
            .collect();
        AgentTrack {
            id,
            class: AgentClass::Vehicle,
            length: 4.5,
            width: 2.0,
            states,
        }
    }

    fn occupied_cells(g: &OccupancyGrid) -> usize {
        g.values().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn static_agent_has_constant_occupancy_and_zero_flow() {
        let spec = GridSpec::default();
        let mut s = Scenario::empty("s");
        s.agents.push(moving_agent(1, 0.0, 0));
        let t = build_waypoint_targets(&s, &spec, ClassFilter::VEHICLES).unwrap();
        assert!(occupied_cells(&t.observed_occ[0]) > 0);
        for k in 0..NUM_WAYPOINTS {
            assert_eq!(t.observed_occ[k], t.observed_occ[0]);
            assert!(t.flow[k].data().iter().all(|&v| v == 0.0));
            assert_eq!(occupied_cells(&t.occluded_occ[k]), 0);
        }
    }

    #[test]
    fn translating_agent_flows_ten_cells_back() {
        let spec = GridSpec::default();
        let mut s = Scenario::empty("s");
        s.agents.push(moving_agent(1, 3.125, 0));
        let t = build_waypoint_targets(&s, &spec, ClassFilter::VEHICLES).unwrap();
        for k in 0..NUM_WAYPOINTS {
            let occ = &t.observed_occ[k];
            let mut n = 0;
            for r in 0..256 {
                for c in 0..256 {
                    if occ.at(r, c) == 1.0 {
                        n += 1;
                        assert!((t.flow[k].dx(r, c) + 10.0).abs() < 1e-9);
                        assert!(t.flow[k].dy(r, c).abs() < 1e-9);
                    } else {
                        assert_eq!((t.flow[k].dx(r, c), t.flow[k].dy(r, c)), (0.0, 0.0));
                    }
                }
            }
            assert!(n > 0, "waypoint {k} empty");
        }
    }

    #[test]
    fn late_appearing_agent_is_occluded_only() {
        let spec = GridSpec::default();
        let mut s = Scenario::empty("s");
        // valid from t+31 onward
        s.agents.push(moving_agent(1, 1.0, CURRENT_INDEX + 31));
        let t = build_waypoint_targets(&s, &spec, ClassFilter::VEHICLES).unwrap();
        for k in 0..NUM_WAYPOINTS {
            assert_eq!(occupied_cells(&t.observed_occ[k]), 0);
            let present = occupied_cells(&t.occluded_occ[k]) > 0;
            assert_eq!(present, k + 1 >= 4, "waypoint {}", k + 1);
        }
        // first visible waypoint has no earlier pose, so its flow is zero
        assert!(t.flow[3].data().iter().all(|&v| v == 0.0));
        assert!(t.flow[4].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn history_flow_cases() {
        let spec = GridSpec::default();
        let mut s = Scenario::empty("s");
        s.agents.push(moving_agent(1, 3.125, 0));
        let f = build_history_flow(&s, &spec, ClassFilter::VEHICLES).unwrap();
        assert_eq!(f.len(), 10);
        let cur = rasterize_occupancy(&s, CURRENT_INDEX, &spec, ClassFilter::VEHICLES);
        for r in 0..256 {
            for c in 0..256 {
                if cur.at(r, c) == 1.0 {
                    assert!((f[0].dx(r, c) + 1.0).abs() < 1e-9);
                    assert!(f[0].dy(r, c).abs() < 1e-9);
                }
            }
        }

        let mut appear = Scenario::empty("s");
        appear.agents.push(moving_agent(1, 3.125, CURRENT_INDEX));
        let f = build_history_flow(&appear, &spec, ClassFilter::VEHICLES).unwrap();
        assert!(f.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn assemble_masks_unused_slots() {
        let spec = GridSpec::new(32, 32, 1.0).unwrap();
        let empty = assemble_input(&Scenario::empty("e"), &spec, ClassFilter::VEHICLES).unwrap();
        assert!(empty.agent_states.valid.iter().all(|v| !v));
        assert!(empty.history_occ.iter().all(|g| g.values().iter().all(|&v| v == 0.0)));
        assert!(empty.map_raster.data().iter().all(|&v| v == 0.0));

        let mut s = Scenario::empty("s");
        s.agents.push(moving_agent(7, 2.0, 0));
        let input = assemble_input(&s, &spec, ClassFilter::VEHICLES).unwrap();
        assert_eq!(input.history_occ.len(), 11);
        assert_eq!(input.history_flow.len(), 10);
        assert!(input.agent_states.is_valid(0, 10));
        assert_eq!(input.agent_states.row(0, 10)[2], 2.0);
        assert!((1..64).all(|a| (0..11).all(|t| !input.agent_states.is_valid(a, t))));
        assert!(input.history_occ.iter().all(|g| *g.spec() == spec));
        assert!(input.history_flow.iter().all(|g| *g.spec() == spec));
        assert_eq!(*input.map_raster.spec(), spec);
    }

    #[test]
    fn wrong_state_count_is_malformed() {
        let mut s = Scenario::empty("s");
        let mut a = moving_agent(1, 1.0, 0);
        a.states.pop();
        s.agents.push(a);
        assert!(matches!(
            build_waypoint_targets(&s, &GridSpec::default(), ClassFilter::ALL),
            Err(Error::MalformedScenario(_))
        ));
    }
}
