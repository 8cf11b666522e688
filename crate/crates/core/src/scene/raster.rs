use crate::grid::{CellPos, FlowField, Grid, GridSpec, OccupancyGrid, Point2};

use super::{ClassFilter, LightState, PolylineKind, Scenario, CURRENT_INDEX};

/// Map raster channels: one per polyline kind, then one per light state.
pub const MAP_CHANNELS: usize = PolylineKind::ALL.len() + LightState::ALL.len();

/// Oriented box of an agent at one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    /// World point into the box frame (x forward along heading).
    pub fn to_local(&self, p: Point2) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn from_local(&self, lx: f64, ly: f64) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        Point2::new(self.center.x + c * lx - s * ly, self.center.y + s * lx + c * ly)
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (lx, ly) = self.to_local(p);
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }

    fn corners(&self) -> [Point2; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [
            self.from_local(hl, hw),
            self.from_local(hl, -hw),
            self.from_local(-hl, hw),
            self.from_local(-hl, -hw),
        ]
    }
}

/// Visits every cell whose center lies inside `fp`.
pub(crate) fn for_each_cell_in(spec: &GridSpec, fp: &Footprint, mut visit: impl FnMut(usize, usize)) {
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in fp.corners() {
        let rc = spec.world_to_grid(corner);
        rmin = rmin.min(rc.row);
        rmax = rmax.max(rc.row);
        cmin = cmin.min(rc.col);
        cmax = cmax.max(rc.col);
    }
    let h = spec.height_cells as f64;
    let w = spec.width_cells as f64;
    let r0 = (rmin.floor() - 1.0).max(0.0);
    let r1 = (rmax.ceil() + 1.0).min(h - 1.0);
    let c0 = (cmin.floor() - 1.0).max(0.0);
    let c1 = (cmax.ceil() + 1.0).min(w - 1.0);
    if r0 > r1 || c0 > c1 {
        return;
    }
    for r in r0 as usize..=r1 as usize {
        for c in c0 as usize..=c1 as usize {
            let p = spec.grid_to_world(CellPos::new(r as f64, c as f64));
            if fp.contains(p) {
                visit(r, c);
            }
        }
    }
}

/// Backward flow at cell `(r, c)` occupied by `cur`: where the body point
/// under that cell center sat at pose `prev`, minus the cell position.
pub(crate) fn backward_flow_at(spec: &GridSpec, r: usize, c: usize, cur: &Footprint, prev: &Footprint) -> (f64, f64) {
    if cur == prev {
        return (0.0, 0.0);
    }
    let p = spec.grid_to_world(CellPos::new(r as f64, c as f64));
    let (lx, ly) = cur.to_local(p);
    let earlier = spec.world_to_grid(prev.from_local(lx, ly));
    (earlier.col - c as f64, earlier.row - r as f64)
}

/// Rasterizes boxes and their backward flow. Each entry is the pose at the
/// target time and, when known, the pose one interval earlier. Where boxes
/// overlap the lowest-index entry owns the cell's flow.
pub fn rasterize_with_flow(spec: &GridSpec, items: &[(Footprint, Option<Footprint>)]) -> (OccupancyGrid, FlowField) {
    let mut occ = OccupancyGrid::zeros(*spec);
    let mut flow = FlowField::zeros(*spec);
    for (cur, prev) in items {
        for_each_cell_in(spec, cur, |r, c| {
            if occ.at(r, c) == 1.0 {
                return;
            }
            occ.set_cell(r, c, 1.0);
            if let Some(prev) = prev {
                let (dx, dy) = backward_flow_at(spec, r, c, cur, prev);
                flow.set_cell(r, c, dx, dy);
            }
        });
    }
    (occ, flow)
}

/// Binary occupancy of all valid, class-matching agents at `timestep`.
pub fn rasterize_occupancy(
    scenario: &Scenario,
    timestep: usize,
    spec: &GridSpec,
    classes: ClassFilter,
) -> OccupancyGrid {
    let mut occ = OccupancyGrid::zeros(*spec);
    for agent in scenario.agents.iter().filter(|a| classes.contains(a.class)) {
        if let Some(fp) = agent.footprint_at(timestep) {
            for_each_cell_in(spec, &fp, |r, c| occ.set_cell(r, c, 1.0));
        }
    }
    occ
}

/// Squared distance (in cells) from `p` to segment `a`-`b`.
fn segment_dist2(p: CellPos, a: CellPos, b: CellPos) -> f64 {
    let (ar, ac) = (b.row - a.row, b.col - a.col);
    let len2 = ar * ar + ac * ac;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.row - a.row) * ar + (p.col - a.col) * ac) / len2).clamp(0.0, 1.0)
    };
    let dr = p.row - (a.row + t * ar);
    let dc = p.col - (a.col + t * ac);
    dr * dr + dc * dc
}

fn draw_segment(grid: &mut Grid, ch: usize, a: CellPos, b: CellPos) {
    let h = grid.height() as f64;
    let w = grid.width() as f64;
    let r0 = (a.row.min(b.row).floor() - 1.0).max(0.0);
    let r1 = (a.row.max(b.row).ceil() + 1.0).min(h - 1.0);
    let c0 = (a.col.min(b.col).floor() - 1.0).max(0.0);
    let c1 = (a.col.max(b.col).ceil() + 1.0).min(w - 1.0);
    if r0 > r1 || c0 > c1 {
        return;
    }
    for r in r0 as usize..=r1 as usize {
        for c in c0 as usize..=c1 as usize {
            if segment_dist2(CellPos::new(r as f64, c as f64), a, b) <= 0.25 {
                grid.set(r, c, ch, 1.0);
            }
        }
    }
}

/// Map raster: polylines drawn into one channel per kind, traffic lights at
/// the current timestep into one channel per state.
pub fn rasterize_map(scenario: &Scenario, spec: &GridSpec) -> Grid {
    let mut grid = Grid::zeros(*spec, MAP_CHANNELS);
    for line in &scenario.map.polylines {
        let ch = line.kind.channel();
        let pts: Vec<CellPos> = line
            .points
            .iter()
            .map(|p| spec.world_to_grid(Point2::new(p[0], p[1])))
            .collect();
        match pts.len() {
            0 => {}
            1 => draw_segment(&mut grid, ch, pts[0], pts[0]),
            _ => {
                for seg in pts.windows(2) {
                    draw_segment(&mut grid, ch, seg[0], seg[1]);
                }
            }
        }
    }
    for light in &scenario.map.traffic_lights {
        let Some(state) = light.states.get(CURRENT_INDEX) else {
            continue;
        };
        if let Some((r, c)) = spec.containing_cell(spec.world_to_grid(Point2::new(light.x, light.y))) {
            grid.set(r, c, state.channel(), 1.0);
        }
    }
    grid
}
