//! Geo-referenced BEV rasters and the backward-flow warping operator.
//!
//! Grid frame: column index grows along the frame's x axis, row index grows
//! *against* its y axis (row 0 is the top edge). Cell `(0, 0)` is the
//! top-left cell and its center sits half a cell in from the corner.
//!
//! Flow fields store `(dx, dy)` per cell in units of cells, where `dx` is a
//! column displacement and `dy` a row displacement. Flow is backward: a cell
//! at `(row, col)` came from `(row + dy, col + dx)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default raster size, matching an 80 m x 80 m field at 256 x 256.
pub const DEFAULT_GRID_CELLS: usize = 256;
pub const DEFAULT_CELL_SIZE_M: f64 = 80.0 / 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub height_cells: usize,
    pub width_cells: usize,
    pub cell_size_m: f64,
    /// World position (m) of the grid center.
    pub origin: [f64; 2],
    /// Heading of the grid x axis in the world frame.
    pub rotation_rad: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            height_cells: DEFAULT_GRID_CELLS,
            width_cells: DEFAULT_GRID_CELLS,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            origin: [0.0, 0.0],
            rotation_rad: 0.0,
        }
    }
}

/// A point in world coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Continuous cell coordinates; integer values are cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellPos {
    pub row: f64,
    pub col: f64,
}

impl CellPos {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

impl GridSpec {
    pub fn new(height_cells: usize, width_cells: usize, cell_size_m: f64) -> Result<Self> {
        let spec = Self {
            height_cells,
            width_cells,
            cell_size_m,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_origin(mut self, origin: Point2, rotation_rad: f64) -> Self {
        self.origin = [origin.x, origin.y];
        self.rotation_rad = rotation_rad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_cells == 0 || self.width_cells == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid must be non-empty, got {}x{}",
                self.height_cells, self.width_cells
            )));
        }
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell size must be positive, got {}",
                self.cell_size_m
            )));
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite() && self.rotation_rad.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid pose".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    fn center_cell(&self) -> CellPos {
        CellPos::new(
            self.height_cells as f64 / 2.0 - 0.5,
            self.width_cells as f64 / 2.0 - 0.5,
        )
    }

    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.rotation_rad.sin_cos();
        ([c, s], [-s, c])
    }

    /// World point to continuous cell coordinates. Out-of-grid points are
    /// returned unclamped.
    pub fn world_to_grid(&self, p: Point2) -> CellPos {
        let (ex, ey) = self.axes();
        let dx = p.x - self.origin[0];
        let dy = p.y - self.origin[1];
        let lx = dx * ex[0] + dy * ex[1];
        let ly = dx * ey[0] + dy * ey[1];
        let center = self.center_cell();
        CellPos::new(center.row - ly / self.cell_size_m, center.col + lx / self.cell_size_m)
    }

    pub fn grid_to_world(&self, rc: CellPos) -> Point2 {
        let (ex, ey) = self.axes();
        let center = self.center_cell();
        let lx = (rc.col - center.col) * self.cell_size_m;
        let ly = (center.row - rc.row) * self.cell_size_m;
        Point2::new(
            self.origin[0] + lx * ex[0] + ly * ey[0],
            self.origin[1] + lx * ex[1] + ly * ey[1],
        )
    }

    /// Row/column of the cell containing `rc`, if inside the grid.
    pub fn containing_cell(&self, rc: CellPos) -> Option<(usize, usize)> {
        let r = rc.row.round();
        let c = rc.col.round();
        if r < 0.0 || c < 0.0 || r >= self.height_cells as f64 || c >= self.width_cells as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpecMismatch {
                left: *self,
                right: *other,
            })
        }
    }
}

/// Row-major H x W x C raster, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        assert!(channels >= 1, "grid needs at least one channel");
        Self {
            spec,
            channels,
            data: vec![0.0; spec.cells() * channels],
        }
    }

    pub fn from_vec(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if channels == 0 {
            return Err(Error::InvalidGrid("zero channels".into()));
        }
        if data.len() != spec.cells() * channels {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for {}x{}x{}, got {}",
                spec.cells() * channels,
                spec.height_cells,
                spec.width_cells,
                channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn from_fn(spec: GridSpec, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut g = Self::zeros(spec, channels);
        for r in 0..spec.height_cells {
            for c in 0..spec.width_cells {
                for ch in 0..channels {
                    let i = g.index(r, c, ch);
                    g.data[i] = f(r, c, ch);
                }
            }
        }
        g
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn height(&self) -> usize {
        self.spec.height_cells
    }

    pub fn width(&self) -> usize {
        self.spec.width_cells
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.height() && col < self.width() && ch < self.channels);
        (row * self.width() + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// One channel as its own single-channel grid.
    pub fn channel(&self, ch: usize) -> Grid {
        assert!(ch < self.channels);
        let data = self.data.chunks_exact(self.channels).map(|cell| cell[ch]).collect();
        Grid {
            spec: self.spec,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            spec: self.spec,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Single-channel grid with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid(Grid);

impl OccupancyGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self(Grid::zeros(spec, 1))
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels != 1 {
            return Err(Error::InvalidGrid(format!(
                "occupancy needs 1 channel, got {}",
                grid.channels
            )));
        }
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGrid(format!("occupancy value {v} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(spec, 1, data)?)
    }

    /// Builds from arbitrary values, clamping into [0, 1].
    pub(crate) fn from_values_clamped(spec: GridSpec, mut data: Vec<f64>) -> Self {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self(Grid {
            spec,
            channels: 1,
            data,
        })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::from_grid(Grid::from_fn(spec, 1, |r, c, _| f(r, c)))
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.0.data[row * self.0.width() + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub(crate) fn set_cell(&mut self, row: usize, col: usize, v: f64) {
        self.0.set(row, col, 0, v);
    }
}

impl std::ops::Deref for OccupancyGrid {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Two-channel backward flow (dx, dy) in cells, clamped to +-W/2, +-H/2.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Grid);

impl FlowField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self(Grid::zeros(spec, 2))
    }

    pub fn from_grid(mut grid: Grid) -> Result<Self> {
        if grid.channels != 2 {
            return Err(Error::InvalidGrid(format!(
                "flow needs 2 channels, got {}",
                grid.channels
            )));
        }
        let (max_dx, max_dy) = Self::bounds(&grid.spec);
        for cell in grid.data.chunks_exact_mut(2) {
            cell[0] = cell[0].clamp(-max_dx, max_dx);
            cell[1] = cell[1].clamp(-max_dy, max_dy);
        }
        Ok(Self(grid))
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(spec, 2, data)?)
    }

    pub fn uniform(spec: GridSpec, dx: f64, dy: f64) -> Self {
        Self::from_grid(Grid::from_fn(spec, 2, |_, _, ch| if ch == 0 { dx } else { dy })).expect("two channels")
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(spec);
        for r in 0..spec.height_cells {
            for c in 0..spec.width_cells {
                let (dx, dy) = f(r, c);
                out.set_cell(r, c, dx, dy);
            }
        }
        out
    }

    pub fn bounds(spec: &GridSpec) -> (f64, f64) {
        (spec.width_cells as f64 / 2.0, spec.height_cells as f64 / 2.0)
    }

    #[inline]
    pub fn dx(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col, 0)
    }

    #[inline]
    pub fn dy(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col, 1)
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub(crate) fn set_cell(&mut self, row: usize, col: usize, dx: f64, dy: f64) {
        let (max_dx, max_dy) = Self::bounds(&self.0.spec);
        self.0.set(row, col, 0, dx.clamp(-max_dx, max_dx));
        self.0.set(row, col, 1, dy.clamp(-max_dy, max_dy));
    }
}

impl std::ops::Deref for FlowField {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Resampling kernel used by [`warp_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

/// The four bilinear taps around a continuous position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub r0: isize,
    pub c0: isize,
    pub fr: f64,
    pub fc: f64,
}

impl Taps {
    #[inline]
    pub fn at(pos: CellPos) -> Self {
        let rf = pos.row.floor();
        let cf = pos.col.floor();
        Self {
            r0: rf as isize,
            c0: cf as isize,
            fr: pos.row - rf,
            fc: pos.col - cf,
        }
    }

    /// (row, col, weight, d weight/d row, d weight/d col) for each tap.
    #[inline]
    pub fn weights(&self) -> [(isize, isize, f64, f64, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0, self.c0, (1.0 - fr) * (1.0 - fc), -(1.0 - fc), -(1.0 - fr)),
            (self.r0, self.c0 + 1, (1.0 - fr) * fc, -fc, 1.0 - fr),
            (self.r0 + 1, self.c0, fr * (1.0 - fc), 1.0 - fc, -fr),
            (self.r0 + 1, self.c0 + 1, fr * fc, fc, fr),
        ]
    }
}

#[inline]
fn in_bounds(r: isize, c: isize, h: usize, w: usize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
}

/// Bilinear interpolation with zero padding outside the grid.
pub fn bilinear_sample(g: &Grid, rc: CellPos) -> Vec<f64> {
    let mut out = vec![0.0; g.channels()];
    let taps = Taps::at(rc);
    for (r, c, w, _, _) in taps.weights() {
        if w == 0.0 || !in_bounds(r, c, g.height(), g.width()) {
            continue;
        }
        let base = g.index(r as usize, c as usize, 0);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += w * g.data[base + ch];
        }
    }
    out
}

/// Single-channel bilinear sample over a raw H x W slice.
#[inline]
pub(crate) fn sample_scalar(values: &[f64], h: usize, w: usize, rc: CellPos) -> f64 {
    let taps = Taps::at(rc);
    let mut acc = 0.0;
    for (r, c, wt, _, _) in taps.weights() {
        if wt != 0.0 && in_bounds(r, c, h, w) {
            acc += wt * values[r as usize * w + c as usize];
        }
    }
    acc
}

/// Backward warp: each output cell fetches the previous occupancy at the
/// location its flow points back to.
pub fn warp(occ_prev: &OccupancyGrid, flow: &FlowField) -> Result<OccupancyGrid> {
    warp_with(occ_prev, flow, Sampling::Bilinear)
}

pub fn warp_with(occ_prev: &OccupancyGrid, flow: &FlowField, sampling: Sampling) -> Result<OccupancyGrid> {
    occ_prev.spec().ensure_same(flow.spec())?;
    let out = match sampling {
        Sampling::Bilinear => warp_values(occ_prev.values(), flow),
        Sampling::Nearest => warp_nearest(occ_prev.values(), flow),
    };
    Ok(OccupancyGrid::from_values_clamped(*occ_prev.spec(), out))
}

/// Bilinear warp of a raw single-channel raster that shares `flow`'s spec.
pub(crate) fn warp_values(values: &[f64], flow: &FlowField) -> Vec<f64> {
    let (h, w) = (flow.height(), flow.width());
    debug_assert_eq!(values.len(), h * w);
    let f = flow.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let pos = CellPos::new(r as f64 + f[2 * i + 1], c as f64 + f[2 * i]);
            out[i] = sample_scalar(values, h, w, pos);
        }
    }
    out
}

fn warp_nearest(values: &[f64], flow: &FlowField) -> Vec<f64> {
    let (h, w) = (flow.height(), flow.width());
    let f = flow.data();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let sr = (r as f64 + f[2 * i + 1]).round();
            let sc = (c as f64 + f[2 * i]).round();
            if in_bounds(sr as isize, sc as isize, h, w) && sr >= 0.0 && sc >= 0.0 {
                out[i] = values[sr as usize * w + sc as usize];
            }
        }
    }
    out
}

/// Adjoint of [`warp_values`]. Given the upstream gradient on the warped
/// output, accumulates the gradient on the source raster into `grad_src`
/// and on the flow (dx, dy interleaved) into `grad_flow`.
pub(crate) fn warp_values_backward(
    src: &[f64],
    flow: &FlowField,
    grad_out: &[f64],
    grad_src: &mut [f64],
    grad_flow: &mut [f64],
) {
    let (h, w) = (flow.height(), flow.width());
    let f = flow.data();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let g = grad_out[i];
            if g == 0.0 {
                continue;
            }
            let pos = CellPos::new(r as f64 + f[2 * i + 1], c as f64 + f[2 * i]);
            let mut d_row = 0.0;
            let mut d_col = 0.0;
            for (tr, tc, wt, dwr, dwc) in Taps::at(pos).weights() {
                if !in_bounds(tr, tc, h, w) {
                    continue;
                }
                let j = tr as usize * w + tc as usize;
                grad_src[j] += g * wt;
                d_row += dwr * src[j];
                d_col += dwc * src[j];
            }
            grad_flow[2 * i] += g * d_col;
            grad_flow[2 * i + 1] += g * d_row;
        }
    }
}

/// Per-cell `min(obs + occ, 1)`.
pub fn combine_occupancy(obs: &OccupancyGrid, occ: &OccupancyGrid) -> Result<OccupancyGrid> {
    obs.spec().ensure_same(occ.spec())?;
    let data = obs
        .values()
        .iter()
        .zip(occ.values())
        .map(|(a, b)| (a + b).min(1.0))
        .collect();
    Ok(OccupancyGrid::from_values_clamped(*obs.spec(), data))
}
