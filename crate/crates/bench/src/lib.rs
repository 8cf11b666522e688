//! Seeded fixtures shared by the benchmarks.

use ofp_core::blocks::Tensor;
use ofp_core::{FlowField, GridSpec, OccupancyGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn square_grid(cells: usize) -> GridSpec {
    GridSpec::new(cells, cells, 0.3125).expect("valid grid")
}

/// Occupancy with values uniform in [0, 1).
pub fn random_occupancy(spec: GridSpec, seed: u64) -> OccupancyGrid {
    let mut rng = rng(seed);
    OccupancyGrid::from_fn(spec, |_, _| rng.random::<f64>()).expect("values in range")
}

/// Binary occupancy with roughly `density` of the cells set.
pub fn random_binary(spec: GridSpec, density: f64, seed: u64) -> OccupancyGrid {
    let mut rng = rng(seed);
    OccupancyGrid::from_fn(spec, |_, _| if rng.random_bool(density) { 1.0 } else { 0.0 }).expect("binary values")
}

/// Flow with components uniform in `[-max, max]` cells.
pub fn random_flow(spec: GridSpec, max: f64, seed: u64) -> FlowField {
    let mut rng = rng(seed);
    FlowField::from_fn(spec, |_, _| {
        (rng.random_range(-max..=max), rng.random_range(-max..=max))
    })
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::random(shape, 1.0, &mut rng(seed))
}
