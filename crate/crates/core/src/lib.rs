//! Occupancy and flow prediction toolkit.
//!
//! Builds bird's-eye-view inputs and backward-flow ground truth from agent
//! trajectories, scores predictions with the occupancy/flow metric suite,
//! and trains a small convolutional predictor with a time-weighted
//! multi-task loss.

pub mod baselines;
pub mod blocks;
pub mod dataset;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod scene;
pub mod trainer;

pub use baselines::BaselineKind;
pub use dataset::{evaluate_dataset, predict_dataset, run_eval, DatasetSummary, RunConfig, ScenarioEntry};
pub use error::{Error, Result};
pub use gradcheck::{run_gradcheck, GradCheck};
pub use grid::{
    bilinear_sample, combine_occupancy, warp, warp_with, CellPos, FlowField, Grid, GridSpec, OccupancyGrid, Point2,
    Sampling,
};
pub use io::{load_config, load_scenarios, parse_scenario, FileConfig};
pub use losses::{combined_loss, LossValue, LossWeights, PredictionGrad, PredictionSet, ScheduleKind, WeightSchedule};
pub use metrics::{evaluate, IouVariant, MetricValues, MetricsConfig, MetricsReport};
pub use scene::{
    assemble_input, build_history_flow, build_waypoint_targets, make_synthetic_scenario, rasterize_map,
    rasterize_occupancy, AgentClass, AgentState, AgentTrack, ClassFilter, InputFeatures, Scenario, SyntheticKind,
    WaypointTargets,
};
pub use trainer::{TinyPredictor, TrainConfig, TrainOutcome};
