//! Desk-scale training of a two-layer convolutional predictor with the
//! combined occupancy/flow/trace objective.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Grid, GridSpec, OccupancyGrid};
use crate::losses::{
    combined_loss, make_schedule, LossValue, LossWeights, PredictionGrad, PredictionSet, ScheduleKind,
};
use crate::metrics::{self, epe, lookup, Split};
use crate::scene::synthetic::{make_synthetic_scenario_with, SyntheticConfig, SyntheticKind};
use crate::scene::{
    assemble_input, build_waypoint_targets, ClassFilter, InputFeatures, Scenario, WaypointTargets, CURRENT_INDEX,
    NUM_WAYPOINTS,
};

/// Input planes: 11 occupancy frames, 7 map channels, 10 two-channel flows.
pub const INPUT_CHANNELS: usize = (CURRENT_INDEX + 1) + crate::scene::raster::MAP_CHANNELS + 2 * CURRENT_INDEX;
pub const HIDDEN_CHANNELS: usize = 16;
/// Per waypoint: observed logit, occluded logit, flow dx, flow dy.
pub const OUTPUT_CHANNELS: usize = 4 * NUM_WAYPOINTS;
pub const KERNEL: usize = 3;

/// Two 3x3 "same" convolutions with a tanh in between.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyPredictor {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub params: Vec<f64>,
}

fn param_count(cin: usize, hidden: usize, cout: usize) -> usize {
    hidden * cin * KERNEL * KERNEL + hidden + cout * hidden * KERNEL * KERNEL + cout
}

impl TinyPredictor {
    pub fn zeros() -> Self {
        Self {
            in_channels: INPUT_CHANNELS,
            hidden: HIDDEN_CHANNELS,
            out_channels: OUTPUT_CHANNELS,
            params: vec![0.0; param_count(INPUT_CHANNELS, HIDDEN_CHANNELS, OUTPUT_CHANNELS)],
        }
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut model = Self::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = model.layout();
        let s1 = 1.0 / ((model.in_channels * KERNEL * KERNEL) as f64).sqrt();
        let s2 = 1.0 / ((model.hidden * KERNEL * KERNEL) as f64).sqrt();
        for v in &mut model.params[l.w1.clone()] {
            *v = rng.random_range(-s1..s1);
        }
        for v in &mut model.params[l.w2.clone()] {
            *v = rng.random_range(-s2..s2);
        }
        model
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        let w1 = self.hidden * self.in_channels * KERNEL * KERNEL;
        let w2 = self.out_channels * self.hidden * KERNEL * KERNEL;
        Layout {
            w1: 0..w1,
            b1: w1..w1 + self.hidden,
            w2: w1 + self.hidden..w1 + self.hidden + w2,
            b2: w1 + self.hidden + w2..w1 + self.hidden + w2 + self.out_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.params.len() != param_count(self.in_channels, self.hidden, self.out_channels) {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a {}-{}-{} model",
                self.params.len(),
                self.in_channels,
                self.hidden,
                self.out_channels
            )));
        }
        if self.out_channels != OUTPUT_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "model emits {} channels, expected {OUTPUT_CHANNELS}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

/// Channel-major input stack for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub spec: GridSpec,
    pub channels: usize,
    pub planes: Vec<f64>,
}

impl ModelInput {
    pub fn from_features(input: &InputFeatures) -> Self {
        let spec = input.spec;
        let n = spec.cells();
        let mut planes = Vec::with_capacity(INPUT_CHANNELS * n);
        for occ in &input.history_occ {
            planes.extend_from_slice(occ.values());
        }
        for ch in 0..input.map_raster.channels() {
            planes.extend(
                input
                    .map_raster
                    .data()
                    .iter()
                    .skip(ch)
                    .step_by(input.map_raster.channels()),
            );
        }
        for flow in &input.history_flow {
            planes.extend(flow.data().iter().step_by(2));
            planes.extend(flow.data().iter().skip(1).step_by(2));
        }
        let channels = planes.len() / n;
        Self { spec, channels, planes }
    }
}

/// Unrolls 3x3 neighbourhoods: row `i * 9 + ky * 3 + kx` holds channel
/// `i` shifted by `(ky - 1, kx - 1)`, zero outside the map.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let taps = KERNEL * KERNEL;
    let mut cols = vec![0.0; cin * taps * n];
    for i in 0..cin {
        let src = &input[i * n..(i + 1) * n];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let dst = &mut cols[(i * taps + ky * KERNEL + kx) * n..][..n];
                let (r0, r1) = span(ky, h);
                let (c0, c1) = span(kx, w);
                for r in r0..r1 {
                    let sr = r + ky - 1;
                    dst[r * w + c0..r * w + c1].copy_from_slice(&src[sr * w + c0 + kx - 1..sr * w + c1 + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let taps = KERNEL * KERNEL;
    let mut out = vec![0.0; cin * n];
    for i in 0..cin {
        let dst = &mut out[i * n..(i + 1) * n];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let src = &cols[(i * taps + ky * KERNEL + kx) * n..][..n];
                let (r0, r1) = span(ky, h);
                let (c0, c1) = span(kx, w);
                for r in r0..r1 {
                    let sr = r + ky - 1;
                    let d = &mut dst[sr * w + c0 + kx - 1..sr * w + c1 + kx - 1];
                    for (a, b) in d.iter_mut().zip(&src[r * w + c0..r * w + c1]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols whose tap at kernel offset `k` stays inside the map.
fn span(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == KERNEL - 1 { len - 1 } else { len };
    (lo, hi.max(lo))
}

/// Same-padded 3x3 convolution given unrolled input columns.
fn conv_forward(cols: &[f64], weights: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let rows = cols.len() / n;
    let mut out = vec![0.0; bias.len() * n];
    for (o, dst) in out.chunks_exact_mut(n).enumerate() {
        dst.fill(bias[o]);
    }
    for (j, col) in cols.chunks_exact(n).enumerate() {
        for (o, dst) in out.chunks_exact_mut(n).enumerate() {
            axpy(weights[o * rows + j], col, dst);
        }
    }
    out
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a != 0.0 {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates weight and bias gradients; returns the gradient with
/// respect to the unrolled columns when `need_input` is set.
fn conv_backward(
    cols: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    n: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let rows = cols.len() / n;
    for (o, go) in grad_out.chunks_exact(n).enumerate() {
        grad_b[o] += go.iter().sum::<f64>();
    }
    let mut grad_cols = need_input.then(|| vec![0.0; cols.len()]);
    for (j, col) in cols.chunks_exact(n).enumerate() {
        for (o, go) in grad_out.chunks_exact(n).enumerate() {
            grad_w[o * rows + j] += dot(go, col);
        }
        if let Some(gc) = grad_cols.as_mut() {
            let dst = &mut gc[j * n..(j + 1) * n];
            for (o, go) in grad_out.chunks_exact(n).enumerate() {
                axpy(weights[o * rows + j], go, dst);
            }
        }
    }
    grad_cols
}

struct Activations {
    input_cols: Vec<f64>,
    hidden: Vec<f64>,
    hidden_cols: Vec<f64>,
    output: Vec<f64>,
}

fn run(model: &TinyPredictor, input: &ModelInput) -> Result<Activations> {
    model.validate()?;
    if input.channels != model.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, model expects {}",
            input.channels, model.in_channels
        )));
    }
    let (h, w) = (input.spec.height_cells, input.spec.width_cells);
    let l = model.layout();
    let p = &model.params;
    let input_cols = im2col(&input.planes, model.in_channels, h, w);
    let mut hidden = conv_forward(&input_cols, &p[l.w1], &p[l.b1], h * w);
    for v in &mut hidden {
        *v = v.tanh();
    }
    let hidden_cols = im2col(&hidden, model.hidden, h, w);
    let output = conv_forward(&hidden_cols, &p[l.w2], &p[l.b2], h * w);
    Ok(Activations {
        input_cols,
        hidden,
        hidden_cols,
        output,
    })
}

fn to_predictions(spec: GridSpec, output: &[f64]) -> Result<PredictionSet> {
    let n = spec.cells();
    let plane = |ch: usize| &output[ch * n..(ch + 1) * n];
    let mut observed_logits = Vec::with_capacity(NUM_WAYPOINTS);
    let mut occluded_logits = Vec::with_capacity(NUM_WAYPOINTS);
    let mut flow = Vec::with_capacity(NUM_WAYPOINTS);
    for k in 0..NUM_WAYPOINTS {
        observed_logits.push(Grid::from_vec(spec, 1, plane(4 * k).to_vec())?);
        occluded_logits.push(Grid::from_vec(spec, 1, plane(4 * k + 1).to_vec())?);
        let interleaved = plane(4 * k + 2)
            .iter()
            .zip(plane(4 * k + 3))
            .flat_map(|(&dx, &dy)| [dx, dy])
            .collect();
        flow.push(FlowField::from_vec(spec, interleaved)?);
    }
    Ok(PredictionSet {
        observed_logits,
        occluded_logits,
        flow,
    })
}

/// Deterministic forward pass.
pub fn forward(model: &TinyPredictor, input: &ModelInput) -> Result<PredictionSet> {
    let act = run(model, input)?;
    to_predictions(input.spec, &act.output)
}

/// One supervised scenario, pre-rasterized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: ModelInput,
    pub targets: WaypointTargets,
    pub current_occ: OccupancyGrid,
}

impl TrainExample {
    pub fn from_scenario(scenario: &Scenario, spec: &GridSpec, classes: ClassFilter) -> Result<Self> {
        let features = assemble_input(scenario, spec, classes)?;
        Ok(Self {
            input: ModelInput::from_features(&features),
            targets: build_waypoint_targets(scenario, spec, classes)?,
            current_occ: features.current_occ().clone(),
        })
    }
}

/// Loss settings shared by training and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub schedule: ScheduleKind,
}

/// Loss value and parameter gradient for one example.
pub fn backward(model: &TinyPredictor, example: &TrainExample, objective: &Objective) -> Result<(LossValue, Vec<f64>)> {
    let act = run(model, &example.input)?;
    let spec = example.input.spec;
    let pred = to_predictions(spec, &act.output)?;
    let schedule = make_schedule(&objective.schedule, NUM_WAYPOINTS)?;
    let (value, grad) = combined_loss(
        &pred,
        &example.targets,
        &example.current_occ,
        &objective.weights,
        &schedule,
    )?;
    let grad_out = output_gradient(spec, &act.output, &grad);

    let (h, w) = (spec.height_cells, spec.width_cells);
    let l = model.layout();
    let p = &model.params;
    let mut g = vec![0.0; p.len()];
    let (gw1, rest) = g.split_at_mut(l.b1.start);
    let (gb1, rest) = rest.split_at_mut(l.w2.start - l.b1.start);
    let (gw2, gb2) = rest.split_at_mut(l.b2.start - l.w2.start);
    let n = h * w;
    let grad_hidden_cols = conv_backward(&act.hidden_cols, &p[l.w2.clone()], &grad_out, n, gw2, gb2, true)
        .expect("column gradient requested");
    let mut grad_hidden = col2im(&grad_hidden_cols, model.hidden, h, w);
    for (gh, a) in grad_hidden.iter_mut().zip(&act.hidden) {
        *gh *= 1.0 - a * a;
    }
    conv_backward(&act.input_cols, &p[l.w1.clone()], &grad_hidden, n, gw1, gb1, false);
    Ok((value, g))
}

/// Scatters the prediction gradient back onto raw output planes. Flow
/// outputs beyond the grid's flow bound were clamped and pass no gradient.
fn output_gradient(spec: GridSpec, raw: &[f64], grad: &PredictionGrad) -> Vec<f64> {
    let n = spec.cells();
    let (bx, by) = FlowField::bounds(&spec);
    let mut out = vec![0.0; OUTPUT_CHANNELS * n];
    for k in 0..NUM_WAYPOINTS {
        out[4 * k * n..(4 * k + 1) * n].copy_from_slice(grad.observed_logits[k].data());
        out[(4 * k + 1) * n..(4 * k + 2) * n].copy_from_slice(grad.occluded_logits[k].data());
        let gf = grad.flow[k].data();
        for i in 0..n {
            let (dx, dy) = (raw[(4 * k + 2) * n + i], raw[(4 * k + 3) * n + i]);
            out[(4 * k + 2) * n + i] = if dx.abs() <= bx { gf[2 * i] } else { 0.0 };
            out[(4 * k + 3) * n + i] = if dy.abs() <= by { gf[2 * i + 1] } else { 0.0 };
        }
    }
    out
}

/// Which raw flow outputs sit beyond the clamp, for finite-difference
/// kink detection.
pub(crate) fn clamp_signature(model: &TinyPredictor, input: &ModelInput) -> Result<Vec<i64>> {
    let act = run(model, input)?;
    let n = input.spec.cells();
    let (bx, by) = FlowField::bounds(&input.spec);
    let mut sig = Vec::new();
    for k in 0..NUM_WAYPOINTS {
        sig.extend(
            act.output[(4 * k + 2) * n..(4 * k + 3) * n]
                .iter()
                .map(|v| (v.abs() > bx) as i64),
        );
        sig.extend(
            act.output[(4 * k + 3) * n..(4 * k + 4) * n]
                .iter()
                .map(|v| (v.abs() > by) as i64),
        );
    }
    Ok(sig)
}

/// Mean loss and gradient over a batch. Examples are evaluated in parallel
/// and reduced in input order, so results do not depend on thread count.
pub fn batch_gradient(
    model: &TinyPredictor,
    batch: &[TrainExample],
    objective: &Objective,
) -> Result<(LossValue, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let parts: Vec<(LossValue, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| backward(model, ex, objective))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut mean = LossValue::default();
    for (v, g) in &parts {
        mean.total += v.total * scale;
        mean.occupancy += v.occupancy * scale;
        mean.flow += v.flow * scale;
        mean.trace += v.trace * scale;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b * scale;
        }
    }
    Ok((mean, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub lambdas: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-4,
            momentum: 0.0,
            seed: 0,
            schedule: ScheduleKind::Linear,
            lambdas: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Settings used by the synthetic demo: the default step size is tuned
    /// for full-scale data and barely moves a model this small.
    pub fn demo(seed: u64, schedule: ScheduleKind) -> Self {
        Self {
            steps: 200,
            learning_rate: DEMO_LEARNING_RATE,
            momentum: 0.9,
            seed,
            schedule,
            lambdas: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        self.lambdas.validate()?;
        make_schedule(&self.schedule, NUM_WAYPOINTS).map(|_| ())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.lambdas,
            schedule: self.schedule.clone(),
        }
    }
}

pub const DEMO_LEARNING_RATE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TinyPredictor,
    /// Batch loss before each update.
    pub curve: Vec<LossValue>,
}

pub fn train(config: &TrainConfig, data: &[TrainExample]) -> Result<TrainOutcome> {
    train_from(TinyPredictor::init(config.seed), config, data)
}

pub fn train_from(mut model: TinyPredictor, config: &TrainConfig, data: &[TrainExample]) -> Result<TrainOutcome> {
    config.validate()?;
    let objective = config.objective();
    let mut velocity = vec![0.0; model.num_params()];
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grad) = batch_gradient(&model, data, &objective)?;
        let finite =
            loss.total.is_finite() && grad.iter().all(|g| g.is_finite()) && model.params.iter().all(|p| p.is_finite());
        if !finite {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        curve.push(loss);
        for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = config.momentum * *v + g;
            *p -= config.learning_rate * *v;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Grid used by the synthetic training demo: 32 x 32 cells of 1.25 m.
pub fn demo_grid() -> GridSpec {
    GridSpec::new(32, 32, 1.25).expect("valid demo grid")
}

/// Synthetic scene settings matched to [`demo_grid`] so that agents stay
/// mostly inside the 40 m field over the 8 s horizon.
pub fn demo_synthetic_config() -> SyntheticConfig {
    SyntheticConfig {
        spawn_half_extent_m: 8.0,
        speed_range: (1.0, 2.5),
        grid: Some(demo_grid()),
        ..SyntheticConfig::default()
    }
}

/// Scenes `seed0..seed0 + count`, cycling through `kinds`.
pub fn synthetic_examples(seed0: u64, count: usize, kinds: &[SyntheticKind]) -> Result<Vec<TrainExample>> {
    let cfg = demo_synthetic_config();
    let spec = demo_grid();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let scenario = make_synthetic_scenario_with(seed0 + i as u64, kind, &cfg);
            TrainExample::from_scenario(&scenario, &spec, ClassFilter::VEHICLES)
        })
        .collect()
}

/// Held-out seeds start here, far from any training seed range.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;
/// Scenes per demo training or evaluation set.
pub const DEMO_SCENES: usize = 16;

/// Training scenes for the demo: linear motion only.
pub fn demo_train_set(seed: u64) -> Result<Vec<TrainExample>> {
    synthetic_examples(seed * 1000, DEMO_SCENES, &[SyntheticKind::Linear])
}

/// Training and held-out scenes for the schedule ablation, mixing linear
/// and turning motion.
pub fn ablation_sets(seed: u64) -> Result<(Vec<TrainExample>, Vec<TrainExample>)> {
    let kinds = [SyntheticKind::Linear, SyntheticKind::Turning];
    Ok((
        synthetic_examples(seed * 1000, DEMO_SCENES, &kinds)?,
        synthetic_examples(EVAL_SEED_OFFSET + seed * 1000, DEMO_SCENES, &kinds)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlReport {
    pub seed: u64,
    pub steps: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub uniform_epe: Vec<f64>,
    pub linear_epe: Vec<f64>,
    pub uniform_final_loss: f64,
    pub linear_final_loss: f64,
    /// Whether the time-weighted model's last-waypoint EPE is no worse.
    pub weighted_not_worse: bool,
    /// Published EPE of the weighted and unweighted full-scale models.
    pub reference_epe: (f64, f64),
}

/// Mean EPE per waypoint over a set of examples.
pub fn per_waypoint_epe(model: &TinyPredictor, data: &[TrainExample]) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = data
        .par_iter()
        .map(|ex| {
            let pred = forward(model, &ex.input)?;
            (0..NUM_WAYPOINTS)
                .map(|k| epe(&pred.flow[k], &ex.targets.flow[k]).map(|e| e.value))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..NUM_WAYPOINTS)
        .map(|k| {
            let mut acc = metrics::CompensatedSum::default();
            for r in &rows {
                acc.add(r[k]);
            }
            acc.value() / rows.len().max(1) as f64
        })
        .collect())
}

/// Trains the uniform and linear schedules from the same initialization
/// and compares held-out EPE per waypoint.
pub fn wl_ablation(base: &TrainConfig, train_set: &[TrainExample], eval_set: &[TrainExample]) -> Result<WlReport> {
    let run_with = |schedule: ScheduleKind| -> Result<(Vec<f64>, f64)> {
        let cfg = TrainConfig {
            schedule,
            ..base.clone()
        };
        let out = train(&cfg, train_set)?;
        let last = out.curve.last().map_or(f64::NAN, |v| v.total);
        Ok((per_waypoint_epe(&out.model, eval_set)?, last))
    };
    let (uniform_epe, uniform_final_loss) = run_with(ScheduleKind::Uniform)?;
    let (linear_epe, linear_final_loss) = run_with(ScheduleKind::Linear)?;
    let weighted_not_worse = linear_epe[NUM_WAYPOINTS - 1] <= uniform_epe[NUM_WAYPOINTS - 1];
    let reference = |m: &str| lookup(m, Split::Val).map_or(f64::NAN, |r| r.values.epe);
    Ok(WlReport {
        seed: base.seed,
        steps: base.steps,
        train_scenes: train_set.len(),
        eval_scenes: eval_set.len(),
        uniform_epe,
        linear_epe,
        uniform_final_loss,
        linear_final_loss,
        weighted_not_worse,
        reference_epe: (reference("OFMPNet-Swin-T-WL"), reference("OFMPNet-Swin-T")),
    })
}

impl WlReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "Time-weighted flow loss ablation: seed {}, {} steps, {} train / {} held-out scenes\n",
            self.seed, self.steps, self.train_scenes, self.eval_scenes
        );
        out.push_str(&format!(
            "{:>8} {:>12} {:>12}\n",
            "waypoint", "uniform_epe", "linear_epe"
        ));
        for (k, (u, l)) in self.uniform_epe.iter().zip(&self.linear_epe).enumerate() {
            out.push_str(&format!("{:>8} {u:>12.4} {l:>12.4}\n", k + 1));
        }
        out.push_str(&format!(
            "final training loss: uniform {:.6}, linear {:.6}\n",
            self.uniform_final_loss, self.linear_final_loss
        ));
        out.push_str(&format!(
            "waypoint-8 EPE, linear <= uniform: {}\n",
            if self.weighted_not_worse { "yes" } else { "no" }
        ));
        out.push_str(&format!(
            "reference EPE (full-scale validation): weighted {:.4} / unweighted {:.4}\n",
            self.reference_epe.0, self.reference_epe.1
        ));
        out
    }
}

const MODEL_MAGIC: &[u8; 4] = b"OFMP";
pub const MODEL_VERSION: u16 = 1;

/// Writes the model as `OFMP`, u16 version, u16 reserved, u32 input,
/// hidden, output and kernel sizes, u64 parameter count, then f64
/// parameters, all little-endian.
pub fn write_model<W: Write>(mut w: W, model: &TinyPredictor) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    for d in [model.in_channels, model.hidden, model.out_channels, KERNEL] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<TinyPredictor> {
    let mut head = [0u8; 32];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated model header: {e}")))?;
    if &head[0..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (cin, hidden, cout, kernel) = (dim(0), dim(1), dim(2), dim(3));
    if kernel != KERNEL {
        return Err(Error::Format(format!("unsupported kernel size {kernel}")));
    }
    let count = u64::from_le_bytes(head[24..32].try_into().unwrap()) as usize;
    if count != param_count(cin, hidden, cout) {
        return Err(Error::Format(format!(
            "parameter count {count} does not match a {cin}-{hidden}-{cout} model"
        )));
    }
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated parameters: {e}")))?;
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = TinyPredictor {
        in_channels: cin,
        hidden,
        out_channels: cout,
        params,
    };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &TinyPredictor) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_model(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TinyPredictor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize, kinds: &[SyntheticKind]) -> Vec<TrainExample> {
        synthetic_examples(0, n, kinds).unwrap()
    }

    #[test]
    fn sizes() {
        let m = TinyPredictor::init(0);
        assert_eq!(INPUT_CHANNELS, 38);
        assert!(m.num_params() < 100_000);
        let ex = &examples(1, &[SyntheticKind::Linear])[0];
        assert_eq!(ex.input.channels, INPUT_CHANNELS);
        let p = forward(&m, &ex.input).unwrap();
        assert_eq!(p.num_waypoints(), 8);
        assert_eq!(*p.spec(), demo_grid());
        assert_eq!(p.flow[0].channels(), 2);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let ex = &examples(1, &[SyntheticKind::Linear])[0];
        let p = forward(&TinyPredictor::zeros(), &ex.input).unwrap();
        for k in 0..8 {
            assert!(p.observed_logits[k].data().iter().all(|&v| v == 0.0));
            assert!(p.occluded_logits[k].data().iter().all(|&v| v == 0.0));
            assert!(p.flow[k].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, cin, cout) = (5, 4, 2, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = conv_forward(&im2col(&x, cin, h, w), &wt, &b, h * w);
        for o in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sr, sc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                                    s += wt[((o * cin + i) * 3 + ky) * 3 + kx]
                                        * x[i * h * w + sr as usize * w + sc as usize];
                                }
                            }
                        }
                    }
                    assert!((y[o * h * w + r * w + c] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_lambdas_give_zero_gradient() {
        let ex = &examples(1, &[SyntheticKind::Linear])[0];
        let obj = Objective {
            weights: LossWeights {
                lambda_o: 0.0,
                lambda_f: 0.0,
                lambda_w: 0.0,
            },
            schedule: ScheduleKind::Uniform,
        };
        let (_, g) = backward(&TinyPredictor::init(1), ex, &obj).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_lambda_is_linear() {
        let ex = &examples(1, &[SyntheticKind::Linear])[0];
        let m = TinyPredictor::init(2);
        let with = |lf: f64| {
            let obj = Objective {
                weights: LossWeights {
                    lambda_o: 1.0,
                    lambda_f: lf,
                    lambda_w: 1.0,
                },
                schedule: ScheduleKind::Linear,
            };
            backward(&m, ex, &obj).unwrap().1
        };
        let (g1, g2, g4) = (with(1.0), with(2.0), with(4.0));
        // g(2) - g(1) is the flow part; g(4) - g(2) must be exactly twice that
        for i in 0..g1.len() {
            let d1 = g2[i] - g1[i];
            let d2 = g4[i] - g2[i];
            assert!((d2 - 2.0 * d1).abs() <= 1e-12 * (1.0 + d2.abs()), "param {i}");
        }
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_flat() {
        let data = examples(2, &[SyntheticKind::Linear]);
        let cfg = TrainConfig {
            steps: 3,
            ..TrainConfig::demo(5, ScheduleKind::Linear)
        };
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        let flat = train(
            &TrainConfig {
                learning_rate: 0.0,
                ..cfg
            },
            &data,
        )
        .unwrap();
        assert!(flat.curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn divergence_is_reported() {
        let data = examples(1, &[SyntheticKind::Linear]);
        let cfg = TrainConfig {
            steps: 20,
            learning_rate: f64::MAX,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &data), Err(Error::Divergence { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let m = TinyPredictor::init(11);
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m).unwrap();
        assert_eq!(&bytes[..4], b"OFMP");
        assert_eq!(bytes.len(), 32 + 8 * m.num_params());
        assert_eq!(read_model(bytes.as_slice()).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Format(_))));
        assert!(read_model(&bytes[..100]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().learning_rate, 1e-4);
    }
}
