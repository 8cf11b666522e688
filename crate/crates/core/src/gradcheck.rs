//! Finite-difference verification of the analytic loss and model gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{FlowField, Grid, GridSpec, OccupancyGrid};
use crate::losses::{
    branch_signature, combined_loss, flow_loss, make_schedule, occupancy_loss, trace_loss, PredictionSet, ScheduleKind,
};
use crate::scene::synthetic::{make_synthetic_scenario_with, SyntheticKind};
use crate::scene::{ClassFilter, WaypointTargets};
use crate::trainer::{
    backward, clamp_signature, demo_grid, demo_synthetic_config, forward, Objective, TinyPredictor, TrainExample,
};

/// Step and tolerance for the loss-level checks.
pub const LOSS_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Step, tolerance and sample count for the model-level check.
pub const MODEL_STEP: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const MODEL_SAMPLES: usize = 32;
/// Denominator floor for the model check: parameter gradients of a loss of
/// order one below this size are compared on an absolute scale, where the
/// O(h^2) truncation of a 1e-3 step would otherwise dominate.
pub const MODEL_GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose probes straddled a non-differentiable point.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheck {
    pub fn render(&self) -> String {
        format!(
            "{:<10} {} checked={} skipped={} max_rel_error={:.3e} (h={:e}, tol={:e})",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.checked,
            self.skipped,
            self.max_rel_error,
            self.step,
            self.tolerance
        )
    }
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are
/// below 1e-8.
pub fn relative_error(a: f64, n: f64) -> f64 {
    relative_error_floored(a, n, 1e-8)
}

/// `|a - n| / max(|a|, |n|)`, or `|a - n|` when both are below `floor`.
pub fn relative_error_floored(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

struct Probe {
    rel: Option<f64>,
}

/// Central difference of coordinate `i`; `None` when the two probes land
/// on a different smooth piece than the base point.
fn probe<F>(x: &mut [f64], i: usize, h: f64, analytic: f64, base_sig: &[i64], eval: &F) -> Result<Probe>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<i64>)>,
{
    let x0 = x[i];
    x[i] = x0 + h;
    let (up, sig_up) = eval(x)?;
    x[i] = x0 - h;
    let (down, sig_down) = eval(x)?;
    x[i] = x0;
    if sig_up != base_sig || sig_down != base_sig {
        return Ok(Probe { rel: None });
    }
    Ok(Probe {
        rel: Some(relative_error(analytic, (up - down) / (2.0 * h))),
    })
}

fn finish(name: &str, checked: usize, skipped: usize, worst: f64, step: f64, tolerance: f64) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        checked,
        skipped,
        max_rel_error: worst,
        step,
        tolerance,
        passed: checked > 0 && worst < tolerance,
    }
}

/// Checks every coordinate of `x0`.
fn check_all<F>(name: &str, x0: &[f64], analytic: &[f64], h: f64, tol: f64, eval: F) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<i64>)>,
{
    let base_sig = eval(x0)?.1;
    let mut x = x0.to_vec();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        match probe(&mut x, i, h, a, &base_sig, &eval)?.rel {
            Some(r) => {
                checked += 1;
                worst = worst.max(r);
            }
            None => skipped += 1,
        }
    }
    Ok(finish(name, checked, skipped, worst, h, tol))
}

/// Random prediction/target pair for the loss checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInstance {
    pub pred: PredictionSet,
    pub targets: WaypointTargets,
    pub current_occ: OccupancyGrid,
}

/// 8 x 8 grid, two waypoints, logits in (-3, 3), flows in (-1.5, 1.5).
pub fn random_loss_instance(seed: u64) -> LossInstance {
    let spec = GridSpec::new(8, 8, 1.0).expect("valid grid");
    let t_f = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = |rng: &mut ChaCha8Rng| Grid::from_fn(spec, 1, |_, _, _| rng.random_range(-3.0..3.0));
    let observed_logits = (0..t_f).map(|_| logits(&mut rng)).collect();
    let occluded_logits = (0..t_f).map(|_| logits(&mut rng)).collect();
    let flow = |rng: &mut ChaCha8Rng| {
        FlowField::from_fn(spec, |_, _| (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
    };
    let pred_flow = (0..t_f).map(|_| flow(&mut rng)).collect();
    let binary = |rng: &mut ChaCha8Rng, p: f64| {
        OccupancyGrid::from_fn(spec, |_, _| if rng.random_bool(p) { 1.0 } else { 0.0 }).expect("binary grid")
    };
    let observed_occ = (0..t_f).map(|_| binary(&mut rng, 0.3)).collect();
    let occluded_occ = (0..t_f).map(|_| binary(&mut rng, 0.1)).collect();
    let gt_flow = (0..t_f).map(|_| flow(&mut rng)).collect();
    let current_occ = binary(&mut rng, 0.4);
    LossInstance {
        pred: PredictionSet {
            observed_logits,
            occluded_logits,
            flow: pred_flow,
        },
        targets: WaypointTargets {
            observed_occ,
            occluded_occ,
            flow: gt_flow,
        },
        current_occ,
    }
}

/// Observed logits, occluded logits, then interleaved flows.
fn pack(pred: &PredictionSet) -> Vec<f64> {
    pred.observed_logits
        .iter()
        .chain(&pred.occluded_logits)
        .flat_map(|g| g.data().iter().copied())
        .chain(pred.flow.iter().flat_map(|f| f.data().iter().copied()))
        .collect()
}

fn unpack(spec: GridSpec, t_f: usize, x: &[f64]) -> Result<PredictionSet> {
    let n = spec.cells();
    let grid = |k: usize| Grid::from_vec(spec, 1, x[k * n..(k + 1) * n].to_vec());
    let flow_base = 2 * t_f * n;
    Ok(PredictionSet {
        observed_logits: (0..t_f).map(grid).collect::<Result<_>>()?,
        occluded_logits: (t_f..2 * t_f).map(grid).collect::<Result<_>>()?,
        flow: (0..t_f)
            .map(|k| FlowField::from_vec(spec, x[flow_base + 2 * k * n..flow_base + 2 * (k + 1) * n].to_vec()))
            .collect::<Result<_>>()?,
    })
}

/// Occupancy, flow and trace loss gradients on one random instance.
pub fn check_loss_gradients(seed: u64) -> Result<Vec<GradCheck>> {
    let inst = random_loss_instance(seed);
    let spec = *inst.pred.spec();
    let t_f = inst.pred.num_waypoints();
    let n_logits = 2 * t_f * spec.cells();
    let all_occ: Vec<OccupancyGrid> = (0..t_f).map(|k| inst.targets.all_occ(k)).collect();
    let schedule = make_schedule(&ScheduleKind::Linear, t_f)?;
    let x0 = pack(&inst.pred);
    let signature = |p: &PredictionSet| branch_signature(p, &inst.targets, &inst.current_occ);

    let occupancy = |p: &PredictionSet| -> Result<(f64, Vec<Grid>)> {
        let (lo, go) = occupancy_loss(&p.observed_logits, &inst.targets.observed_occ)?;
        let (lc, gc) = occupancy_loss(&p.occluded_logits, &inst.targets.occluded_occ)?;
        Ok((lo + lc, go.into_iter().chain(gc).collect()))
    };
    let (_, g) = occupancy(&inst.pred)?;
    let analytic: Vec<f64> = g.iter().flat_map(|g| g.data().iter().copied()).collect();
    let occ_check = check_all(
        "occupancy",
        &x0[..n_logits],
        &analytic,
        LOSS_STEP,
        LOSS_TOLERANCE,
        |x| {
            let mut full = x0.clone();
            full[..n_logits].copy_from_slice(x);
            let p = unpack(spec, t_f, &full)?;
            Ok((occupancy(&p)?.0, signature(&p)))
        },
    )?;

    let (_, g) = flow_loss(&inst.pred.flow, &inst.targets.flow, &all_occ, &schedule)?;
    let analytic: Vec<f64> = g.iter().flat_map(|g| g.data().iter().copied()).collect();
    let flow_check = check_all("flow", &x0[n_logits..], &analytic, LOSS_STEP, LOSS_TOLERANCE, |x| {
        let mut full = x0.clone();
        full[n_logits..].copy_from_slice(x);
        let p = unpack(spec, t_f, &full)?;
        Ok((
            flow_loss(&p.flow, &inst.targets.flow, &all_occ, &schedule)?.0,
            signature(&p),
        ))
    })?;

    let trace = |p: &PredictionSet| {
        trace_loss(
            &p.observed_logits,
            &p.occluded_logits,
            &p.flow,
            &inst.current_occ,
            &all_occ,
        )
    };
    let (_, g) = trace(&inst.pred)?;
    let analytic: Vec<f64> = g.grids().flat_map(|g| g.data().iter().copied()).collect();
    let trace_check = check_all("trace", &x0, &analytic, LOSS_STEP, LOSS_TOLERANCE, |x| {
        let p = unpack(spec, t_f, x)?;
        Ok((trace(&p)?.0, signature(&p)))
    })?;

    Ok(vec![occ_check, flow_check, trace_check])
}

/// Checks `samples` randomly chosen model parameters on one synthetic
/// demo scene. Parameters whose probes cross a non-smooth point are
/// replaced by fresh draws.
pub fn check_model_gradient(seed: u64, samples: usize) -> Result<GradCheck> {
    model_check(seed, samples, |_| {})
}

fn model_check(seed: u64, samples: usize, tamper: impl Fn(&mut [f64])) -> Result<GradCheck> {
    let scenario = make_synthetic_scenario_with(seed, SyntheticKind::Linear, &demo_synthetic_config());
    let example = TrainExample::from_scenario(&scenario, &demo_grid(), ClassFilter::VEHICLES)?;
    let mut model = TinyPredictor::init(seed);
    let objective = Objective {
        weights: Default::default(),
        schedule: ScheduleKind::Linear,
    };
    let (_, mut analytic) = backward(&model, &example, &objective)?;
    tamper(&mut analytic);
    let schedule = make_schedule(&objective.schedule, example.targets.num_waypoints())?;
    let eval = |m: &TinyPredictor| -> Result<(f64, Vec<i64>)> {
        let pred = forward(m, &example.input)?;
        let (value, _) = combined_loss(
            &pred,
            &example.targets,
            &example.current_occ,
            &objective.weights,
            &schedule,
        )?;
        let mut sig = branch_signature(&pred, &example.targets, &example.current_occ);
        sig.extend(clamp_signature(m, &example.input)?);
        Ok((value.total, sig))
    };
    let base_sig = eval(&model)?.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let order = sample(&mut rng, model.num_params(), model.num_params());
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for i in order.iter() {
        if checked == samples {
            break;
        }
        let x0 = model.params[i];
        let mut side = |v: f64| -> Result<(f64, Vec<i64>)> {
            model.params[i] = v;
            eval(&model)
        };
        let (up, sig_up) = side(x0 + MODEL_STEP)?;
        let (down, sig_down) = side(x0 - MODEL_STEP)?;
        model.params[i] = x0;
        if sig_up != base_sig || sig_down != base_sig {
            skipped += 1;
            continue;
        }
        checked += 1;
        let r = relative_error_floored(analytic[i], (up - down) / (2.0 * MODEL_STEP), MODEL_GRADIENT_FLOOR);
        worst = worst.max(r);
    }
    let mut out = finish("model", checked, skipped, worst, MODEL_STEP, MODEL_TOLERANCE);
    out.passed &= checked == samples;
    Ok(out)
}

/// All loss checks plus the model check.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = check_loss_gradients(seed)?;
    out.push(check_model_gradient(seed, MODEL_SAMPLES)?);
    Ok(out)
}
