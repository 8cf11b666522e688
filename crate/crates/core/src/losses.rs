//! Multi-task training objective with analytic gradients.
//!
//! * occupancy: per-cell binary cross-entropy on logits,
//! * flow: occupancy-masked L1 with a per-waypoint time weight,
//! * trace: cross-entropy of (recursively flow-warped current occupancy x
//!   predicted occupancy) against all-agent ground truth.
//!
//! Components are raw sums; [`combined_loss`] applies the lambdas and the
//! `1 / (H * W * T)` normalizer.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_check, Error, Result};
use crate::grid::{combine_occupancy, warp_values, warp_values_backward, FlowField, Grid, GridSpec, OccupancyGrid};
use crate::scene::WaypointTargets;

/// Probabilities are kept inside `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of `sigmoid(z)` against target `y`, without forming the
/// probability.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Model output for one scenario and class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub observed_logits: Vec<Grid>,
    pub occluded_logits: Vec<Grid>,
    pub flow: Vec<FlowField>,
}

impl PredictionSet {
    pub fn num_waypoints(&self) -> usize {
        self.observed_logits.len()
    }

    pub fn spec(&self) -> &GridSpec {
        self.observed_logits[0].spec()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.observed_logits.len();
        shape_check(t > 0, || "prediction has no waypoints".into())?;
        shape_check(self.occluded_logits.len() == t && self.flow.len() == t, || {
            format!(
                "waypoint counts differ: {} observed, {} occluded, {} flow",
                t,
                self.occluded_logits.len(),
                self.flow.len()
            )
        })?;
        let spec = self.spec();
        for k in 0..t {
            spec.ensure_same(self.observed_logits[k].spec())?;
            spec.ensure_same(self.occluded_logits[k].spec())?;
            spec.ensure_same(self.flow[k].spec())?;
            shape_check(
                self.observed_logits[k].channels() == 1 && self.occluded_logits[k].channels() == 1,
                || format!("waypoint {k}: logits must have one channel"),
            )?;
        }
        Ok(())
    }

    pub fn observed_probs(&self, k: usize) -> OccupancyGrid {
        probs(&self.observed_logits[k])
    }

    pub fn occluded_probs(&self, k: usize) -> OccupancyGrid {
        probs(&self.occluded_logits[k])
    }

    /// `min(p_observed + p_occluded, 1)`.
    pub fn combined_probs(&self, k: usize) -> OccupancyGrid {
        combine_occupancy(&self.observed_probs(k), &self.occluded_probs(k)).expect("validated prediction")
    }
}

fn probs(logits: &Grid) -> OccupancyGrid {
    OccupancyGrid::from_grid(logits.map(sigmoid)).expect("sigmoid stays in [0, 1]")
}

/// Gradient of a scalar loss with respect to a [`PredictionSet`]. Flow
/// gradients are two-channel grids in (dx, dy) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub observed_logits: Vec<Grid>,
    pub occluded_logits: Vec<Grid>,
    pub flow: Vec<Grid>,
}

impl PredictionGrad {
    pub fn zeros(spec: GridSpec, waypoints: usize) -> Self {
        Self {
            observed_logits: vec![Grid::zeros(spec, 1); waypoints],
            occluded_logits: vec![Grid::zeros(spec, 1); waypoints],
            flow: vec![Grid::zeros(spec, 2); waypoints],
        }
    }

    fn grids_mut(&mut self) -> impl Iterator<Item = &mut Grid> {
        self.observed_logits
            .iter_mut()
            .chain(self.occluded_logits.iter_mut())
            .chain(self.flow.iter_mut())
    }

    pub fn grids(&self) -> impl Iterator<Item = &Grid> {
        self.observed_logits
            .iter()
            .chain(&self.occluded_logits)
            .chain(&self.flow)
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &PredictionGrad) {
        for (dst, src) in self.grids_mut().zip(other.grids()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += a * s;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for g in self.grids_mut() {
            for v in g.data_mut() {
                *v *= a;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Uniform,
    /// Weight proportional to the waypoint index.
    Linear,
    Custom(Vec<f64>),
}

impl Serialize for ScheduleKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ScheduleKind::Uniform => s.serialize_str("uniform"),
            ScheduleKind::Linear => s.serialize_str("linear"),
            ScheduleKind::Custom(w) => w.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ScheduleKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Weights(Vec<f64>),
        }
        match Repr::deserialize(d)? {
            Repr::Name(n) => n.parse().map_err(serde::de::Error::custom),
            Repr::Weights(w) => Ok(ScheduleKind::Custom(w)),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "linear" => Ok(ScheduleKind::Linear),
            other => {
                let w = other
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::InvalidSchedule(format!("expected uniform, linear or w1,..,wT; got '{s}'")))?;
                Ok(ScheduleKind::Custom(w))
            }
        }
    }
}

/// Per-waypoint flow-loss weights, normalized to mean 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSchedule {
    weights: Vec<f64>,
}

impl WeightSchedule {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn make_schedule(kind: &ScheduleKind, waypoints: usize) -> Result<WeightSchedule> {
    if waypoints == 0 {
        return Err(Error::InvalidSchedule("zero waypoints".into()));
    }
    let raw: Vec<f64> = match kind {
        ScheduleKind::Uniform => vec![1.0; waypoints],
        ScheduleKind::Linear => (1..=waypoints).map(|t| t as f64).collect(),
        ScheduleKind::Custom(w) => {
            if w.len() != waypoints {
                return Err(Error::InvalidSchedule(format!(
                    "{} weights given for {waypoints} waypoints",
                    w.len()
                )));
            }
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::InvalidSchedule(format!("weights must be positive, got {bad}")));
            }
            w.clone()
        }
    };
    let sum: f64 = raw.iter().sum();
    let n = waypoints as f64;
    Ok(WeightSchedule {
        weights: raw.iter().map(|w| w * n / sum).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_o: f64,
    pub lambda_f: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_o: 1.0,
            lambda_f: 1.0,
            lambda_w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_o: f64, lambda_f: f64, lambda_w: f64) -> Result<Self> {
        let w = Self {
            lambda_o,
            lambda_f,
            lambda_w,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_o, self.lambda_f, self.lambda_w];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss coefficients must be nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss coefficients are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    /// Weighted, normalized objective.
    pub total: f64,
    /// Raw component sums.
    pub occupancy: f64,
    pub flow: f64,
    pub trace: f64,
}

fn check_waypoints(what: &str, a: usize, b: usize) -> Result<()> {
    shape_check(a == b && a > 0, || format!("{what}: {a} vs {b} waypoints"))
}

/// Summed cross-entropy over waypoints and cells; gradient is
/// `sigmoid(logit) - gt`.
pub fn occupancy_loss(logits: &[Grid], gt: &[OccupancyGrid]) -> Result<(f64, Vec<Grid>)> {
    check_waypoints("occupancy loss", logits.len(), gt.len())?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(gt) {
        z.spec().ensure_same(y.spec())?;
        shape_check(z.channels() == 1, || "occupancy logits need one channel".into())?;
        let mut g = Grid::zeros(*z.spec(), 1);
        for ((gv, &zv), &yv) in g.data_mut().iter_mut().zip(z.data()).zip(y.values()) {
            total += bce_with_logit(zv, yv);
            *gv = sigmoid(zv) - yv;
        }
        grads.push(g);
    }
    Ok((total, grads))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Time-weighted, occupancy-masked L1 between predicted and true flow.
pub fn flow_loss(
    pred: &[FlowField],
    gt: &[FlowField],
    gt_occ: &[OccupancyGrid],
    schedule: &WeightSchedule,
) -> Result<(f64, Vec<Grid>)> {
    check_waypoints("flow loss", pred.len(), gt.len())?;
    check_waypoints("flow loss mask", pred.len(), gt_occ.len())?;
    check_waypoints("flow loss schedule", pred.len(), schedule.len())?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for t in 0..pred.len() {
        let (p, g, m) = (&pred[t], &gt[t], &gt_occ[t]);
        p.spec().ensure_same(g.spec())?;
        p.spec().ensure_same(m.spec())?;
        let w = schedule.weights[t];
        let mut grad = Grid::zeros(*p.spec(), 2);
        let gd = grad.data_mut();
        for (i, &mask) in m.values().iter().enumerate() {
            if mask == 0.0 {
                continue;
            }
            for ch in 0..2 {
                let d = p.data()[2 * i + ch] - g.data()[2 * i + ch];
                total += w * d.abs() * mask;
                gd[2 * i + ch] = w * sign(d) * mask;
            }
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Flow-trace loss. Starting from the current occupancy, each waypoint's
/// predicted flow warps the previous warped grid; the result times the
/// predicted all-agent occupancy is scored against `gt_all_occ`.
/// Gradients flow into both logit sets and, through the warp chain, into
/// every earlier flow.
pub fn trace_loss(
    observed_logits: &[Grid],
    occluded_logits: &[Grid],
    pred_flow: &[FlowField],
    current_occ: &OccupancyGrid,
    gt_all_occ: &[OccupancyGrid],
) -> Result<(f64, PredictionGrad)> {
    let t_f = observed_logits.len();
    check_waypoints("trace loss", t_f, occluded_logits.len())?;
    check_waypoints("trace loss", t_f, pred_flow.len())?;
    check_waypoints("trace loss", t_f, gt_all_occ.len())?;
    let spec = *current_occ.spec();
    for t in 0..t_f {
        spec.ensure_same(observed_logits[t].spec())?;
        spec.ensure_same(occluded_logits[t].spec())?;
        spec.ensure_same(pred_flow[t].spec())?;
        spec.ensure_same(gt_all_occ[t].spec())?;
    }
    let n = spec.cells();

    // forward: warped[t] holds W_t; warped[0] = current occupancy
    let mut warped = Vec::with_capacity(t_f + 1);
    warped.push(current_occ.values().to_vec());
    for flow in pred_flow {
        let next = warp_values(warped.last().unwrap(), flow);
        warped.push(next);
    }

    let mut grad = PredictionGrad::zeros(spec, t_f);
    let mut total = 0.0;
    // dL/dW_t from the loss term at t alone
    let mut direct = vec![vec![0.0; n]; t_f + 1];
    for t in 0..t_f {
        let w_t = &warped[t + 1];
        let (zo, zc, y) = (
            observed_logits[t].data(),
            occluded_logits[t].data(),
            gt_all_occ[t].values(),
        );
        let go = grad.observed_logits[t].data_mut();
        let gc = grad.occluded_logits[t].data_mut();
        for i in 0..n {
            let (so, sc) = (sigmoid(zo[i]), sigmoid(zc[i]));
            let u = so + sc;
            let occ = u.min(1.0);
            let p = w_t[i] * occ;
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += -(y[i] * pc.ln() + (1.0 - y[i]) * (1.0 - pc).ln());
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                continue;
            }
            let dp = (pc - y[i]) / (pc * (1.0 - pc));
            direct[t + 1][i] = dp * occ;
            if u < 1.0 {
                let d_occ = dp * w_t[i];
                go[i] = d_occ * so * (1.0 - so);
                gc[i] = d_occ * sc * (1.0 - sc);
            }
        }
    }

    // backward through W_t = warp(W_{t-1}, F_t)
    let mut upstream = std::mem::take(&mut direct[t_f]);
    for t in (1..=t_f).rev() {
        let mut g_prev = vec![0.0; n];
        warp_values_backward(
            &warped[t - 1],
            &pred_flow[t - 1],
            &upstream,
            &mut g_prev,
            grad.flow[t - 1].data_mut(),
        );
        if t > 1 {
            for (g, d) in g_prev.iter_mut().zip(&direct[t - 1]) {
                *g += d;
            }
        }
        upstream = g_prev;
    }
    Ok((total, grad))
}

/// Discrete state of every non-smooth point the combined loss passes
/// through: L1 signs, bilinear sample cells along the warp chain, the
/// occupancy cap and the probability clamp. Two inputs with equal
/// signatures lie on the same smooth piece.
pub(crate) fn branch_signature(
    pred: &PredictionSet,
    targets: &WaypointTargets,
    current_occ: &OccupancyGrid,
) -> Vec<i64> {
    let mut sig = Vec::new();
    let t_f = pred.num_waypoints();
    for t in 0..t_f {
        let mask = targets.all_occ(t);
        let (p, g) = (pred.flow[t].data(), targets.flow[t].data());
        for (i, &m) in mask.values().iter().enumerate() {
            if m != 0.0 {
                sig.push(sign(p[2 * i] - g[2 * i]) as i64);
                sig.push(sign(p[2 * i + 1] - g[2 * i + 1]) as i64);
            }
        }
    }
    let w = current_occ.width();
    let mut warped = current_occ.values().to_vec();
    for t in 0..t_f {
        let f = pred.flow[t].data();
        for i in 0..warped.len() {
            sig.push(((i / w) as f64 + f[2 * i + 1]).floor() as i64);
            sig.push(((i % w) as f64 + f[2 * i]).floor() as i64);
        }
        warped = warp_values(&warped, &pred.flow[t]);
        let (zo, zc) = (pred.observed_logits[t].data(), pred.occluded_logits[t].data());
        for i in 0..warped.len() {
            let u = sigmoid(zo[i]) + sigmoid(zc[i]);
            let p = warped[i] * u.min(1.0);
            sig.push((u >= 1.0) as i64);
            sig.push(if p <= PROB_EPS {
                -1
            } else if p >= 1.0 - PROB_EPS {
                1
            } else {
                0
            });
        }
    }
    sig
}

/// Weighted, normalized sum of the three components for a single class.
pub fn combined_loss(
    pred: &PredictionSet,
    targets: &WaypointTargets,
    current_occ: &OccupancyGrid,
    weights: &LossWeights,
    schedule: &WeightSchedule,
) -> Result<(LossValue, PredictionGrad)> {
    pred.validate()?;
    let t_f = pred.num_waypoints();
    check_waypoints("combined loss", t_f, targets.num_waypoints())?;
    let spec = *pred.spec();
    spec.ensure_same(targets.spec())?;
    spec.ensure_same(current_occ.spec())?;

    let all_occ: Vec<OccupancyGrid> = (0..t_f).map(|k| targets.all_occ(k)).collect();
    let (l_obs, g_obs) = occupancy_loss(&pred.observed_logits, &targets.observed_occ)?;
    let (l_occ, g_occ) = occupancy_loss(&pred.occluded_logits, &targets.occluded_occ)?;
    let (l_flow, g_flow) = flow_loss(&pred.flow, &targets.flow, &all_occ, schedule)?;
    let (l_trace, g_trace) = trace_loss(
        &pred.observed_logits,
        &pred.occluded_logits,
        &pred.flow,
        current_occ,
        &all_occ,
    )?;

    let norm = 1.0 / (spec.cells() as f64 * t_f as f64);
    let occupancy = l_obs + l_occ;
    let value = LossValue {
        total: norm * (weights.lambda_o * occupancy + weights.lambda_f * l_flow + weights.lambda_w * l_trace),
        occupancy,
        flow: l_flow,
        trace: l_trace,
    };

    let occupancy_grad = PredictionGrad {
        observed_logits: g_obs,
        occluded_logits: g_occ,
        flow: vec![Grid::zeros(spec, 2); t_f],
    };
    let flow_grad = PredictionGrad {
        observed_logits: vec![Grid::zeros(spec, 1); t_f],
        occluded_logits: vec![Grid::zeros(spec, 1); t_f],
        flow: g_flow,
    };
    let mut grad = PredictionGrad::zeros(spec, t_f);
    grad.add_scaled(norm * weights.lambda_o, &occupancy_grad);
    grad.add_scaled(norm * weights.lambda_f, &flow_grad);
    grad.add_scaled(norm * weights.lambda_w, &g_trace);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(h, w, 1.0).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, s: GridSpec, ch: usize, lo: f64, hi: f64) -> Grid {
        Grid::from_fn(s, ch, |_, _, _| rng.random_range(lo..hi))
    }

    fn random_binary(rng: &mut ChaCha8Rng, s: GridSpec, p: f64) -> OccupancyGrid {
        OccupancyGrid::from_fn(s, |_, _| if rng.random_bool(p) { 1.0 } else { 0.0 }).unwrap()
    }

    /// Central difference of `f` at every coordinate of `x`.
    fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = a.abs().max(b.abs());
        if d < 1e-8 {
            (a - b).abs()
        } else {
            (a - b).abs() / d
        }
    }

    fn flatten(grids: &[Grid]) -> Vec<f64> {
        grids.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    fn unflatten(s: GridSpec, ch: usize, x: &[f64]) -> Vec<Grid> {
        x.chunks(s.cells() * ch)
            .map(|c| Grid::from_vec(s, ch, c.to_vec()).unwrap())
            .collect()
    }

    fn flows(s: GridSpec, x: &[f64]) -> Vec<FlowField> {
        x.chunks(s.cells() * 2)
            .map(|c| FlowField::from_vec(s, c.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn occupancy_loss_closed_forms() {
        let s = spec(4, 4);
        let ones = OccupancyGrid::from_fn(s, |_, _| 1.0).unwrap();
        let (l, _) = occupancy_loss(&[Grid::from_fn(s, 1, |_, _, _| 50.0)], std::slice::from_ref(&ones)).unwrap();
        assert!(l / 16.0 < 1e-15);
        let one = spec(1, 1);
        let (l, g) = occupancy_loss(
            &[Grid::zeros(one, 1)],
            &[OccupancyGrid::from_vec(one, vec![1.0]).unwrap()],
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g[0].data()[0], -0.5);
        assert!(occupancy_loss(&[Grid::zeros(s, 1)], &[]).is_err());
    }

    #[test]
    fn occupancy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = spec(8, 8);
        let logits: Vec<Grid> = (0..2).map(|_| random_grid(&mut rng, s, 1, -3.0, 3.0)).collect();
        let gt: Vec<OccupancyGrid> = (0..2).map(|_| random_binary(&mut rng, s, 0.3)).collect();
        let (_, g) = occupancy_loss(&logits, &gt).unwrap();
        let num = central_diff(&flatten(&logits), 1e-3, |x| {
            occupancy_loss(&unflatten(s, 1, x), &gt).unwrap().0
        });
        let worst = flatten(&g)
            .iter()
            .zip(&num)
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn flow_loss_cases() {
        let s = spec(8, 8);
        let sched = make_schedule(&ScheduleKind::Uniform, 1).unwrap();
        let gt = FlowField::uniform(s, 2.0, -1.0);
        let mask = OccupancyGrid::from_fn(s, |r, c| if (r, c) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
        let (l, _) = flow_loss(
            std::slice::from_ref(&gt),
            std::slice::from_ref(&gt),
            std::slice::from_ref(&mask),
            &sched,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        let pred = FlowField::uniform(s, 3.0, -1.0);
        let (l, g) = flow_loss(
            std::slice::from_ref(&pred),
            std::slice::from_ref(&gt),
            std::slice::from_ref(&mask),
            &sched,
        )
        .unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g[0].get(1, 1, 0), 1.0);
        assert_eq!(g[0].get(1, 1, 1), 0.0);
        // unmasked cells do not matter
        let wild = FlowField::from_fn(s, |r, c| if (r, c) == (1, 1) { (3.0, -1.0) } else { (-9.0, 9.0) });
        assert_eq!(flow_loss(&[wild], &[gt], &[mask], &sched).unwrap().0, 1.0);
    }

    #[test]
    fn linear_schedule_weights_far_waypoints() {
        let s = spec(2, 2);
        let sched = make_schedule(&ScheduleKind::Linear, 8).unwrap();
        let zero = FlowField::zeros(s);
        let err = FlowField::uniform(s, 1.0, 0.0);
        let mask = OccupancyGrid::from_fn(s, |r, c| if (r, c) == (0, 0) { 1.0 } else { 0.0 }).unwrap();
        let empty = OccupancyGrid::zeros(s);
        let loss_at = |t: usize| {
            let pred: Vec<FlowField> = (0..8)
                .map(|k| if k == t { err.clone() } else { zero.clone() })
                .collect();
            let masks: Vec<OccupancyGrid> = (0..8)
                .map(|k| if k == t { mask.clone() } else { empty.clone() })
                .collect();
            flow_loss(&pred, &vec![zero.clone(); 8], &masks, &sched).unwrap().0
        };
        let (first, last) = (loss_at(0), loss_at(7));
        assert!((first - 2.0 / 9.0).abs() < 1e-15);
        assert!((last - 16.0 / 9.0).abs() < 1e-15);
        assert!((last / first - 8.0).abs() < 1e-12);
    }

    #[test]
    fn flow_gradient_matches_finite_differences_off_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec(8, 8);
        let sched = make_schedule(&ScheduleKind::Linear, 2).unwrap();
        let gt: Vec<FlowField> = (0..2)
            .map(|_| FlowField::from_grid(random_grid(&mut rng, s, 2, -3.0, 3.0)).unwrap())
            .collect();
        let mask: Vec<OccupancyGrid> = (0..2).map(|_| random_binary(&mut rng, s, 0.5)).collect();
        let pred: Vec<f64> = flatten(
            &(0..2)
                .map(|_| random_grid(&mut rng, s, 2, -3.0, 3.0))
                .collect::<Vec<_>>(),
        );
        let (_, g) = flow_loss(&flows(s, &pred), &gt, &mask, &sched).unwrap();
        let h = 1e-3;
        let num = central_diff(&pred, h, |x| flow_loss(&flows(s, x), &gt, &mask, &sched).unwrap().0);
        let gt_flat = flatten(&gt.iter().map(|f| f.as_grid().clone()).collect::<Vec<_>>());
        for (i, (a, b)) in flatten(&g).iter().zip(&num).enumerate() {
            if (pred[i] - gt_flat[i]).abs() < 2.0 * h {
                continue;
            }
            assert!(rel_err(*a, *b) < 1e-4, "entry {i}: {a} vs {b}");
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(make_schedule(&ScheduleKind::Uniform, 8).unwrap().weights(), &[1.0; 8]);
        let lin = make_schedule(&ScheduleKind::Linear, 8).unwrap();
        for (t, w) in lin.weights().iter().enumerate() {
            assert!((w - 2.0 * (t + 1) as f64 / 9.0).abs() < 1e-15);
        }
        assert!((lin.weights().iter().sum::<f64>() / 8.0 - 1.0).abs() < 1e-15);
        let custom = make_schedule(&ScheduleKind::Custom((1..=8).map(|v| v as f64).collect()), 8).unwrap();
        assert_eq!(custom, lin);
        let scaled = make_schedule(&ScheduleKind::Custom((1..=8).map(|v| 3.5 * v as f64).collect()), 8).unwrap();
        for (a, b) in scaled.weights().iter().zip(lin.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            make_schedule(&ScheduleKind::Custom(vec![1.0, 0.0]), 2),
            Err(Error::InvalidSchedule(_))
        ));
        assert!(make_schedule(&ScheduleKind::Custom(vec![1.0]), 2).is_err());
        assert_eq!("linear".parse::<ScheduleKind>().unwrap(), ScheduleKind::Linear);
        assert_eq!(
            "1,2".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::Custom(vec![1.0, 2.0])
        );
        let parsed: ScheduleKind = serde_json::from_str("[1, 2, 3]").unwrap();
        assert_eq!(parsed, ScheduleKind::Custom(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn trace_is_near_zero_for_static_saturated_prediction() {
        let s = spec(12, 12);
        let cur = OccupancyGrid::from_fn(s, |r, c| {
            if (4..7).contains(&r) && (3..8).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let obs: Vec<Grid> = (0..8)
            .map(|_| cur.map(|v| if v == 1.0 { 30.0 } else { -30.0 }))
            .collect();
        let occ = vec![Grid::from_fn(s, 1, |_, _, _| -30.0); 8];
        let (l, _) = trace_loss(&obs, &occ, &vec![FlowField::zeros(s); 8], &cur, &vec![cur.clone(); 8]).unwrap();
        assert!(l / (144.0 * 8.0) < 1e-6, "{l}");
    }

    #[test]
    fn warp_chain_moves_one_hot_by_t_cells() {
        let s = spec(9, 12);
        let mut w = OccupancyGrid::from_fn(s, |r, c| if (r, c) == (4, 2) { 1.0 } else { 0.0 })
            .unwrap()
            .values()
            .to_vec();
        let flow = FlowField::uniform(s, -1.0, 0.0);
        for t in 1..=6 {
            w = warp_values(&w, &flow);
            let hot: Vec<usize> = (0..w.len()).filter(|&i| w[i] == 1.0).collect();
            assert_eq!(hot, vec![4 * 12 + 2 + t]);
        }
    }

    struct TraceCase {
        s: GridSpec,
        cur: OccupancyGrid,
        gt: Vec<OccupancyGrid>,
        obs: Vec<Grid>,
        occ: Vec<Grid>,
        flow: Vec<f64>,
    }

    fn trace_case(seed: u64) -> TraceCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec(8, 8);
        let cur = OccupancyGrid::from_grid(random_grid(&mut rng, s, 1, 0.2, 0.9)).unwrap();
        let gt = (0..2).map(|_| random_binary(&mut rng, s, 0.4)).collect();
        let obs = (0..2).map(|_| random_grid(&mut rng, s, 1, -3.0, 0.0)).collect();
        let occ = (0..2).map(|_| random_grid(&mut rng, s, 1, -4.0, -1.0)).collect();
        let flow = flatten(
            &(0..2)
                .map(|_| random_grid(&mut rng, s, 2, -1.5, 1.5))
                .collect::<Vec<_>>(),
        );
        TraceCase {
            s,
            cur,
            gt,
            obs,
            occ,
            flow,
        }
    }

    #[test]
    fn trace_gradient_matches_finite_differences() {
        let c = trace_case(21);
        let (_, g) = trace_loss(&c.obs, &c.occ, &flows(c.s, &c.flow), &c.cur, &c.gt).unwrap();
        // the log of a product of warped probabilities is strongly curved
        let h = 1e-5;

        let num_obs = central_diff(&flatten(&c.obs), h, |x| {
            trace_loss(&unflatten(c.s, 1, x), &c.occ, &flows(c.s, &c.flow), &c.cur, &c.gt)
                .unwrap()
                .0
        });
        let num_occ = central_diff(&flatten(&c.occ), h, |x| {
            trace_loss(&c.obs, &unflatten(c.s, 1, x), &flows(c.s, &c.flow), &c.cur, &c.gt)
                .unwrap()
                .0
        });
        for (a, b) in flatten(&g.observed_logits).iter().zip(&num_obs) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
        for (a, b) in flatten(&g.occluded_logits).iter().zip(&num_occ) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }

        let num_flow = central_diff(&c.flow, h, |x| {
            trace_loss(&c.obs, &c.occ, &flows(c.s, x), &c.cur, &c.gt).unwrap().0
        });
        let mut checked = 0;
        for (i, (a, b)) in flatten(&g.flow).iter().zip(&num_flow).enumerate() {
            let frac = c.flow[i] - c.flow[i].floor();
            if frac < 2.0 * h || frac > 1.0 - 2.0 * h {
                continue;
            }
            checked += 1;
            assert!(rel_err(*a, *b) < 1e-4, "flow entry {i}: {a} vs {b}");
        }
        assert!(checked > 200);
    }

    fn combined_case(seed: u64) -> (PredictionSet, WaypointTargets, OccupancyGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec(8, 8);
        let pred = PredictionSet {
            observed_logits: (0..2).map(|_| random_grid(&mut rng, s, 1, -3.0, 1.0)).collect(),
            occluded_logits: (0..2).map(|_| random_grid(&mut rng, s, 1, -3.0, 1.0)).collect(),
            flow: (0..2)
                .map(|_| FlowField::from_grid(random_grid(&mut rng, s, 2, -2.0, 2.0)).unwrap())
                .collect(),
        };
        let targets = WaypointTargets {
            observed_occ: (0..2).map(|_| random_binary(&mut rng, s, 0.3)).collect(),
            occluded_occ: (0..2).map(|_| random_binary(&mut rng, s, 0.1)).collect(),
            flow: (0..2)
                .map(|_| FlowField::from_grid(random_grid(&mut rng, s, 2, -2.0, 2.0)).unwrap())
                .collect(),
        };
        let cur = OccupancyGrid::from_grid(random_grid(&mut rng, s, 1, 0.0, 1.0)).unwrap();
        (pred, targets, cur)
    }

    #[test]
    fn combined_isolates_and_sums_components() {
        let (pred, targets, cur) = combined_case(3);
        let sched = make_schedule(&ScheduleKind::Linear, 2).unwrap();
        let norm = 1.0 / 128.0;

        let (v, g) = combined_loss(&pred, &targets, &cur, &LossWeights::new(1.0, 0.0, 0.0).unwrap(), &sched).unwrap();
        assert!((v.total - norm * v.occupancy).abs() < 1e-15);
        let (l_obs, _) = occupancy_loss(&pred.observed_logits, &targets.observed_occ).unwrap();
        let (l_occ, _) = occupancy_loss(&pred.occluded_logits, &targets.occluded_occ).unwrap();
        assert!((v.occupancy - (l_obs + l_occ)).abs() < 1e-12);
        assert!(g.flow.iter().all(|f| f.data().iter().all(|&x| x == 0.0)));

        let weights = LossWeights::new(0.7, 1.3, 2.1).unwrap();
        let (v, g) = combined_loss(&pred, &targets, &cur, &weights, &sched).unwrap();
        let expect_total = norm * (0.7 * v.occupancy + 1.3 * v.flow + 2.1 * v.trace);
        assert!((v.total - expect_total).abs() < 1e-12);

        let comp = |w: LossWeights| combined_loss(&pred, &targets, &cur, &w, &sched).unwrap().1;
        let parts = [
            (
                0.7,
                comp(LossWeights {
                    lambda_o: 1.0,
                    lambda_f: 0.0,
                    lambda_w: 0.0,
                }),
            ),
            (
                1.3,
                comp(LossWeights {
                    lambda_o: 0.0,
                    lambda_f: 1.0,
                    lambda_w: 0.0,
                }),
            ),
            (
                2.1,
                comp(LossWeights {
                    lambda_o: 0.0,
                    lambda_f: 0.0,
                    lambda_w: 1.0,
                }),
            ),
        ];
        let mut sum = PredictionGrad::zeros(*pred.spec(), 2);
        for (a, p) in &parts {
            sum.add_scaled(*a, p);
        }
        for (x, y) in g.grids().zip(sum.grids()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_is_near_zero_for_perfect_prediction() {
        let s = spec(10, 10);
        let occ = OccupancyGrid::from_fn(s, |r, c| {
            if (3..5).contains(&r) && (2..6).contains(&c) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let targets = WaypointTargets {
            observed_occ: vec![occ.clone(); 8],
            occluded_occ: vec![OccupancyGrid::zeros(s); 8],
            flow: vec![FlowField::zeros(s); 8],
        };
        let pred = PredictionSet {
            observed_logits: vec![occ.map(|v| if v == 1.0 { 30.0 } else { -30.0 }); 8],
            occluded_logits: vec![Grid::from_fn(s, 1, |_, _, _| -30.0); 8],
            flow: vec![FlowField::zeros(s); 8],
        };
        let sched = make_schedule(&ScheduleKind::Linear, 8).unwrap();
        let (v, _) = combined_loss(&pred, &targets, &occ, &LossWeights::default(), &sched).unwrap();
        assert!(v.total < 1e-6, "{v:?}");
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_ok());
    }
}
