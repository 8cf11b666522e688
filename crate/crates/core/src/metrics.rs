//! Occupancy and flow evaluation: threshold-sweep PR-AUC, Soft-IoU, end-point
//! error and flow-grounded occupancy, averaged over waypoints.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::grid::{warp, FlowField, OccupancyGrid};
use crate::losses::PredictionSet;
use crate::scene::WaypointTargets;

pub const DEFAULT_THRESHOLDS: usize = 100;

/// Linearly spaced thresholds covering `[0, 1]` with both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid {
    values: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!("need at least 2 thresholds, got {count}")));
        }
        let last = (count - 1) as f64;
        let values = (0..count)
            .map(|i| if i + 1 == count { 1.0 } else { i as f64 / last })
            .collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::new(DEFAULT_THRESHOLDS).expect("default threshold count is valid")
    }
}

fn ensure_binary(gt: &OccupancyGrid) -> Result<()> {
    match gt.values().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::InvalidGrid(format!(
            "ground-truth occupancy must be binary, found {} at cell {i}",
            gt.values()[i]
        ))),
        None => Ok(()),
    }
}

/// Area under the precision/recall curve from a threshold sweep.
///
/// A cell counts as predicted positive when `pred > tau`. Precision is 1 when
/// nothing is predicted positive. Points are visited from the highest
/// threshold down (non-decreasing recall), prefixed by an anchor at recall 0
/// carrying the first point's precision, and integrated with the trapezoid
/// rule. Ground truth without positives scores 0.
pub fn pr_auc(pred: &OccupancyGrid, gt: &OccupancyGrid, thresholds: &ThresholdGrid) -> Result<f64> {
    pred.spec().ensure_same(gt.spec())?;
    ensure_binary(gt)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        if y == 1.0 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    if pos.is_empty() {
        return Ok(0.0);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], tau: f64| sorted.len() - sorted.partition_point(|&v| v <= tau);

    let n_pos = pos.len() as f64;
    let mut area = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &tau in thresholds.values().iter().rev() {
        let tp = above(&pos, tau) as f64;
        let fp = above(&neg, tau) as f64;
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let recall = tp / n_pos;
        let (r0, p0) = prev.unwrap_or((0.0, precision));
        area += (recall - r0) * (precision + p0) / 2.0;
        prev = Some((recall, precision));
    }
    Ok(area)
}

/// Denominator convention for Soft-IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IouVariant {
    /// `sum(O * P) / sum(O + P + O * P)`, the form printed with the metric
    /// definition. Caps at 1/3 for a perfect binary prediction.
    #[default]
    #[serde(rename = "paper", alias = "paper_literal")]
    PaperLiteral,
    /// `sum(O * P) / sum(O + P - O * P)`, the standard soft union.
    #[serde(rename = "union")]
    Union,
}

impl fmt::Display for IouVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouVariant::PaperLiteral => "paper",
            IouVariant::Union => "union",
        })
    }
}

impl FromStr for IouVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper_literal" => Ok(IouVariant::PaperLiteral),
            "union" => Ok(IouVariant::Union),
            other => Err(Error::Config(format!(
                "unknown Soft-IoU variant '{other}' (expected paper or union)"
            ))),
        }
    }
}

/// Soft intersection over union; 0 when the ground truth is empty.
pub fn soft_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, variant: IouVariant) -> Result<f64> {
    pred.spec().ensure_same(gt.spec())?;
    let mut inter = 0.0;
    let mut sum = 0.0;
    let mut gt_mass = 0.0;
    for (&p, &o) in pred.values().iter().zip(gt.values()) {
        inter += o * p;
        sum += o + p;
        gt_mass += o;
    }
    if gt_mass == 0.0 {
        return Ok(0.0);
    }
    let denom = match variant {
        IouVariant::PaperLiteral => sum + inter,
        IouVariant::Union => sum - inter,
    };
    Ok(if denom > 0.0 { inter / denom } else { 0.0 })
}

/// Mean end-point error with the number of cells it was taken over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Epe {
    pub value: f64,
    pub cells: usize,
}

/// Mean L2 flow error over cells whose ground-truth flow is non-zero.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<Epe> {
    pred.spec().ensure_same(gt.spec())?;
    let mut total = 0.0;
    let mut cells = 0;
    for (p, g) in pred.data().chunks_exact(2).zip(gt.data().chunks_exact(2)) {
        if g[0] == 0.0 && g[1] == 0.0 {
            continue;
        }
        total += (p[0] - g[0]).hypot(p[1] - g[1]);
        cells += 1;
    }
    let value = if cells == 0 { 0.0 } else { total / cells as f64 };
    Ok(Epe { value, cells })
}

fn check_pair(pred: &PredictionSet, targets: &WaypointTargets, current: &OccupancyGrid) -> Result<()> {
    pred.validate()?;
    let t = pred.num_waypoints();
    shape_check(
        targets.observed_occ.len() == t && targets.occluded_occ.len() == t && targets.flow.len() == t,
        || {
            format!(
                "prediction has {t} waypoints but targets have {}",
                targets.num_waypoints()
            )
        },
    )?;
    pred.spec().ensure_same(targets.spec())?;
    pred.spec().ensure_same(current.spec())
}

/// Flow-grounded AUC and Soft-IoU per waypoint.
///
/// The ground-truth occupancy of the previous waypoint (the current
/// occupancy for the first) is warped by the predicted flow and multiplied
/// by the predicted all-agent occupancy; the product is scored against the
/// ground-truth all-agent occupancy.
pub fn flow_grounded(
    pred: &PredictionSet,
    targets: &WaypointTargets,
    current_occ: &OccupancyGrid,
    thresholds: &ThresholdGrid,
    variant: IouVariant,
) -> Result<Vec<(f64, f64)>> {
    check_pair(pred, targets, current_occ)?;
    let mut prev = current_occ.clone();
    let mut out = Vec::with_capacity(pred.num_waypoints());
    for k in 0..pred.num_waypoints() {
        let gt = targets.all_occ(k);
        let warped = warp(&prev, &pred.flow[k])?;
        let predicted = pred.combined_probs(k);
        let score = OccupancyGrid::from_values_clamped(
            *gt.spec(),
            warped
                .values()
                .iter()
                .zip(predicted.values())
                .map(|(w, p)| w * p)
                .collect(),
        );
        out.push((pr_auc(&score, &gt, thresholds)?, soft_iou(&score, &gt, variant)?));
        prev = gt;
    }
    Ok(out)
}

/// The seven headline metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub observed_auc: f64,
    pub observed_soft_iou: f64,
    pub occluded_auc: f64,
    pub occluded_soft_iou: f64,
    pub epe: f64,
    pub flow_grounded_auc: f64,
    pub flow_grounded_soft_iou: f64,
}

impl MetricValues {
    pub const LABELS: [&'static str; 7] = [
        "Observed AUC",
        "Observed Soft-IoU",
        "Occluded AUC",
        "Occluded Soft-IoU",
        "EPE",
        "Flow-grounded AUC",
        "Flow-grounded Soft-IoU",
    ];

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.observed_auc,
            self.observed_soft_iou,
            self.occluded_auc,
            self.occluded_soft_iou,
            self.epe,
            self.flow_grounded_auc,
            self.flow_grounded_soft_iou,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            observed_auc: v[0],
            observed_soft_iou: v[1],
            occluded_auc: v[2],
            occluded_soft_iou: v[3],
            epe: v[4],
            flow_grounded_auc: v[5],
            flow_grounded_soft_iou: v[6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub thresholds: usize,
    pub iou_variant: IouVariant,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS,
            iou_variant: IouVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_variant: IouVariant,
    pub thresholds: usize,
    pub scenarios: usize,
    pub waypoints: usize,
    /// Cells per waypoint grid.
    pub cells_per_waypoint: usize,
    /// Cells with non-zero ground-truth flow, summed over waypoints and
    /// scenarios; the support of the EPE average.
    pub flow_cells: usize,
    pub mean: MetricValues,
    pub per_waypoint: Vec<MetricValues>,
}

/// All metrics for one scenario.
pub fn evaluate(
    pred: &PredictionSet,
    targets: &WaypointTargets,
    current_occ: &OccupancyGrid,
    config: &MetricsConfig,
) -> Result<MetricsReport> {
    check_pair(pred, targets, current_occ)?;
    let thresholds = ThresholdGrid::new(config.thresholds)?;
    let variant = config.iou_variant;
    let grounded = flow_grounded(pred, targets, current_occ, &thresholds, variant)?;
    let mut per_waypoint = Vec::with_capacity(pred.num_waypoints());
    let mut flow_cells = 0;
    for (k, &(fg_auc, fg_iou)) in grounded.iter().enumerate() {
        let obs = pred.observed_probs(k);
        let occ = pred.occluded_probs(k);
        let e = epe(&pred.flow[k], &targets.flow[k])?;
        flow_cells += e.cells;
        per_waypoint.push(MetricValues {
            observed_auc: pr_auc(&obs, &targets.observed_occ[k], &thresholds)?,
            observed_soft_iou: soft_iou(&obs, &targets.observed_occ[k], variant)?,
            occluded_auc: pr_auc(&occ, &targets.occluded_occ[k], &thresholds)?,
            occluded_soft_iou: soft_iou(&occ, &targets.occluded_occ[k], variant)?,
            epe: e.value,
            flow_grounded_auc: fg_auc,
            flow_grounded_soft_iou: fg_iou,
        });
    }
    Ok(MetricsReport {
        iou_variant: variant,
        thresholds: config.thresholds,
        scenarios: 1,
        waypoints: per_waypoint.len(),
        cells_per_waypoint: pred.spec().cells(),
        flow_cells,
        mean: mean_of(&per_waypoint),
        per_waypoint,
    })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn mean_of(rows: &[MetricValues]) -> MetricValues {
    let mut acc = [CompensatedSum::default(); 7];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row.to_array()) {
            a.add(v);
        }
    }
    let n = rows.len().max(1) as f64;
    MetricValues::from_array(acc.map(|a| a.value() / n))
}

/// Dataset-level report: every value is the mean over scenarios, taken in
/// the order given.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no reports to aggregate".into()))?;
    for r in reports {
        shape_check(
            r.waypoints == first.waypoints && r.iou_variant == first.iou_variant && r.thresholds == first.thresholds,
            || "reports were produced with different settings".into(),
        )?;
    }
    let per_waypoint: Vec<MetricValues> = (0..first.waypoints)
        .map(|k| mean_of(&reports.iter().map(|r| r.per_waypoint[k]).collect::<Vec<_>>()))
        .collect();
    Ok(MetricsReport {
        iou_variant: first.iou_variant,
        thresholds: first.thresholds,
        scenarios: reports.iter().map(|r| r.scenarios).sum(),
        waypoints: first.waypoints,
        cells_per_waypoint: first.cells_per_waypoint,
        flow_cells: reports.iter().map(|r| r.flow_cells).sum(),
        mean: mean_of(&reports.iter().map(|r| r.mean).collect::<Vec<_>>()),
        per_waypoint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Published full-scale numbers, used only to annotate reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub split: Split,
    pub values: MetricValues,
}

const fn row(method: &'static str, split: Split, v: [f64; 7]) -> ReferenceRow {
    ReferenceRow {
        method,
        split,
        values: MetricValues {
            observed_auc: v[0],
            observed_soft_iou: v[1],
            occluded_auc: v[2],
            occluded_soft_iou: v[3],
            epe: v[4],
            flow_grounded_auc: v[5],
            flow_grounded_soft_iou: v[6],
        },
    }
}

const REFERENCE_ROWS: [ReferenceRow; 13] = [
    row(
        "OFMPNet-R2AttU",
        Split::Val,
        [0.4726, 0.2028, 0.0330, 0.0047, 21.6873, 0.5182, 0.2220],
    ),
    row(
        "OFMPNet-ULSTM",
        Split::Val,
        [0.6559, 0.4007, 0.1227, 0.0261, 20.5876, 0.5768, 0.4280],
    ),
    row(
        "OFMPNet-ULSTM-H",
        Split::Val,
        [0.6572, 0.4097, 0.1180, 0.0221, 20.1906, 0.5835, 0.4312],
    ),
    row(
        "OFMPNet-UNext-H",
        Split::Val,
        [0.7119, 0.4257, 0.1451, 0.0309, 21.6873, 0.5691, 0.4243],
    ),
    row(
        "OFMPNet-LSTM",
        Split::Val,
        [0.7636, 0.4910, 0.1587, 0.0365, 3.6859, 0.7568, 0.5270],
    ),
    row(
        "OFMPNet-CA-LSTM",
        Split::Val,
        [0.7647, 0.4977, 0.1583, 0.0366, 3.6292, 0.7594, 0.5315],
    ),
    row(
        "OFMPNet-Swin-T-WL",
        Split::Val,
        [0.7618, 0.4820, 0.1540, 0.0357, 3.3987, 0.7685, 0.5240],
    ),
    row(
        "OFMPNet-Swin-T",
        Split::Val,
        [0.7714, 0.5047, 0.1613, 0.0413, 3.5425, 0.7621, 0.5410],
    ),
    row(
        "OFMPNet-ULSTM",
        Split::Test,
        [0.6485, 0.3823, 0.1242, 0.0230, 20.0771, 0.5799, 0.4070],
    ),
    row(
        "OFMPNet-R2AttU-T2",
        Split::Test,
        [0.4759, 0.2006, 0.0403, 0.0065, 21.5577, 0.4846, 0.2008],
    ),
    row(
        "OFMPNet-CA-LSTM",
        Split::Test,
        [0.7627, 0.4950, 0.1633, 0.0374, 3.6686, 0.7590, 0.5284],
    ),
    row(
        "OFMPNet-Swin-T-WL",
        Split::Test,
        [0.7591, 0.4786, 0.1618, 0.0371, 3.4109, 0.7675, 0.5207],
    ),
    row(
        "OFMPNet-Swin-T",
        Split::Test,
        [0.7694, 0.5021, 0.1651, 0.0423, 3.5868, 0.7614, 0.5377],
    ),
];

pub fn reference_table() -> &'static [ReferenceRow] {
    &REFERENCE_ROWS
}

pub fn lookup(method: &str, split: Split) -> Option<&'static ReferenceRow> {
    REFERENCE_ROWS.iter().find(|r| r.method == method && r.split == split)
}

/// Rows annotated in text reports.
pub const REPORT_REFERENCES: [(&str, Split); 2] = [("OFMPNet-Swin-T", Split::Test), ("OFMPNet-Swin-T-WL", Split::Test)];

impl MetricsReport {
    /// Pretty JSON with keys in declaration order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Occupancy/flow metrics: {} scenario(s), {} waypoints, {} thresholds, {} cells per grid",
            self.scenarios, self.waypoints, self.thresholds, self.cells_per_waypoint
        );
        let _ = writeln!(
            out,
            "Soft-IoU variant: {}",
            match self.iou_variant {
                IouVariant::PaperLiteral =>
                    "paper, sum(O*P) / sum(O + P + O*P); a perfect binary prediction scores 1/3, not 1",
                IouVariant::Union => "union, sum(O*P) / sum(O + P - O*P)",
            }
        );
        let _ = writeln!(out, "EPE support: {} flow cells", self.flow_cells);
        let header = [
            "waypoint", "obs_auc", "obs_iou", "occ_auc", "occ_iou", "epe", "fg_auc", "fg_iou",
        ];
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            header[0], header[1], header[2], header[3], header[4], header[5], header[6], header[7]
        );
        let mut line = |label: String, v: &MetricValues| {
            let _ = write!(out, "{label:>8}");
            for x in v.to_array() {
                let _ = write!(out, " {x:>9.4}");
            }
            out.push('\n');
        };
        for (k, v) in self.per_waypoint.iter().enumerate() {
            line((k + 1).to_string(), v);
        }
        line("mean".into(), &self.mean);
        let _ = writeln!(out, "Reference deltas (measured minus reported):");
        for (method, split) in REPORT_REFERENCES {
            let Some(reference) = lookup(method, split) else {
                continue;
            };
            for ((label, ours), theirs) in MetricValues::LABELS
                .iter()
                .zip(self.mean.to_array())
                .zip(reference.values.to_array())
            {
                let _ = writeln!(out, "  {label} vs {method} {split} {theirs:.4}: {:+.4}", ours - theirs);
            }
        }
        out
    }
}
