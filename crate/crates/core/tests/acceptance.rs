//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ofp_core::baselines::{constant_velocity_predict, persistence_predict, CERTAIN_LOGIT};
use ofp_core::blocks::{
    attention_probs, cyclic_shift, cyclic_unshift, patch_embed, run_selftest, window_partition, window_reverse,
    AttentionConfig, AttentionLayer, Tensor,
};
use ofp_core::dataset::{predict_dataset, run_eval, write_summary, RunConfig, SUMMARY_JSON};
use ofp_core::gradcheck::{check_loss_gradients, check_model_gradient, MODEL_SAMPLES};
use ofp_core::io::scenario_to_json;
use ofp_core::losses::ScheduleKind;
use ofp_core::metrics::{epe, pr_auc, soft_iou, ThresholdGrid};
use ofp_core::scene::synthetic::{make_synthetic_scenario_with, SyntheticConfig};
use ofp_core::trainer::{ablation_sets, demo_train_set, train, wl_ablation, TrainConfig};
use ofp_core::{
    assemble_input, build_waypoint_targets, evaluate, warp, AgentClass, AgentState, AgentTrack, BaselineKind,
    ClassFilter, FlowField, Grid, GridSpec, IouVariant, MetricsConfig, OccupancyGrid, PredictionSet, Scenario,
    SyntheticKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Runs one criterion, enforcing its runtime budget, and prints its line.
fn run(number: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(o) => (o.passed && elapsed <= budget, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {number} [{}] {name}: {detail} ({:.2}s of {}s budget)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

fn warp_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatched = 0;
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let spec = GridSpec::new(h, w, 0.3125).unwrap();
        let soft = i % 2 == 0;
        let occ = OccupancyGrid::from_fn(spec, |_, _| {
            if soft {
                rng.random_range(0.0..=1.0)
            } else if rng.random_bool(0.3) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let out = warp(&occ, &FlowField::zeros(spec)).unwrap();
        if !out
            .values()
            .iter()
            .zip(occ.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            mismatched += 1;
        }
    }
    outcome(mismatched == 0, format!("{mismatched}/100 grids differ"))
}

const SPEED: f64 = 3.125;

/// One vehicle driving along +x at `SPEED`, grid fixed at the world origin.
fn moving_box_scenario() -> Scenario {
    let states = (0..91)
        .map(|i| {
            let t = (i as f64 - 10.0) * 0.1;
            AgentState {
                x: -12.0 + SPEED * t,
                y: 1.1,
                vx: SPEED,
                vy: 0.0,
                heading: 0.0,
                valid: true,
            }
        })
        .collect();
    Scenario {
        grid: Some(GridSpec::default()),
        agents: vec![AgentTrack {
            id: 1,
            class: AgentClass::Vehicle,
            length: 4.5,
            width: 2.0,
            states,
        }],
        ..Scenario::empty("moving-box")
    }
}

/// Backward flow from a rigid transform of the agent pose.
fn rigid_flow_oracle(spec: &GridSpec, track: &AgentTrack, k: usize, r: usize, c: usize) -> (f64, f64) {
    let cs = spec.cell_size_m;
    let (hc, wc) = (
        spec.height_cells as f64 / 2.0 - 0.5,
        spec.width_cells as f64 / 2.0 - 0.5,
    );
    let px = (c as f64 - wc) * cs;
    let py = (hc - r as f64) * cs;
    let now = track.states[10 + 10 * k];
    let before = track.states[10 + 10 * (k - 1)];
    let (s, co) = now.heading.sin_cos();
    let (lx, ly) = (
        co * (px - now.x) + s * (py - now.y),
        -s * (px - now.x) + co * (py - now.y),
    );
    let (s0, c0) = before.heading.sin_cos();
    let (qx, qy) = (before.x + c0 * lx - s0 * ly, before.y + s0 * lx + c0 * ly);
    let (col, row) = (wc + qx / cs, hc - qy / cs);
    (col - c as f64, row - r as f64)
}

fn ground_truth_flow() -> Outcome {
    let scenario = moving_box_scenario();
    let spec = GridSpec::default();
    let targets = build_waypoint_targets(&scenario, &spec, ClassFilter::VEHICLES).unwrap();
    let (mut cells, mut worst_oracle, mut worst_exact, mut stray) = (0usize, 0.0f64, 0.0f64, 0usize);
    for k in 1..=8 {
        let occ = targets.all_occ(k - 1);
        let flow = &targets.flow[k - 1];
        for r in 0..spec.height_cells {
            for c in 0..spec.width_cells {
                let (dx, dy) = (flow.dx(r, c), flow.dy(r, c));
                if occ.values()[r * spec.width_cells + c] == 1.0 {
                    cells += 1;
                    let (ox, oy) = rigid_flow_oracle(&spec, &scenario.agents[0], k, r, c);
                    worst_oracle = worst_oracle.max((dx - ox).abs()).max((dy - oy).abs());
                    worst_exact = worst_exact.max((dx + 10.0).abs()).max(dy.abs());
                } else if dx != 0.0 || dy != 0.0 {
                    stray += 1;
                }
            }
        }
    }
    outcome(
        cells > 0 && worst_oracle <= 1e-9 && worst_exact <= 1e-9 && stray == 0,
        format!(
            "{cells} occupied cells over 8 waypoints, max |flow - oracle| = {worst_oracle:.1e}, max |flow - (-10, 0)| = {worst_exact:.1e}, {stray} unoccupied cells with flow"
        ),
    )
}

/// Confusion counts threshold by threshold, no sorting or shared code.
fn brute_force_pr_auc(pred: &[f64], gt: &[f64], thresholds: &[f64]) -> f64 {
    let positives = gt.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    for &tau in thresholds.iter().rev() {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (p, y) in pred.iter().zip(gt) {
            if *p > tau {
                if *y == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        points.push((tp as f64 / positives as f64, precision));
    }
    let mut area = 0.0;
    let mut last = (0.0, points[0].1);
    for p in points {
        area += (p.0 - last.0) * (p.1 + last.1) * 0.5;
        last = p;
    }
    area
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = GridSpec::new(8, 8, 1.0).unwrap();
    let thresholds = ThresholdGrid::default();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let quantized = i % 3 == 0;
        let pred: Vec<f64> = (0..64)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..=1.0);
                if quantized {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            })
            .collect();
        let rate = rng.random_range(0.05..0.6);
        let gt: Vec<f64> = (0..64).map(|_| if rng.random_bool(rate) { 1.0 } else { 0.0 }).collect();
        let got = pr_auc(
            &OccupancyGrid::from_vec(spec, pred.clone()).unwrap(),
            &OccupancyGrid::from_vec(spec, gt.clone()).unwrap(),
            &thresholds,
        )
        .unwrap();
        worst = worst.max((got - brute_force_pr_auc(&pred, &gt, thresholds.values())).abs());
    }

    let ones = OccupancyGrid::from_fn(spec, |_, _| 1.0).unwrap();
    let iou_paper = soft_iou(&ones, &ones, IouVariant::PaperLiteral).unwrap();
    let iou_union = soft_iou(&ones, &ones, IouVariant::Union).unwrap();
    let tiny = GridSpec::new(2, 2, 1.0).unwrap();
    let p = OccupancyGrid::from_vec(tiny, vec![0.5, 1.0, 0.0, 0.25]).unwrap();
    let o = OccupancyGrid::from_vec(tiny, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let hand_paper = 1.5 / (2.0 + 1.75 + 1.5);
    let hand_union = 1.5 / (2.0 + 1.75 - 1.5);
    let iou_err = [
        (iou_paper - 1.0 / 3.0).abs(),
        (iou_union - 1.0).abs(),
        (soft_iou(&p, &o, IouVariant::PaperLiteral).unwrap() - hand_paper).abs(),
        (soft_iou(&p, &o, IouVariant::Union).unwrap() - hand_union).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let gt_flow = FlowField::uniform(spec, 1.0, -2.0);
    let pred_flow = FlowField::uniform(spec, 4.0, 2.0);
    let e = epe(&pred_flow, &gt_flow).unwrap().value;

    outcome(
        worst < 1e-9 && iou_err < 1e-12 && (e - 5.0).abs() < 1e-12,
        format!(
            "max |pr_auc - brute force| = {worst:.1e} over 100 instances, soft IoU all-ones {iou_paper:.6} (paper) / {iou_union:.6} (union), max hand-computed IoU error {iou_err:.1e}, EPE of a (3, 4) error = {e}"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut all_pass = true;
    let mut skipped = 0;
    for seed in 0..5 {
        for (i, c) in check_loss_gradients(seed).unwrap().into_iter().enumerate() {
            worst[i] = worst[i].max(c.max_rel_error);
            all_pass &= c.passed && c.max_rel_error < 1e-4;
            skipped += c.skipped;
        }
    }
    let model = check_model_gradient(0, MODEL_SAMPLES).unwrap();
    outcome(
        all_pass && model.passed && model.max_rel_error < 1e-3,
        format!(
            "max relative error occupancy {:.1e}, flow {:.1e}, trace {:.1e} (5 instances, {skipped} kink coordinates skipped); model {:.1e} on {} parameters",
            worst[0], worst[1], worst[2], model.max_rel_error, model.checked
        ),
    )
}

fn baseline_anchors() -> Outcome {
    let cfg = SyntheticConfig::default();
    let metrics = MetricsConfig::default();
    let (mut worst_cv_epe, mut min_obs, mut min_fg, mut worst_pers) = (0.0f64, 1.0f64, 1.0f64, 0.0f64);
    for seed in 0..16 {
        let scenario = make_synthetic_scenario_with(seed, SyntheticKind::Linear, &cfg);
        let spec = scenario.grid_spec();
        let input = assemble_input(&scenario, &spec, ClassFilter::VEHICLES).unwrap();
        let targets = build_waypoint_targets(&scenario, &spec, ClassFilter::VEHICLES).unwrap();
        let cv = constant_velocity_predict(&input, &scenario).unwrap();
        let report = evaluate(&cv, &targets, input.current_occ(), &metrics).unwrap();
        for w in &report.per_waypoint {
            worst_cv_epe = worst_cv_epe.max(w.epe);
            min_obs = min_obs.min(w.observed_auc);
            min_fg = min_fg.min(w.flow_grounded_auc);
        }
        let pers = evaluate(&persistence_predict(&input), &targets, input.current_occ(), &metrics).unwrap();
        for (k, w) in pers.per_waypoint.iter().enumerate() {
            let mags: Vec<f64> = targets.flow[k]
                .as_grid()
                .data()
                .chunks(2)
                .filter(|v| v[0] != 0.0 || v[1] != 0.0)
                .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
                .collect();
            let mean = if mags.is_empty() {
                0.0
            } else {
                mags.iter().sum::<f64>() / mags.len() as f64
            };
            worst_pers = worst_pers.max((w.epe - mean).abs());
        }
    }
    outcome(
        worst_cv_epe < 0.1 && min_obs > 0.99 && min_fg > 0.99 && worst_pers <= 1e-9,
        format!(
            "16 linear scenes: CV worst waypoint EPE {worst_cv_epe:.4}, min observed AUC {min_obs:.4}, min flow-grounded AUC {min_fg:.4}; persistence max |EPE - mean GT flow| = {worst_pers:.1e}"
        ),
    )
}

fn wl_direction() -> Outcome {
    let (train_set, eval_set) = ablation_sets(0).unwrap();
    let report = wl_ablation(&TrainConfig::demo(0, ScheduleKind::Linear), &train_set, &eval_set).unwrap();
    let (u, l) = (report.uniform_epe[7], report.linear_epe[7]);
    outcome(
        l <= u && report.weighted_not_worse,
        format!(
            "waypoint-8 EPE linear {l:.4} vs uniform {u:.4} on {} held-out scenes (reference {:.4} vs {:.4})",
            report.eval_scenes, report.reference_epe.0, report.reference_epe.1
        ),
    )
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn block_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AttentionConfig {
        num_heads: 3,
        model_dim: 24,
        window_size: 8,
        shift: 0,
    };
    let q = Tensor::random(vec![64, 24], 4.0, &mut rng);
    let k = Tensor::random(vec![64, 24], 4.0, &mut rng);
    let bias = Tensor::random(vec![3, 64, 64], 8.0, &mut rng);
    let probs = attention_probs(&q, &k, Some(&bias), &cfg).unwrap();
    let row_err = probs
        .data()
        .chunks(64)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let x = Tensor::random(vec![16, 24, 5], 1.0, &mut rng);
    let part_ok = same_bits(
        window_reverse(&window_partition(&x, 8).unwrap(), 8, 16, 24)
            .unwrap()
            .data(),
        x.data(),
    );
    let shift_ok = (0..=24).all(|s| {
        same_bits(
            cyclic_unshift(&cyclic_shift(&x, s).unwrap(), s).unwrap().data(),
            x.data(),
        )
    });

    let layer = AttentionLayer::new(cfg, 11).unwrap();
    let tokens = Tensor::random(vec![20, 24], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..20).collect();
    perm.reverse();
    perm.swap(3, 11);
    let a = layer
        .forward(&tokens, &tokens, None)
        .unwrap()
        .permute_rows(&perm)
        .unwrap();
    let pt = tokens.permute_rows(&perm).unwrap();
    let b = layer.forward(&pt, &pt, None).unwrap();
    let equiv = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let image = Tensor::random(vec![256, 256, 2], 1.0, &mut rng);
    let kernel = Tensor::random(vec![4, 4, 2, 24], 0.3, &mut rng);
    let emb = patch_embed(&image, &kernel).unwrap();

    let selftest = run_selftest(0).unwrap();
    let selftest_ok = selftest.iter().all(|c| c.passed);
    outcome(
        row_err <= 1e-6 && part_ok && shift_ok && equiv <= 1e-6 && emb.shape() == [64, 64, 24] && selftest_ok,
        format!(
            "max |row sum - 1| {row_err:.1e}, partition round trip {}, shift round trip {}, equivariance deviation {equiv:.1e}, patch_embed 256x256 -> {:?}, self-test {}/{} checks",
            if part_ok { "exact" } else { "broken" },
            if shift_ok { "exact" } else { "broken" },
            emb.shape(),
            selftest.iter().filter(|c| c.passed).count(),
            selftest.len()
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let scenes: Vec<Scenario> = (0..10)
        .map(|i| make_synthetic_scenario_with(i, SyntheticKind::ALL[i as usize % 4], &SyntheticConfig::default()))
        .collect();
    let scene_dir = root.path().join("scenes");
    std::fs::create_dir_all(&scene_dir).unwrap();
    for s in &scenes {
        std::fs::write(scene_dir.join(format!("{}.json", s.id)), scenario_to_json(s)).unwrap();
    }
    let pred_dir = root.path().join("preds");
    predict_dataset(
        &scenes,
        BaselineKind::ConstantVelocity,
        None,
        ClassFilter::VEHICLES,
        &pred_dir,
        4,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for parallelism in [1, 8] {
        let out = root.path().join(format!("out{parallelism}"));
        let cfg = RunConfig {
            parallelism,
            out_dir: Some(out.clone()),
            ..RunConfig::new(&scene_dir, &pred_dir)
        };
        let summary = run_eval(&cfg).unwrap();
        write_summary(&out, &summary).unwrap();
        outputs.push(std::fs::read(out.join(SUMMARY_JSON)).unwrap());
    }
    let eval_same = outputs[0] == outputs[1];

    let data = demo_train_set(0).unwrap();
    let cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::demo(0, ScheduleKind::Linear)
    };
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    let curve = |o: &ofp_core::TrainOutcome| o.curve.iter().map(|v| v.total).collect::<Vec<f64>>();
    let train_same = same_bits(&curve(&a), &curve(&b)) && same_bits(&a.model.params, &b.model.params);
    outcome(
        eval_same && train_same,
        format!(
            "run_eval JSON at parallelism 1 vs 8: {} ({} bytes); 40-step training reruns: {}",
            if eval_same { "byte-identical" } else { "different" },
            outputs[0].len(),
            if train_same {
                "identical curves and parameters"
            } else {
                "different"
            }
        ),
    )
}

fn grounding_property() -> Outcome {
    let scenario = moving_box_scenario();
    let spec = GridSpec::default();
    let input = assemble_input(&scenario, &spec, ClassFilter::VEHICLES).unwrap();
    let targets = build_waypoint_targets(&scenario, &spec, ClassFilter::VEHICLES).unwrap();
    let logits = |occ: &OccupancyGrid| -> Grid {
        occ.as_grid()
            .map(|v| if v == 1.0 { CERTAIN_LOGIT } else { -CERTAIN_LOGIT })
    };
    let pred = PredictionSet {
        observed_logits: targets.observed_occ.iter().map(logits).collect(),
        occluded_logits: targets.occluded_occ.iter().map(logits).collect(),
        flow: vec![FlowField::zeros(spec); 8],
    };
    let report = evaluate(&pred, &targets, input.current_occ(), &MetricsConfig::default()).unwrap();
    let all_lower = report.per_waypoint.iter().all(|w| w.flow_grounded_auc < w.observed_auc);
    outcome(
        all_lower && report.mean.flow_grounded_auc < report.mean.observed_auc,
        format!(
            "mean flow-grounded AUC {:.4} vs observed AUC {:.4}; lower at every waypoint: {all_lower}",
            report.mean.flow_grounded_auc, report.mean.observed_auc
        ),
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let results = [
        run(1, "warp identity", secs(1), warp_identity),
        run(2, "ground-truth flow", secs(5), ground_truth_flow),
        run(3, "metric oracles", secs(10), metric_oracles),
        run(4, "gradient checks", secs(60), gradient_checks),
        run(5, "baseline anchors", secs(30), baseline_anchors),
        run(6, "time-weighted loss direction", secs(600), wl_direction),
        run(7, "neural-block invariants", secs(10), block_invariants),
        run(8, "determinism", secs(120), determinism),
        run(9, "flow-grounded metric needs flow", secs(5), grounding_property),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
