//! Dataset-level evaluation with a fixed-size worker pool and an ordered,
//! deterministic merge.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{predict, BaselineKind};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::io::{load_prediction, load_scenarios, save_prediction, scenario_dir_name};
use crate::losses::PredictionSet;
use crate::metrics::{aggregate, evaluate, MetricValues, MetricsConfig, MetricsReport};
use crate::scene::{assemble_input, build_waypoint_targets, ClassFilter, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Scenario file (`.json`, `.jsonl`) or directory of them.
    pub scenarios: PathBuf,
    /// Directory holding one prediction sub-directory per scenario id.
    pub predictions: PathBuf,
    /// Overrides every scenario's own grid.
    pub grid: Option<GridSpec>,
    pub metrics: MetricsConfig,
    pub classes: ClassFilter,
    pub parallelism: usize,
    pub strict: bool,
    /// Where `summary.json` and `summary.txt` go, if anywhere.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(scenarios: impl Into<PathBuf>, predictions: impl Into<PathBuf>) -> Self {
        Self {
            scenarios: scenarios.into(),
            predictions: predictions.into(),
            grid: None,
            metrics: MetricsConfig::default(),
            classes: ClassFilter::VEHICLES,
            parallelism: 1,
            strict: true,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        for p in [&self.scenarios, &self.predictions] {
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist"),
                ));
            }
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub id: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub scenario_count: usize,
    pub aggregate: MetricsReport,
    pub scenarios: Vec<ScenarioEntry>,
    /// Wall-clock time; kept out of the JSON so reruns compare equal.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl DatasetSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summaries serialize") + "\n"
    }

    pub fn render_text(&self) -> String {
        let mut out = self.aggregate.render_text();
        out.push_str(&format!("\nPer-scenario means ({} scenarios)\n", self.scenario_count));
        out.push_str(&format!("{:<32}", "scenario"));
        for label in MetricValues::LABELS {
            out.push_str(&format!(" {label:>14}"));
        }
        out.push('\n');
        for entry in &self.scenarios {
            out.push_str(&format!("{:<32}", entry.id));
            for v in entry.report.mean.to_array() {
                out.push_str(&format!(" {v:>14.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {parallelism} workers: {e}")))
}

fn ensure_unique_ids(scenarios: &[Scenario]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in scenarios {
        if !seen.insert(scenario_dir_name(&s.id)) {
            return Err(Error::MalformedScenario(format!("duplicate scenario id '{}'", s.id)));
        }
    }
    Ok(())
}

/// Scores already-loaded predictions, one per scenario in the same order.
pub fn evaluate_dataset(
    scenarios: &[Scenario],
    predictions: &[PredictionSet],
    grid: Option<GridSpec>,
    classes: ClassFilter,
    metrics: &MetricsConfig,
    parallelism: usize,
) -> Result<DatasetSummary> {
    let start = Instant::now();
    if scenarios.is_empty() {
        return Err(Error::Config("no scenarios to evaluate".into()));
    }
    if scenarios.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scenarios but {} predictions",
            scenarios.len(),
            predictions.len()
        )));
    }
    let entries: Vec<ScenarioEntry> = pool(parallelism)?.install(|| {
        scenarios
            .par_iter()
            .zip(predictions)
            .map(|(s, p)| {
                let spec = grid.unwrap_or_else(|| s.grid_spec());
                let input = assemble_input(s, &spec, classes)?;
                let targets = build_waypoint_targets(s, &spec, classes)?;
                let report = evaluate(p, &targets, input.current_occ(), metrics)?;
                Ok(ScenarioEntry {
                    id: s.id.clone(),
                    report,
                })
            })
            .collect::<Result<_>>()
    })?;
    let reports: Vec<MetricsReport> = entries.iter().map(|e| e.report.clone()).collect();
    Ok(DatasetSummary {
        scenario_count: entries.len(),
        aggregate: aggregate(&reports)?,
        scenarios: entries,
        elapsed: start.elapsed(),
    })
}

/// Loads scenarios and their predictions, scores them, and writes the
/// reports when an output directory is configured.
pub fn run_eval(config: &RunConfig) -> Result<DatasetSummary> {
    config.validate()?;
    let start = Instant::now();
    let scenarios = load_scenarios(&config.scenarios, config.strict)?;
    ensure_unique_ids(&scenarios)?;
    let dirs: Vec<PathBuf> = scenarios
        .iter()
        .map(|s| config.predictions.join(scenario_dir_name(&s.id)))
        .collect();
    let missing: Vec<String> = scenarios
        .iter()
        .zip(&dirs)
        .filter(|(_, d)| !d.is_dir())
        .map(|(s, _)| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrediction(missing));
    }
    let predictions: Vec<PredictionSet> =
        pool(config.parallelism)?.install(|| dirs.par_iter().map(|d| load_prediction(d)).collect::<Result<_>>())?;
    let mut summary = evaluate_dataset(
        &scenarios,
        &predictions,
        config.grid,
        config.classes,
        &config.metrics,
        config.parallelism,
    )?;
    summary.elapsed = start.elapsed();
    if let Some(dir) = &config.out_dir {
        write_summary(dir, &summary)?;
    }
    Ok(summary)
}

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TEXT: &str = "summary.txt";

pub fn write_summary(dir: &Path, summary: &DatasetSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(SUMMARY_JSON);
    std::fs::write(&json, summary.to_json()).map_err(|e| Error::io(json, e))?;
    let text = dir.join(SUMMARY_TEXT);
    std::fs::write(&text, summary.render_text()).map_err(|e| Error::io(text, e))
}

/// Runs a baseline on every scenario and writes one prediction directory
/// per scenario id under `out_dir`. Returns the written directories in
/// scenario order.
pub fn predict_dataset(
    scenarios: &[Scenario],
    kind: BaselineKind,
    grid: Option<GridSpec>,
    classes: ClassFilter,
    out_dir: &Path,
    parallelism: usize,
) -> Result<Vec<PathBuf>> {
    ensure_unique_ids(scenarios)?;
    pool(parallelism)?.install(|| {
        scenarios
            .par_iter()
            .map(|s| {
                let spec = grid.unwrap_or_else(|| s.grid_spec());
                let input = assemble_input(s, &spec, classes)?;
                let pred = predict(kind, &input, s)?;
                let dir = out_dir.join(scenario_dir_name(&s.id));
                save_prediction(&dir, &pred)?;
                Ok(dir)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::scenario_to_json;
    use crate::scene::synthetic::{make_synthetic_scenario_with, SyntheticConfig, SyntheticKind};

    fn small_scenes(n: u64) -> Vec<Scenario> {
        let cfg = SyntheticConfig {
            grid: Some(GridSpec::new(48, 48, 0.625).unwrap()),
            ..SyntheticConfig::default()
        };
        (0..n)
            .map(|i| make_synthetic_scenario_with(i, SyntheticKind::ALL[i as usize % 4], &cfg))
            .collect()
    }

    fn write_scenes(dir: &Path, scenes: &[Scenario]) {
        std::fs::create_dir_all(dir).unwrap();
        for s in scenes {
            std::fs::write(dir.join(format!("{}.json", s.id)), scenario_to_json(s)).unwrap();
        }
    }

    #[test]
    fn aggregate_is_mean_of_scenarios() {
        let scenes = small_scenes(4);
        let preds: Vec<PredictionSet> = scenes
            .iter()
            .map(|s| {
                let input = assemble_input(s, &s.grid_spec(), ClassFilter::VEHICLES).unwrap();
                crate::baselines::persistence_predict(&input)
            })
            .collect();
        let summary = evaluate_dataset(
            &scenes,
            &preds,
            None,
            ClassFilter::VEHICLES,
            &MetricsConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(summary.scenario_count, 4);
        let epe: f64 = summary.scenarios.iter().map(|e| e.report.mean.epe).sum::<f64>() / 4.0;
        assert!((summary.aggregate.mean.epe - epe).abs() < 1e-12);
        assert!(!summary.to_json().contains("elapsed"));
    }

    #[test]
    fn run_eval_end_to_end_and_missing_predictions() {
        let root = tempfile::tempdir().unwrap();
        let scenes = small_scenes(3);
        write_scenes(&root.path().join("scenes"), &scenes);
        predict_dataset(
            &scenes[..2],
            BaselineKind::ConstantVelocity,
            None,
            ClassFilter::VEHICLES,
            &root.path().join("preds"),
            1,
        )
        .unwrap();
        let mut cfg = RunConfig::new(root.path().join("scenes"), root.path().join("preds"));
        match run_eval(&cfg).unwrap_err() {
            Error::MissingPrediction(ids) => assert_eq!(ids, vec![scenes[2].id.clone()]),
            other => panic!("unexpected {other}"),
        }
        predict_dataset(
            &scenes[2..],
            BaselineKind::ConstantVelocity,
            None,
            ClassFilter::VEHICLES,
            &root.path().join("preds"),
            1,
        )
        .unwrap();
        cfg.out_dir = Some(root.path().join("out"));
        let summary = run_eval(&cfg).unwrap();
        assert_eq!(summary.scenario_count, 3);
        let written = std::fs::read_to_string(root.path().join("out").join(SUMMARY_JSON)).unwrap();
        assert_eq!(written, summary.to_json());
        let back: DatasetSummary = serde_json::from_str(&written).unwrap();
        assert_eq!(back.aggregate, summary.aggregate);
    }

    #[test]
    fn empty_directory_and_bad_parallelism_fail() {
        let root = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(root.path().join("s")).unwrap();
        let cfg = RunConfig::new(root.path().join("s"), root.path());
        assert!(run_eval(&cfg).is_err());
        let cfg = RunConfig { parallelism: 0, ..cfg };
        assert!(matches!(run_eval(&cfg), Err(Error::Config(_))));
        let missing = RunConfig::new(root.path().join("nope"), root.path());
        assert!(run_eval(&missing).unwrap_err().is_io());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut scenes = small_scenes(2);
        scenes[1].id = scenes[0].id.clone();
        assert!(matches!(ensure_unique_ids(&scenes), Err(Error::MalformedScenario(_))));
    }
}
