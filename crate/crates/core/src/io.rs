//! Scenario JSON, configuration files and on-disk prediction sets.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{load_grids, save_grids};
use crate::grid::{FlowField, Grid, GridSpec, OccupancyGrid};
use crate::losses::{LossWeights, PredictionSet, ScheduleKind};
use crate::metrics::MetricsConfig;
use crate::scene::{Scenario, WaypointTargets, DEFAULT_MAX_AGENTS};

/// Parses one scenario. In strict mode any field the schema does not know
/// is an error; otherwise such fields are ignored. The result is validated
/// (sampling rate, 91 states per agent, finite values).
pub fn parse_scenario(bytes: &[u8], strict: bool) -> Result<Scenario> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1,
        column: 1,
        path: ".".into(),
        message: format!("input is not UTF-8: {e}"),
    })?;
    let scenario: Scenario = parse_json(text, strict)?;
    scenario.validate(DEFAULT_MAX_AGENTS)?;
    Ok(scenario)
}

/// One scenario per non-blank line.
pub fn parse_scenarios_jsonl(text: &str, strict: bool) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let scenario = parse_scenario(line.as_bytes(), strict).map_err(|e| match e {
            Error::Parse {
                column, path, message, ..
            } => Error::Parse {
                line: i + 1,
                column,
                path,
                message,
            },
            other => other,
        })?;
        out.push(scenario);
    }
    Ok(out)
}

/// Deserializes JSON with field-path error reporting; `strict` turns
/// unknown fields into errors.
pub fn parse_json<T: DeserializeOwned>(text: &str, strict: bool) -> Result<T> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value = {
        let mut record = |path: serde_ignored::Path<'_>| unknown.push(field_path(&path));
        let ignoring = serde_ignored::Deserializer::new(&mut de, &mut record);
        serde_path_to_error::deserialize(ignoring)
    };
    let value: T = value.map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        path: ".".into(),
        message: e.to_string(),
    })?;
    if strict {
        if let Some((path, key)) = unknown.first() {
            let (line, column) = locate_key(text, key);
            return Err(Error::Parse {
                line,
                column,
                path: path.clone(),
                message: format!("unknown field `{key}`"),
            });
        }
    }
    Ok(value)
}

/// Renders an ignored-field path the way field errors are reported
/// (`agents[0].states[3].speed`), together with the final key.
fn field_path(path: &serde_ignored::Path<'_>) -> (String, String) {
    use serde_ignored::Path;
    fn render(path: &Path<'_>, out: &mut String) {
        match path {
            Path::Root => {}
            Path::Seq { parent, index } => {
                render(parent, out);
                out.push_str(&format!("[{index}]"));
            }
            Path::Map { parent, key } => {
                render(parent, out);
                if !out.is_empty() {
                    out.push('.');
                }
                out.push_str(key);
            }
            Path::Some { parent } | Path::NewtypeStruct { parent } | Path::NewtypeVariant { parent } => {
                render(parent, out)
            }
        }
    }
    let mut out = String::new();
    render(path, &mut out);
    let key = match path {
        Path::Map { key, .. } => key.clone(),
        _ => out.clone(),
    };
    (out, key)
}

/// 1-based position of the first `"key":` in `text`, or (1, 1).
fn locate_key(text: &str, key: &str) -> (usize, usize) {
    let needle = format!("\"{key}\"");
    let mut from = 0;
    while let Some(rel) = text[from..].find(&needle) {
        let at = from + rel;
        let after = text[at + needle.len()..].trim_start();
        if after.starts_with(':') {
            let before = &text[..at];
            let line = before.matches('\n').count() + 1;
            let column = at - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            return (line, column);
        }
        from = at + needle.len();
    }
    (1, 1)
}

pub fn scenario_to_json(scenario: &Scenario) -> String {
    serde_json::to_string_pretty(scenario).expect("scenarios serialize") + "\n"
}

/// Reads a `.json` file (one scenario), a `.jsonl` file, or every such
/// file in a directory in file-name order.
pub fn load_scenarios(path: &Path, strict: bool) -> Result<Vec<Scenario>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let files = scenario_files(path)?;
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no .json or .jsonl scenarios in {}",
                path.display()
            )));
        }
        let mut out = Vec::new();
        for f in files {
            out.extend(load_scenario_file(&f, strict)?);
        }
        Ok(out)
    } else {
        load_scenario_file(path, strict)
    }
}

fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(extension(p).as_deref(), Some("json" | "jsonl")))
        .collect();
    files.sort();
    Ok(files)
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

fn load_scenario_file(path: &Path, strict: bool) -> Result<Vec<Scenario>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let with_file = |e: Error| match e {
        Error::Parse {
            line,
            column,
            path: field,
            message,
        } => Error::Parse {
            line,
            column,
            path: field,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    };
    if extension(path).as_deref() == Some("jsonl") {
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            line: 1,
            column: 1,
            path: ".".into(),
            message: format!("{}: not UTF-8: {e}", path.display()),
        })?;
        parse_scenarios_jsonl(&text, strict).map_err(with_file)
    } else {
        parse_scenario(&bytes, strict).map(|s| vec![s]).map_err(with_file)
    }
}

/// `[loss]` section of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_o: f64,
    pub lambda_f: f64,
    pub lambda_w: f64,
    pub schedule: ScheduleKind,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_o: w.lambda_o,
            lambda_f: w.lambda_f,
            lambda_w: w.lambda_w,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_o, self.lambda_f, self.lambda_w)
    }
}

/// Optional configuration file; every field mirrors a command-line flag,
/// and flags given explicitly take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub grid: Option<GridSpec>,
    pub loss: LossSection,
    pub metrics: MetricsConfig,
    pub parallelism: Option<usize>,
    pub strict: Option<bool>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        self.loss.weights()?;
        crate::losses::make_schedule(&self.loss.schedule, crate::scene::NUM_WAYPOINTS)?;
        crate::metrics::ThresholdGrid::new(self.metrics.thresholds)?;
        if self.parallelism == Some(0) {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loads TOML (`.toml`) or JSON (anything else) configuration.
pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = if extension(path).as_deref() == Some("toml") {
        parse_toml_config(&text)?
    } else {
        parse_json(&text, true)?
    };
    config.validate()?;
    Ok(config)
}

pub fn parse_toml_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                (line, s.start - before.rfind('\n').map_or(0, |p| p + 1) + 1)
            })
            .unwrap_or((1, 1));
        Error::Parse {
            line,
            column,
            path: ".".into(),
            message: e.message().to_string(),
        }
    })
}

pub const OBSERVED_FILE: &str = "observed.ofgr";
pub const OCCLUDED_FILE: &str = "occluded.ofgr";
pub const FLOW_FILE: &str = "flow.ofgr";

/// Writes a prediction set as three OFGR tensors: observed logits,
/// occluded logits and flow, each with one time slice per waypoint.
pub fn save_prediction(dir: &Path, pred: &PredictionSet) -> Result<()> {
    pred.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_grids(
        &dir.join(OBSERVED_FILE),
        &pred.observed_logits.iter().collect::<Vec<_>>(),
    )?;
    save_grids(
        &dir.join(OCCLUDED_FILE),
        &pred.occluded_logits.iter().collect::<Vec<_>>(),
    )?;
    save_grids(
        &dir.join(FLOW_FILE),
        &pred.flow.iter().map(FlowField::as_grid).collect::<Vec<_>>(),
    )
}

pub fn load_prediction(dir: &Path) -> Result<PredictionSet> {
    let observed_logits = load_grids(&dir.join(OBSERVED_FILE))?;
    let occluded_logits = load_grids(&dir.join(OCCLUDED_FILE))?;
    let flow = load_grids(&dir.join(FLOW_FILE))?
        .into_iter()
        .map(FlowField::from_grid)
        .collect::<Result<_>>()?;
    let pred = PredictionSet {
        observed_logits,
        occluded_logits,
        flow,
    };
    pred.validate()?;
    Ok(pred)
}

/// Ground truth in the same three-file layout, with occupancy in place of
/// logits.
pub fn save_targets(dir: &Path, targets: &WaypointTargets) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fn occ(v: &[OccupancyGrid]) -> Vec<&Grid> {
        v.iter().map(OccupancyGrid::as_grid).collect()
    }
    save_grids(&dir.join(OBSERVED_FILE), &occ(&targets.observed_occ))?;
    save_grids(&dir.join(OCCLUDED_FILE), &occ(&targets.occluded_occ))?;
    save_grids(
        &dir.join(FLOW_FILE),
        &targets.flow.iter().map(FlowField::as_grid).collect::<Vec<_>>(),
    )
}

pub fn load_targets(dir: &Path) -> Result<WaypointTargets> {
    let occ = |name: &str| -> Result<Vec<OccupancyGrid>> {
        load_grids(&dir.join(name))?
            .into_iter()
            .map(OccupancyGrid::from_grid)
            .collect()
    };
    Ok(WaypointTargets {
        observed_occ: occ(OBSERVED_FILE)?,
        occluded_occ: occ(OCCLUDED_FILE)?,
        flow: load_grids(&dir.join(FLOW_FILE))?
            .into_iter()
            .map(FlowField::from_grid)
            .collect::<Result<_>>()?,
    })
}

/// File-system safe directory name for a scenario id.
pub fn scenario_dir_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scenario, SyntheticKind};

    fn one_agent_json(states: usize, freq: f64) -> String {
        let state = r#"{"x": 1.0, "y": 2.0, "vx": 0.5, "vy": 0.0, "heading": 0.0, "valid": true}"#;
        let states = vec![state; states].join(", ");
        format!(
            r#"{{"id": "s1", "freq_hz": {freq}, "agents": [{{"id": 7, "class": "vehicle", "length_m": 4.5, "width_m": 2.0, "states": [{states}]}}]}}"#
        )
    }

    #[test]
    fn minimal_scenario_parses() {
        let s = parse_scenario(one_agent_json(91, 10.0).as_bytes(), true).unwrap();
        assert_eq!(s.agents.len(), 1);
        assert_eq!(s.agents[0].states.len(), 91);
        assert_eq!(s.id, "s1");
    }

    #[test]
    fn wrong_state_count_is_malformed() {
        let e = parse_scenario(one_agent_json(90, 10.0).as_bytes(), true).unwrap_err();
        assert!(matches!(e, Error::MalformedScenario(_)), "{e}");
    }

    #[test]
    fn wrong_frequency_is_rejected() {
        let e = parse_scenario(one_agent_json(91, 20.0).as_bytes(), true).unwrap_err();
        assert!(matches!(e, Error::Freq(f) if f == 20.0), "{e}");
    }

    #[test]
    fn unknown_fields_depend_on_strictness() {
        let text = one_agent_json(91, 10.0).replacen("\"vx\"", "\"speed\": 3, \"vx\"", 1);
        assert!(parse_scenario(text.as_bytes(), false).is_ok());
        match parse_scenario(text.as_bytes(), true).unwrap_err() {
            Error::Parse {
                path,
                message,
                line,
                column,
            } => {
                assert_eq!(path, "agents[0].states[0].speed");
                assert!(message.contains("speed"));
                assert_eq!(line, 1);
                assert!(column > 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn type_errors_carry_path_and_position() {
        let text = one_agent_json(91, 10.0).replacen("\"x\": 1.0", "\"x\": \"one\"", 1);
        match parse_scenario(text.as_bytes(), false).unwrap_err() {
            Error::Parse { path, line, .. } => {
                assert_eq!(path, "agents[0].states[0].x");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_scenario(b"{", true), Err(Error::Parse { .. })));
        assert!(matches!(parse_scenario(&[0xff, 0xfe], true), Err(Error::Parse { .. })));
    }

    #[test]
    fn json_round_trip_and_jsonl() {
        let scenes: Vec<Scenario> = (0..3)
            .map(|i| make_synthetic_scenario(i, SyntheticKind::Turning))
            .collect();
        for s in &scenes {
            assert_eq!(&parse_scenario(scenario_to_json(s).as_bytes(), true).unwrap(), s);
        }
        let jsonl: String = scenes
            .iter()
            .map(|s| serde_json::to_string(s).unwrap() + "\n\n")
            .collect();
        assert_eq!(parse_scenarios_jsonl(&jsonl, true).unwrap(), scenes);
        let broken = format!("{}\n{{\"id\": 3}}\n", serde_json::to_string(&scenes[0]).unwrap());
        match parse_scenarios_jsonl(&broken, true).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn directory_loading_is_sorted_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_scenarios(dir.path(), true).is_err());
        for (name, seed) in [("b.json", 1), ("a.json", 0)] {
            let s = make_synthetic_scenario(seed, SyntheticKind::Linear);
            std::fs::write(dir.path().join(name), scenario_to_json(&s)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let loaded = load_scenarios(dir.path(), true).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0], make_synthetic_scenario(0, SyntheticKind::Linear));
    }

    #[test]
    fn config_toml_and_json_agree() {
        let toml_text = "parallelism = 4\n[loss]\nlambda_f = 2.0\nschedule = \"uniform\"\n[metrics]\nthresholds = 50\niou_variant = \"union\"\n";
        let from_toml = parse_toml_config(toml_text).unwrap();
        let json_text = r#"{"parallelism": 4, "loss": {"lambda_f": 2.0, "schedule": "uniform"}, "metrics": {"thresholds": 50, "iou_variant": "union"}}"#;
        let from_json: FileConfig = parse_json(json_text, true).unwrap();
        assert_eq!(from_toml, from_json);
        assert_eq!(from_toml.loss.lambda_o, 1.0);
        assert_eq!(from_toml.metrics.iou_variant, crate::metrics::IouVariant::Union);
        assert!(parse_toml_config("[loss]\nlambda_x = 1.0\n").is_err());
        let bad = FileConfig {
            parallelism: Some(0),
            ..FileConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prediction_and_target_directories_round_trip() {
        let s = make_synthetic_scenario(2, SyntheticKind::Linear);
        let spec = GridSpec::new(16, 16, 1.0).unwrap();
        let targets = crate::scene::build_waypoint_targets(&s, &spec, crate::scene::ClassFilter::VEHICLES).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_targets(dir.path(), &targets).unwrap();
        let stored = WaypointTargets {
            flow: targets
                .flow
                .iter()
                .map(|f| FlowField::from_grid(f.as_grid().map(|v| v as f32 as f64)).unwrap())
                .collect(),
            ..targets.clone()
        };
        assert_eq!(load_targets(dir.path()).unwrap(), stored);

        let input = crate::scene::assemble_input(&s, &spec, crate::scene::ClassFilter::VEHICLES).unwrap();
        let pred = crate::baselines::persistence_predict(&input);
        save_prediction(&dir.path().join("p"), &pred).unwrap();
        assert_eq!(load_prediction(&dir.path().join("p")).unwrap(), pred);
    }

    #[test]
    fn dir_names_are_sanitized() {
        assert_eq!(scenario_dir_name("a/b c:1"), "a_b_c_1");
        assert_eq!(scenario_dir_name("scene-01.x"), "scene-01.x");
    }
}
