use std::fmt;
use std::path::{Path, PathBuf};

use ofp_core::dataset::SUMMARY_JSON;
use ofp_core::format::save_grids;
use ofp_core::io::{parse_json, save_targets, scenario_dir_name, scenario_to_json};
use ofp_core::scene::{make_synthetic_scenario_with, SyntheticConfig};
use ofp_core::trainer::{self, ablation_sets, demo_train_set, save_model};
use ofp_core::{
    assemble_input, build_waypoint_targets, load_config, load_scenarios, predict_dataset, run_eval, run_gradcheck,
    ClassFilter, DatasetSummary, Error, FileConfig, FlowField, GridSpec, MetricsReport, OccupancyGrid, RunConfig,
    Scenario, TrainConfig,
};

use crate::{
    AblationArgs, EvalArgs, GridArgs, PredictArgs, ReportArgs, SceneArgs, SceneIo, SeedArg, SynthArgs, TrainArgs,
};

pub const HISTORY_OCC_FILE: &str = "history_occupancy.ofgr";
pub const HISTORY_FLOW_FILE: &str = "history_flow.ofgr";
pub const MAP_FILE: &str = "map.ofgr";

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl Failure {
    /// 2 for filesystem failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Check(msg) => f.write_str(msg),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let config = match path {
        Some(p) => load_config(p)?,
        None => FileConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

impl GridArgs {
    fn is_empty(&self) -> bool {
        self.height.is_none() && self.width.is_none() && self.cell_size.is_none()
    }

    /// Grid override from flags layered over the config file's grid. `None`
    /// leaves each scenario on its own grid.
    fn resolve(&self, base: Option<GridSpec>) -> Result<Option<GridSpec>, Failure> {
        if self.is_empty() {
            return Ok(base);
        }
        let mut spec = base.unwrap_or_default();
        if let Some(h) = self.height {
            spec.height_cells = h;
        }
        if let Some(w) = self.width {
            spec.width_cells = w;
        }
        if let Some(c) = self.cell_size {
            spec.cell_size_m = c;
        }
        spec.validate()?;
        Ok(Some(spec))
    }
}

struct SceneSetup {
    scenarios: Vec<Scenario>,
    grid: Option<GridSpec>,
    classes: ClassFilter,
}

impl SceneArgs {
    fn strict(&self, config: &FileConfig) -> bool {
        !self.lenient && config.strict.unwrap_or(true)
    }

    fn load(&self, config: &FileConfig, path: &Path) -> Result<SceneSetup, Failure> {
        Ok(SceneSetup {
            scenarios: load_scenarios(path, self.strict(config))?,
            grid: self.grid.resolve(config.grid)?,
            classes: ClassFilter::from_classes(&self.classes),
        })
    }
}

fn seed(flag: Option<u64>, config: &FileConfig) -> u64 {
    flag.or(config.seed).unwrap_or(0)
}

fn parallelism(flag: Option<usize>, config: &FileConfig) -> usize {
    flag.or(config.parallelism).unwrap_or(1)
}

/// Output directory per scenario: `out` itself for a single scenario,
/// otherwise one sub-directory per id.
fn scenario_dirs(scenarios: &[Scenario], out: &Path) -> Vec<PathBuf> {
    if scenarios.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        scenarios.iter().map(|s| out.join(scenario_dir_name(&s.id))).collect()
    }
}

pub fn rasterize(config: &FileConfig, args: &SceneIo) -> CliResult {
    let setup = args.scene.load(config, &args.scenarios)?;
    for (scenario, dir) in setup.scenarios.iter().zip(scenario_dirs(&setup.scenarios, &args.out)) {
        let spec = setup.grid.unwrap_or_else(|| scenario.grid_spec());
        let input = assemble_input(scenario, &spec, setup.classes)?;
        create_dir(&dir)?;
        save_grids(
            &dir.join(HISTORY_OCC_FILE),
            &input.history_occ.iter().map(OccupancyGrid::as_grid).collect::<Vec<_>>(),
        )?;
        save_grids(&dir.join(MAP_FILE), &[&input.map_raster])?;
        save_grids(
            &dir.join(HISTORY_FLOW_FILE),
            &input.history_flow.iter().map(FlowField::as_grid).collect::<Vec<_>>(),
        )?;
        println!(
            "{}: {} occupancy frames, {} map channels, {} flow frames -> {}",
            scenario.id,
            input.history_occ.len(),
            input.map_raster.channels(),
            input.history_flow.len(),
            dir.display()
        );
    }
    Ok(())
}

pub fn ground_truth(config: &FileConfig, args: &SceneIo) -> CliResult {
    let setup = args.scene.load(config, &args.scenarios)?;
    for (scenario, dir) in setup.scenarios.iter().zip(scenario_dirs(&setup.scenarios, &args.out)) {
        let spec = setup.grid.unwrap_or_else(|| scenario.grid_spec());
        let targets = build_waypoint_targets(scenario, &spec, setup.classes)?;
        save_targets(&dir, &targets)?;
        println!(
            "{}: {} waypoints on a {}x{} grid -> {}",
            scenario.id,
            targets.num_waypoints(),
            spec.height_cells,
            spec.width_cells,
            dir.display()
        );
    }
    Ok(())
}

pub fn predict(config: &FileConfig, args: &PredictArgs) -> CliResult {
    let setup = args.scene.load(config, &args.scenarios)?;
    let dirs = predict_dataset(
        &setup.scenarios,
        args.baseline,
        setup.grid,
        setup.classes,
        &args.out,
        parallelism(args.parallelism, config),
    )?;
    println!(
        "{} baseline: wrote {} prediction sets under {}",
        args.baseline,
        dirs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(config: &FileConfig, args: &EvalArgs) -> CliResult {
    let mut metrics = config.metrics;
    if let Some(t) = args.thresholds {
        metrics.thresholds = t;
    }
    if let Some(v) = args.iou_variant {
        metrics.iou_variant = v;
    }
    let run = RunConfig {
        grid: args.scene.grid.resolve(config.grid)?,
        metrics,
        classes: ClassFilter::from_classes(&args.scene.classes),
        parallelism: parallelism(args.parallelism, config),
        strict: args.scene.strict(config),
        out_dir: args.out.clone(),
        ..RunConfig::new(&args.scenarios, &args.predictions)
    };
    let summary = run_eval(&run)?;
    if args.json {
        print!("{}", summary.to_json());
    } else {
        print!("{}", summary.render_text());
        eprintln!(
            "evaluated {} scenarios in {:.2?}",
            summary.scenario_count, summary.elapsed
        );
    }
    Ok(())
}

pub fn gradcheck(config: &FileConfig, args: &SeedArg) -> CliResult {
    let seed = seed(args.seed, config);
    let checks = run_gradcheck(seed)?;
    println!("gradient checks, seed {seed}");
    for c in &checks {
        println!("{}", c.render());
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn blocks_selftest(config: &FileConfig, args: &SeedArg) -> CliResult {
    let results = ofp_core::blocks::run_selftest(seed(args.seed, config))?;
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{}/{} block checks passed", results.len() - failed, results.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Check(format!("{failed} block check(s) failed")))
    }
}

fn demo_config(config: &FileConfig, seed: u64, steps: Option<usize>) -> Result<TrainConfig, Failure> {
    let mut train = TrainConfig::demo(seed, config.loss.schedule.clone());
    train.lambdas = config.loss.weights()?;
    if let Some(s) = steps {
        train.steps = s;
    }
    Ok(train)
}

pub fn train_demo(config: &FileConfig, args: &TrainArgs) -> CliResult {
    let seed = seed(args.seed, config);
    let mut train = demo_config(config, seed, args.steps)?;
    if let Some(s) = &args.schedule {
        train.schedule = s.clone();
    }
    if let Some(lr) = args.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(m) = args.momentum {
        train.momentum = m;
    }
    train.validate()?;
    let data = demo_train_set(seed)?;
    let outcome = trainer::train(&train, &data)?;
    let every = (train.steps / 10).max(1);
    for (step, loss) in outcome.curve.iter().enumerate() {
        if step % every == 0 || step + 1 == outcome.curve.len() {
            println!(
                "step {step:>5}  loss {:.6}  (occupancy {:.4}, flow {:.4}, trace {:.4})",
                loss.total, loss.occupancy, loss.flow, loss.trace
            );
        }
    }
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!(
            "{} parameters, {} scenes, loss {:.6} -> {:.6} ({:.1}% lower)",
            outcome.model.num_params(),
            data.len(),
            first.total,
            last.total,
            100.0 * (1.0 - last.total / first.total)
        );
    }
    save_model(&args.out, &outcome.model)?;
    println!("model written to {}", args.out.display());
    if let Some(path) = &args.curve {
        let json = serde_json::to_string_pretty(&outcome.curve).expect("loss curve serializes") + "\n";
        write_file(path, &json)?;
    }
    Ok(())
}

pub fn wl_ablation(config: &FileConfig, args: &AblationArgs) -> CliResult {
    let seed = seed(args.seed, config);
    let base = demo_config(config, seed, args.steps)?;
    let (train_set, eval_set) = ablation_sets(seed)?;
    let report = trainer::wl_ablation(&base, &train_set, &eval_set)?;
    print!("{}", report.render_text());
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).expect("ablation report serializes") + "\n";
        write_file(path, &json)?;
    }
    if report.weighted_not_worse {
        Ok(())
    } else {
        Err(Failure::Check(
            "linear schedule has higher waypoint-8 EPE than uniform".into(),
        ))
    }
}

enum Results {
    Report(MetricsReport),
    Summary(DatasetSummary),
}

fn parse_results(text: &str) -> Result<Results, Failure> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        path: ".".into(),
        message: e.to_string(),
    })?;
    if value.get("aggregate").is_some() {
        Ok(Results::Summary(parse_json(text, true)?))
    } else {
        Ok(Results::Report(parse_json(text, true)?))
    }
}

pub fn report(args: &ReportArgs) -> CliResult {
    let path = if args.results.is_dir() {
        args.results.join(SUMMARY_JSON)
    } else {
        args.results.clone()
    };
    let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    match parse_results(&text)? {
        Results::Report(r) if args.json => print!("{}", r.to_json()),
        Results::Report(r) => print!("{}", r.render_text()),
        Results::Summary(s) if args.json => print!("{}", s.to_json()),
        Results::Summary(s) => print!("{}", s.render_text()),
    }
    Ok(())
}

pub fn synth(config: &FileConfig, args: &SynthArgs) -> CliResult {
    if args.kind.is_empty() {
        return Err(Error::Config("at least one scene kind is required".into()).into());
    }
    let first = seed(args.seed, config);
    let cfg = SyntheticConfig {
        grid: Some(args.grid.resolve(config.grid)?.unwrap_or_default()),
        ..SyntheticConfig::default()
    };
    create_dir(&args.out)?;
    for i in 0..args.count {
        let kind = args.kind[(i % args.kind.len() as u64) as usize];
        let scenario = make_synthetic_scenario_with(first + i, kind, &cfg);
        let path = args.out.join(format!("{}.json", scenario_dir_name(&scenario.id)));
        write_file(&path, &scenario_to_json(&scenario))?;
    }
    println!("wrote {} scenarios to {}", args.count, args.out.display());
    Ok(())
}
