//! Operator command line for the VSL laboratory.
//!
//! Subcommands wire the library end to end: `calibrate` fits a segment
//! model from detector data, `simulate` runs it with or without control,
//! `optimize` searches the control factors, `placements` ranks sign
//! layouts, and `fixture` writes the bundled synthetic corridor for a
//! quick start. Identical inputs and seeds give byte-identical outputs.
//!
//! Exit codes are a stable contract: 0 success, 2 input parse failure,
//! 3 infeasible calibration, 4 horizon mismatch, 5 usage error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Duration, Utc};
use clap::{Args, Parser, Subcommand};

use vsl_lab::calib::{
    assemble_cell_series, calibrate_two_step, read_station_csv, CalibError, RefineOptions,
    SegmentGeometry,
};
use vsl_lab::control::{ControlError, ControlFactors, SignLayout, TriggerMode};
use vsl_lab::fixtures;
use vsl_lab::optimize::{
    benefit_cost, compare_placements, evaluate_pair, ga_optimize, GaConfig, OptError,
    PairedEvaluation, Scenario,
};
use vsl_lab::pipeline::{
    join_visibility, read_weather_csv, PipelineError, SectionSeries, DEFAULT_FEATURE_WINDOW,
};
use vsl_lab::risk::{RiskCoefficients, RiskMode};
use vsl_lab::sim::{BoundaryInput, SegmentModel, SimError};

const EXIT_PARSE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_HORIZON: u8 = 4;
const EXIT_USAGE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "vsl-lab",
    about = "Freeway variable-speed-limit laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit fundamental-diagram parameters from detector data.
    Calibrate(CalibrateArgs),
    /// Run the simulator, optionally under speed-limit control.
    Simulate(SimulateArgs),
    /// Search the control factors with the genetic algorithm.
    Optimize(OptimizeArgs),
    /// Rank sign placements by benefit-cost ratio.
    Placements(PlacementsArgs),
    /// Write the bundled synthetic corridor files.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Station-level detector CSV (station,timestamp,flow_vph,density_vpm|occupancy,speed_mph).
    #[arg(long)]
    detectors: PathBuf,
    /// Segment geometry JSON (dt, per-cell length, flags, station ids).
    #[arg(long)]
    geometry: PathBuf,
    /// Boundary and ramp series CSV used by the refinement simulations.
    #[arg(long)]
    boundary: PathBuf,
    /// Effective vehicle length in miles for occupancy conversion.
    #[arg(long)]
    g_factor: Option<f64>,
    /// Objective evaluation budget per cell and sweep.
    #[arg(long, default_value_t = 800)]
    max_evaluations: usize,
    /// Cap on refinement sweeps over the cells.
    #[arg(long, default_value_t = 8)]
    max_sweeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Segment model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Boundary and ramp series CSV.
    #[arg(long)]
    boundary: PathBuf,
    /// Hourly weather CSV (timestamp,visibility_miles).
    #[arg(long, conflicts_with = "visibility")]
    weather: Option<PathBuf>,
    /// Wall-clock time of step 0 (RFC 3339), anchors the weather join.
    #[arg(long, requires = "weather")]
    start_time: Option<String>,
    /// Constant visibility in miles instead of a weather file.
    #[arg(long)]
    visibility: Option<f64>,
    /// Risk coefficients JSON; defaults to the built-in fitted set.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Report risk as the linear predictor or the logistic probability.
    #[arg(long, value_enum, default_value_t = RiskModeArg::Linear)]
    risk_mode: RiskModeArg,
    /// Steps to simulate; defaults to the full boundary series.
    #[arg(long)]
    horizon: Option<usize>,
    /// Rolling feature window in steps.
    #[arg(long, default_value_t = DEFAULT_FEATURE_WINDOW)]
    window: usize,
    /// Display quantum of the signs, mph.
    #[arg(long, default_value_t = 5.0)]
    quantum: f64,
    /// Share the segment-wide maximum risk across all signs.
    #[arg(long)]
    global_trigger: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RiskModeArg {
    Linear,
    Logistic,
}

impl From<RiskModeArg> for RiskMode {
    fn from(value: RiskModeArg) -> Self {
        match value {
            RiskModeArg::Linear => RiskMode::Linear,
            RiskModeArg::Logistic => RiskMode::Logistic,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Sign layout JSON; required unless --no-control.
    #[arg(long, required_unless_present = "no_control")]
    layout: Option<PathBuf>,
    /// Run without any speed-limit control.
    #[arg(long)]
    no_control: bool,
    /// Start threshold on the risk value.
    #[arg(long, default_value_t = vsl_lab::control::DEFAULT_START_THRESHOLD)]
    threshold: f64,
    /// Control cycle in seconds.
    #[arg(long, default_value_t = 120.0)]
    cycle: f64,
    /// Speed change step in mph.
    #[arg(long, default_value_t = 5.0)]
    step: f64,
    /// Maximum speed difference between adjacent signs, mph.
    #[arg(long, default_value_t = 15.0)]
    clamp: f64,
    /// Also run the uncontrolled companion and report paired deltas.
    #[arg(long)]
    paired: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Sign layout JSON.
    #[arg(long)]
    layout: PathBuf,
    /// Seed for the genetic algorithm.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    population: usize,
    #[arg(long, default_value_t = 50)]
    generations: usize,
    #[arg(long, default_value_t = 0.8)]
    crossover: f64,
    #[arg(long, default_value_t = 0.1)]
    mutation: f64,
    /// Encoding resolution applied to genes before snapping.
    #[arg(long, default_value_t = 1e-7)]
    precision: f64,
    /// Start threshold on the risk value (fixed, not searched).
    #[arg(long, default_value_t = vsl_lab::control::DEFAULT_START_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlacementsArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Two or more sign layout JSON files.
    #[arg(long, num_args = 1.., required = true)]
    layouts: Vec<PathBuf>,
    /// Seed for the genetic algorithm (shared by every layout).
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    population: usize,
    #[arg(long, default_value_t = 50)]
    generations: usize,
    /// Start threshold on the risk value (fixed, not searched).
    #[arg(long, default_value_t = vsl_lab::control::DEFAULT_START_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FixtureArgs {
    /// Steps of boundary data to write (30 s each).
    #[arg(long, default_value_t = 840)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Errors annotated with the exit code they map to.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn parse(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_PARSE,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::HorizonMismatch { .. } => EXIT_HORIZON,
            _ => EXIT_PARSE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        let code = match &e {
            CalibError::CsvParse { .. } | CalibError::Io(_) => EXIT_PARSE,
            CalibError::Sim(SimError::HorizonMismatch { .. }) => EXIT_HORIZON,
            _ => EXIT_INFEASIBLE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::parse(e.to_string())
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        CliError::parse(e.to_string())
    }
}

impl From<OptError> for CliError {
    fn from(e: OptError) -> Self {
        let code = match &e {
            OptError::Sim(SimError::HorizonMismatch { .. }) => EXIT_HORIZON,
            OptError::InsufficientLayouts(_) => EXIT_USAGE,
            OptError::Sim(_) | OptError::Pipeline(_) | OptError::Control(_) => EXIT_PARSE,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::parse(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::parse(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() {
                EXIT_USAGE
            } else {
                0 // --help and --version
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Placements(args) => cmd_placements(args),
        Command::Fixture(args) => cmd_fixture(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create_writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn parse_start_time(text: &str) -> Result<DateTime<Utc>, CliError> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| CliError::parse(format!("start time {text}: {e}")))
}

fn load_coefficients(path: &Option<PathBuf>) -> Result<RiskCoefficients, CliError> {
    match path {
        Some(p) => Ok(serde_json::from_reader(open_reader(p)?)
            .map_err(|e| CliError::parse(format!("{}: {e}", p.display())))?),
        None => Ok(RiskCoefficients::reference()),
    }
}

/// Per-step visibility from a weather file anchored at a start time, or
/// from a constant.
fn visibility_series(args: &ScenarioArgs, dt_seconds: f64, steps: usize) -> Result<Vec<f64>, CliError> {
    match (&args.weather, args.visibility) {
        (Some(path), None) => {
            let start = parse_start_time(args.start_time.as_deref().ok_or_else(|| {
                CliError::usage("--start-time is required with --weather")
            })?)?;
            let records = read_weather_csv(open_reader(path)?)?;
            let mut grid = SectionSeries::default();
            for k in 0..steps {
                grid.timestamps
                    .push(start + Duration::milliseconds((k as f64 * dt_seconds * 1e3) as i64));
                grid.flow_vph.push(0.0);
                grid.density_vpm.push(0.0);
                grid.speed_mph.push(0.0);
            }
            let joined = join_visibility(&grid, &records)?;
            Ok(joined.visibility_miles)
        }
        (None, Some(v)) => {
            if !(v >= 0.0) {
                return Err(CliError::usage(format!("visibility must be >= 0, got {v}")));
            }
            Ok(vec![v; steps])
        }
        (None, None) => Err(CliError::usage(
            "provide either --weather with --start-time or --visibility",
        )),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn build_scenario(args: &ScenarioArgs, layout: SignLayout) -> Result<Scenario, CliError> {
    let model = SegmentModel::from_json_reader(open_reader(&args.model)?)?;
    let boundary = BoundaryInput::read_csv(open_reader(&args.boundary)?, model.n_cells())?;
    let horizon = args.horizon.unwrap_or(boundary.len());
    if horizon == 0 || horizon > boundary.len() {
        return Err(SimError::HorizonMismatch {
            horizon,
            available: boundary.len(),
        }
        .into());
    }
    let visibility_miles = visibility_series(args, model.dt_seconds, horizon)?;
    let coefficients = load_coefficients(&args.coefficients)?;
    let scenario = Scenario {
        model,
        input: boundary,
        visibility_miles,
        layout,
        coefficients,
        risk_mode: args.risk_mode.into(),
        horizon,
        window: args.window,
        quantum_mph: args.quantum,
        trigger: if args.global_trigger {
            TriggerMode::GlobalMax
        } else {
            TriggerMode::PerSign
        },
    };
    scenario.validate().map_err(CliError::from)?;
    Ok(scenario)
}

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let geometry = SegmentGeometry::from_json_reader(open_reader(&args.geometry)?)
        .map_err(|e| CliError::parse(e.to_string()))?;
    let stations = read_station_csv(open_reader(&args.detectors)?, args.g_factor)?;
    let series = assemble_cell_series(&geometry, &stations)?;
    let boundary = BoundaryInput::read_csv(open_reader(&args.boundary)?, geometry.cells.len())?;
    let options = RefineOptions {
        max_evaluations: args.max_evaluations,
        max_sweeps: args.max_sweeps,
        ..RefineOptions::default()
    };
    let result = calibrate_two_step(&geometry, &series, &boundary, &options)?;

    let model_path = args.out.join("model.json");
    let mut w = create_writer(&model_path)?;
    result.model.to_json_writer(&mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_json(&args.out.join("calibration.json"), &result)?;

    println!("cell  mape_pct  mae_vpm  evaluations  congested_defaulted");
    for m in &result.metrics {
        println!(
            "{:>4}  {:>8.3}  {:>7.3}  {:>11}  {}",
            m.cell + 1,
            m.mape_pct,
            m.mae_vpm,
            m.refinement_evaluations,
            m.congested_defaulted
        );
    }
    println!("wrote {}", model_path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct PairedCellReport {
    cell: usize,
    risk_delta_pct: f64,
    ttt_delta_pct: f64,
}

#[derive(serde::Serialize)]
struct PairedReport {
    risk_total_uncontrolled: f64,
    ttt_uncontrolled: f64,
    delta_risk_rate: f64,
    delta_ttt_rate: f64,
    fitness: f64,
    per_cell: Vec<PairedCellReport>,
}

#[derive(serde::Serialize)]
struct SimulateMetrics {
    horizon: usize,
    window: usize,
    risk_mode: RiskMode,
    controlled: bool,
    risk_total: f64,
    ttt: f64,
    clamp_events: usize,
    per_cell_risk: Vec<f64>,
    per_cell_ttt: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    paired: Option<PairedReport>,
}

fn delta_pct(controlled: f64, baseline: f64) -> f64 {
    100.0 * (controlled - baseline) / baseline
}

fn write_risk_series_csv(
    path: &Path,
    scenario: &Scenario,
    labelled: &[(&str, &vsl_lab::sim::SimTrajectory)],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create_writer(path)?);
    w.write_record(["series", "step", "value"])
        .map_err(|e| CliError::parse(e.to_string()))?;
    for (label, traj) in labelled {
        let features = vsl_lab::pipeline::TrajectoryFeatures::new(
            &scenario.model,
            traj,
            &scenario.input,
            &scenario.visibility_miles,
            scenario.window,
        )?;
        for cell in 0..scenario.model.n_cells() {
            for k in scenario.window..traj.horizon() {
                let f = features.features(cell, k)?;
                let value = vsl_lab::risk::risk(&f, &scenario.coefficients, scenario.risk_mode);
                w.write_record(&[
                    format!("risk_cell{}_{label}", cell + 1),
                    k.to_string(),
                    value.to_string(),
                ])
                .map_err(|e| CliError::parse(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let layout = match (&args.layout, args.no_control) {
        (Some(path), false) => SignLayout::from_json_reader(open_reader(path)?)?,
        (None, true) | (Some(_), true) => SignLayout::uniform(1, 65.0, 20.0),
        (None, false) => unreachable!("clap required_unless_present"),
    };
    let scenario = build_scenario(&args.scenario, layout)?;
    let factors = ControlFactors {
        start_threshold: args.threshold,
        cycle_seconds: args.cycle,
        step_mph: args.step,
        adjacent_clamp_mph: args.clamp,
    };

    if args.no_control {
        let init = scenario.initial_densities();
        let mut policy = vsl_lab::sim::Uncontrolled::new(&scenario.model);
        let traj = vsl_lab::sim::simulate(
            &scenario.model,
            &scenario.input,
            &init,
            &mut policy,
            scenario.horizon,
        )?;
        let per_cell_risk = vsl_lab::optimize::per_cell_risk(&traj, &scenario)?;
        let per_cell_ttt = vsl_lab::optimize::per_cell_travel_time(&traj)?;
        let metrics = SimulateMetrics {
            horizon: scenario.horizon,
            window: scenario.window,
            risk_mode: scenario.risk_mode,
            controlled: false,
            risk_total: per_cell_risk.iter().sum(),
            ttt: per_cell_ttt.iter().sum(),
            clamp_events: traj.clamp_events,
            per_cell_risk,
            per_cell_ttt,
            paired: None,
        };
        traj.write_csv(create_writer(&args.out.join("trajectory.csv"))?)?;
        write_json(&args.out.join("metrics.json"), &metrics)?;
        write_risk_series_csv(
            &args.out.join("risk_series.csv"),
            &scenario,
            &[("uncontrolled", &traj)],
        )?;
        println!(
            "uncontrolled run: risk {:.3}, travel time {:.3}",
            metrics.risk_total, metrics.ttt
        );
        return Ok(());
    }

    let eval: PairedEvaluation = evaluate_pair(&scenario, factors)?;
    let c = eval.components;
    let paired = args.paired.then(|| PairedReport {
        risk_total_uncontrolled: c.r_non,
        ttt_uncontrolled: c.ttt_non,
        delta_risk_rate: c.delta_r,
        delta_ttt_rate: c.delta_t,
        fitness: c.fitness,
        per_cell: (0..scenario.model.n_cells())
            .map(|i| PairedCellReport {
                cell: i + 1,
                risk_delta_pct: delta_pct(eval.per_cell_risk_vsl[i], eval.per_cell_risk_non[i]),
                ttt_delta_pct: delta_pct(eval.per_cell_ttt_vsl[i], eval.per_cell_ttt_non[i]),
            })
            .collect(),
    });
    let metrics = SimulateMetrics {
        horizon: scenario.horizon,
        window: scenario.window,
        risk_mode: scenario.risk_mode,
        controlled: true,
        risk_total: c.r_vsl,
        ttt: c.ttt_vsl,
        clamp_events: eval.controlled.clamp_events,
        per_cell_risk: eval.per_cell_risk_vsl.clone(),
        per_cell_ttt: eval.per_cell_ttt_vsl.clone(),
        paired,
    };

    eval.controlled
        .write_csv(create_writer(&args.out.join("trajectory.csv"))?)?;
    write_json(&args.out.join("metrics.json"), &metrics)?;

    let mut trace = csv::Writer::from_writer(create_writer(&args.out.join("controller_trace.csv"))?);
    trace
        .write_record(["step", "sign_cell", "risk", "target_mph", "posted_mph"])
        .map_err(|e| CliError::parse(e.to_string()))?;
    for tick in &eval.trace {
        for (i, sign) in scenario.layout.signs.iter().enumerate() {
            trace
                .write_record(&[
                    tick.step.to_string(),
                    (sign.cell + 1).to_string(),
                    tick.risks[i].to_string(),
                    tick.targets_mph[i].to_string(),
                    tick.posted_mph[i].to_string(),
                ])
                .map_err(|e| CliError::parse(e.to_string()))?;
        }
    }
    trace.flush()?;

    let mut labelled: Vec<(&str, &vsl_lab::sim::SimTrajectory)> =
        vec![("controlled", &eval.controlled)];
    if args.paired {
        labelled.push(("uncontrolled", &eval.uncontrolled));
        eval.uncontrolled
            .write_csv(create_writer(&args.out.join("trajectory_uncontrolled.csv"))?)?;
    }
    write_risk_series_csv(&args.out.join("risk_series.csv"), &scenario, &labelled)?;

    if args.paired {
        println!(
            "paired run: risk {:+.2}%, travel time {:+.2}%, fitness {:.3}",
            100.0 * c.delta_r,
            100.0 * c.delta_t,
            c.fitness
        );
    } else {
        println!(
            "controlled run: risk {:.3}, travel time {:.3}",
            c.r_vsl, c.ttt_vsl
        );
    }
    Ok(())
}

fn cmd_optimize(args: OptimizeArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let layout = SignLayout::from_json_reader(open_reader(&args.layout)?)?;
    let scenario = build_scenario(&args.scenario, layout)?;
    let config = GaConfig {
        population: args.population,
        generations: args.generations,
        crossover_prob: args.crossover,
        mutation_prob: args.mutation,
        precision: args.precision,
        seed: args.seed,
        start_threshold: args.threshold,
    };
    let result = ga_optimize(&scenario, &config)?;

    write_json(&args.out.join("optimal.json"), &result)?;
    let mut history = csv::Writer::from_writer(create_writer(&args.out.join("history.csv"))?);
    history
        .write_record(["generation", "best_fitness", "mean_fitness"])
        .map_err(|e| CliError::parse(e.to_string()))?;
    for h in &result.history {
        history
            .write_record(&[
                h.generation.to_string(),
                h.best_fitness.to_string(),
                h.mean_fitness.to_string(),
            ])
            .map_err(|e| CliError::parse(e.to_string()))?;
    }
    history.flush()?;

    let f = result.best_factors;
    println!(
        "best factors: cycle {}s, step {} mph, clamp {} mph (threshold {})",
        f.cycle_seconds, f.step_mph, f.adjacent_clamp_mph, f.start_threshold
    );
    println!(
        "fitness {:.3} (risk {:+.2}%, travel time {:+.2}%), {} evaluations",
        result.best.fitness,
        100.0 * result.best.delta_r,
        100.0 * result.best.delta_t,
        result.evaluations
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PlacementsReport {
    rankings: Vec<vsl_lab::optimize::PlacementResult>,
    recommended: String,
}

fn cmd_placements(args: PlacementsArgs) -> Result<(), CliError> {
    if args.layouts.len() < 2 {
        return Err(CliError::usage(format!(
            "placement comparison needs at least 2 layouts, got {}",
            args.layouts.len()
        )));
    }
    ensure_out_dir(&args.out)?;
    let mut layouts = Vec::with_capacity(args.layouts.len());
    for path in &args.layouts {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        layouts.push((name, SignLayout::from_json_reader(open_reader(path)?)?));
    }
    let first_layout = layouts[0].1.clone();
    let scenario = build_scenario(&args.scenario, first_layout)?;
    let config = GaConfig {
        population: args.population,
        generations: args.generations,
        seed: args.seed,
        start_threshold: args.threshold,
        ..GaConfig::standard(args.seed)
    };
    let ranked = compare_placements(&scenario, &layouts, &config)?;
    let report = PlacementsReport {
        recommended: ranked[0].name.clone(),
        rankings: ranked,
    };
    write_json(&args.out.join("placements.json"), &report)?;

    println!("layout            signs  fitness     benefit_cost");
    for r in &report.rankings {
        println!(
            "{:<17} {:>5}  {:>10.3}  {:>12.3}",
            r.name,
            r.sign_count,
            r.result.best.fitness,
            benefit_cost(r.result.best.fitness, r.sign_count).unwrap_or(f64::NAN)
        );
    }
    println!("recommended: {}", report.recommended);
    Ok(())
}

fn cmd_fixture(args: FixtureArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    fixtures::write_bundle(&args.out, args.steps).map_err(|e| CliError::parse(e.to_string()))?;
    println!("wrote fixture bundle to {}", args.out.display());
    Ok(())
}
