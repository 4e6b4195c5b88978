//! Two-step fundamental-diagram calibration from detector data.
//!
//! Step one classifies each cell's observations into free and congested
//! regimes and least-squares fits the two branches of the trapezoid. Step
//! two polishes the five parameters per cell with a derivative-free
//! constrained search (COBYLA) against the squared error between simulated
//! and measured densities, sweeping the cells upstream to downstream.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch;
use crate::pipeline::DEFAULT_G_FACTOR_MILES;
use crate::sim::{simulate, BoundaryInput, CellParams, SegmentModel, SimError, Uncontrolled};

/// Fallback congestion wave speed when the data never leaves free flow.
pub const DEFAULT_WAVE_SPEED_MPH: f64 = 12.0;

/// Measured densities below this are skipped by the relative error metric.
pub const MAPE_DENSITY_GUARD_VPM: f64 = 1.0;

/// Minimum observations for an initial fit.
pub const MIN_OBSERVATIONS: usize = 50;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("station series are misaligned: {0}")]
    Misaligned(String),
    #[error("geometry references station {0} absent from the detector data")]
    MissingStation(String),
    #[error("initial parameters are infeasible: {0}")]
    InfeasibleInitial(String),
    #[error("calibration produced infeasible parameters for cell {cell}: {reason}")]
    InfeasibleResult { cell: usize, reason: String },
    #[error("series length mismatch: {0}")]
    LengthMismatch(String),
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One cell's measured series: flow entering the cell, its density, and
/// its speed, step by step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellSeries {
    pub flow_vph: Vec<f64>,
    pub density_vpm: Vec<f64>,
    pub speed_mph: Vec<f64>,
}

impl CellSeries {
    pub fn len(&self) -> usize {
        self.flow_vph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow_vph.is_empty()
    }
}

/// Fixed geometry of a cell to calibrate, plus the detector station that
/// observes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub station: String,
    pub length_miles: f64,
    #[serde(default)]
    pub diverge: bool,
    #[serde(default)]
    pub on_ramp: bool,
    #[serde(default)]
    pub off_ramp: bool,
}

/// Segment geometry driving a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentGeometry {
    pub dt_seconds: f64,
    pub cells: Vec<CellTemplate>,
}

impl SegmentGeometry {
    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self, CalibError> {
        serde_json::from_reader(reader)
            .map_err(|e| CalibError::InsufficientData(format!("geometry json: {e}")))
    }

    pub fn to_json_writer<W: Write>(&self, writer: W) -> Result<(), CalibError> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| CalibError::InsufficientData(format!("geometry json: {e}")))?;
        Ok(())
    }
}

/// Initial fit of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialFit {
    pub params: CellParams,
    /// True when the congested branch had no usable data and the wave
    /// speed fell back to [`DEFAULT_WAVE_SPEED_MPH`].
    pub congested_defaulted: bool,
}

/// Nearest-rank percentile (ceiling convention), invariant under
/// duplicating every observation.
fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Least-squares initialization of one cell's trapezoid.
///
/// Points are congested when their speed falls below 0.8 times the 85th
/// percentile speed. The free branch is a through-origin fit of flow on
/// density, the congested branch an ordinary line fit, the flow cap the
/// 99th percentile of observed flow. The result is projected into the
/// parameter feasibility bounds.
pub fn lsm_initial_fit(
    series: &CellSeries,
    template: &CellTemplate,
    dt_seconds: f64,
) -> Result<InitialFit, CalibError> {
    let n = series.len();
    if n < MIN_OBSERVATIONS {
        return Err(CalibError::InsufficientData(format!(
            "{n} observations, need at least {MIN_OBSERVATIONS}"
        )));
    }
    if series.density_vpm.len() != n || series.speed_mph.len() != n {
        return Err(CalibError::LengthMismatch(format!(
            "flow {n}, density {}, speed {}",
            series.density_vpm.len(),
            series.speed_mph.len()
        )));
    }

    let speed_p85 = percentile_nearest_rank(&series.speed_mph, 0.85);
    let congested_below = 0.8 * speed_p85;

    // Branch fits use the station's own speed times density as the local
    // flow. The entering flow crosses an interface and rides whichever
    // side of it binds, so it can sit far off the cell's own diagram
    // around queue fronts and discharges.
    let mut free_qr = 0.0;
    let mut free_rr = 0.0;
    let mut congested: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        let (rho, v) = (series.density_vpm[i], series.speed_mph[i]);
        let local_flow = v * rho;
        if v < congested_below {
            congested.push((rho, local_flow));
        } else {
            free_qr += local_flow * rho;
            free_rr += rho * rho;
        }
    }
    if free_rr <= 0.0 {
        return Err(CalibError::InsufficientData(
            "no free-flow observations with positive density".into(),
        ));
    }
    let mut free_flow = free_qr / free_rr;
    if !(free_flow > 0.0) {
        return Err(CalibError::InsufficientData(
            "free-flow fit produced a non-positive speed".into(),
        ));
    }

    let max_flow = percentile_nearest_rank(&series.flow_vph, 0.99);
    if !(max_flow > 0.0) {
        return Err(CalibError::InsufficientData("observed flows are all zero".into()));
    }

    // Ordinary least squares q = a + b rho on the congested points; the
    // branch is usable only when it slopes downward.
    let congested_line = if congested.len() >= 2 {
        let m = congested.len() as f64;
        let sum_r: f64 = congested.iter().map(|(r, _)| r).sum();
        let sum_q: f64 = congested.iter().map(|(_, q)| q).sum();
        let sum_rr: f64 = congested.iter().map(|(r, _)| r * r).sum();
        let sum_rq: f64 = congested.iter().map(|(r, q)| r * q).sum();
        let denom = m * sum_rr - sum_r * sum_r;
        if denom.abs() > 1e-12 {
            let slope = (m * sum_rq - sum_r * sum_q) / denom;
            let intercept = (sum_q - slope * sum_r) / m;
            if slope < 0.0 {
                Some((intercept, slope))
            } else {
                None
            }
        } else {
            None
        }
    } else {
        None
    };

    let dt_hours = dt_seconds / 3600.0;
    // Projection: the free-flow speed may not outrun the cell in one step.
    let speed_cap = template.length_miles / dt_hours;
    free_flow = free_flow.min(speed_cap);
    let critical_density = max_flow / free_flow;

    let (wave_speed, jam_density, congested_defaulted) = match congested_line {
        Some((intercept, slope)) => {
            let wave = -slope;
            let jam = intercept / wave;
            if jam > critical_density {
                (wave, jam, false)
            } else {
                (wave, critical_density + max_flow / wave, false)
            }
        }
        None => {
            let wave = DEFAULT_WAVE_SPEED_MPH;
            (wave, critical_density + max_flow / wave, true)
        }
    };
    // Lift the jam density if the congested cap still cuts below the flow cap.
    let jam_density = if wave_speed * (jam_density - critical_density) < max_flow {
        critical_density + max_flow / wave_speed
    } else {
        jam_density
    };

    let params = CellParams {
        length_miles: template.length_miles,
        free_flow_mph: free_flow,
        wave_speed_mph: wave_speed,
        max_flow_vph: max_flow,
        critical_density_vpm: critical_density,
        jam_density_vpm: jam_density,
        diverge: template.diverge,
        on_ramp: template.on_ramp,
        off_ramp: template.off_ramp,
    };
    params
        .validate(dt_hours)
        .map_err(|reason| CalibError::InfeasibleResult { cell: 0, reason })?;
    Ok(InitialFit {
        params,
        congested_defaulted,
    })
}

/// Mean absolute percentage error and mean absolute error between a
/// simulated and a measured density series. Steps with measured density
/// under [`MAPE_DENSITY_GUARD_VPM`] are excluded from the percentage
/// metric (the absolute metric keeps every step).
pub fn evaluate_fit(simulated: &[f64], measured: &[f64]) -> Result<(f64, f64), CalibError> {
    if simulated.is_empty() || measured.is_empty() {
        return Err(CalibError::InsufficientData("empty density series".into()));
    }
    if simulated.len() != measured.len() {
        return Err(CalibError::LengthMismatch(format!(
            "simulated {} vs measured {}",
            simulated.len(),
            measured.len()
        )));
    }
    let mut abs_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_count = 0usize;
    for (s, m) in simulated.iter().zip(measured) {
        let err = (s - m).abs();
        abs_sum += err;
        if *m >= MAPE_DENSITY_GUARD_VPM {
            pct_sum += err / m;
            pct_count += 1;
        }
    }
    let mape = if pct_count > 0 {
        100.0 * pct_sum / pct_count as f64
    } else {
        0.0
    };
    Ok((mape, abs_sum / simulated.len() as f64))
}

/// Measured data a refinement run simulates against.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub boundary: BoundaryInput,
    /// Measured density per cell per step, `[cell][step]`.
    pub measured_density: Vec<Vec<f64>>,
}

impl CalibrationData {
    pub fn horizon(&self) -> usize {
        self.measured_density.first().map_or(0, Vec::len)
    }

    pub fn initial_densities(&self) -> Vec<f64> {
        self.measured_density.iter().map(|d| d[0]).collect()
    }

    pub fn validate(&self, n_cells: usize) -> Result<(), CalibError> {
        if self.measured_density.len() != n_cells {
            return Err(CalibError::LengthMismatch(format!(
                "measured densities cover {} cells, expected {n_cells}",
                self.measured_density.len()
            )));
        }
        let h = self.horizon();
        if h == 0 {
            return Err(CalibError::InsufficientData("no measured steps".into()));
        }
        for (i, d) in self.measured_density.iter().enumerate() {
            if d.len() != h {
                return Err(CalibError::LengthMismatch(format!(
                    "cell {i} has {} steps, expected {h}",
                    d.len()
                )));
            }
        }
        if self.boundary.len() < h {
            return Err(CalibError::LengthMismatch(format!(
                "boundary covers {} steps, measured series need {h}",
                self.boundary.len()
            )));
        }
        Ok(())
    }
}

/// Refinement settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Objective evaluation budget per cell and sweep.
    pub max_evaluations: usize,
    /// Trust-region radius (in scaled parameter units) below which the
    /// search stops.
    pub radius_tolerance: f64,
    /// Initial trust-region radius in scaled parameter units.
    pub initial_radius: f64,
    /// Cap on coordinate-descent sweeps over the cells.
    pub max_sweeps: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            max_evaluations: 800,
            radius_tolerance: 1e-4,
            initial_radius: 0.1,
            max_sweeps: 8,
        }
    }
}

/// Outcome of refining one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRefineOutcome {
    pub params: CellParams,
    pub evaluations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Mean squared density error over every cell and step; the refinement
/// objective. Scoring all cells keeps one cell's fit from absorbing its
/// neighbours' parameter errors.
fn density_mse(model: &SegmentModel, data: &CalibrationData) -> Result<f64, CalibError> {
    let horizon = data.horizon();
    let mut policy = Uncontrolled::new(model);
    let traj = simulate(
        model,
        &data.boundary,
        &data.initial_densities(),
        &mut policy,
        horizon,
    )?;
    let n = model.n_cells();
    let mut total = 0.0;
    for k in 0..horizon {
        for (cell, measured) in data.measured_density.iter().enumerate() {
            let d = traj.densities[k][cell] - measured[k];
            total += d * d;
        }
    }
    Ok(total / (horizon * n) as f64)
}

fn params_from_scaled(initial: &CellParams, scaled: &[f64]) -> CellParams {
    CellParams {
        free_flow_mph: initial.free_flow_mph * scaled[0],
        wave_speed_mph: initial.wave_speed_mph * scaled[1],
        max_flow_vph: initial.max_flow_vph * scaled[2],
        critical_density_vpm: initial.critical_density_vpm * scaled[3],
        jam_density_vpm: initial.jam_density_vpm * scaled[4],
        ..*initial
    }
}

/// Polishes one cell's five diagram parameters against the measured
/// densities, holding every other cell fixed. The search is COBYLA over
/// parameters scaled by their initial values, with the feasibility
/// invariants as inequality constraints; the best feasible point seen is
/// returned, so the objective never ends above its initial value.
pub fn refine_constrained(
    model: &SegmentModel,
    cell: usize,
    data: &CalibrationData,
    options: &RefineOptions,
) -> Result<CellRefineOutcome, CalibError> {
    data.validate(model.n_cells())?;
    let initial = model.cells[cell];
    let dt_hours = model.dt_hours();
    initial
        .validate(dt_hours)
        .map_err(CalibError::InfeasibleInitial)?;

    let initial_objective = density_mse(model, data)?;

    struct BestSeen {
        scaled: Vec<f64>,
        objective: f64,
        evaluations: usize,
        failure: Option<CalibError>,
    }
    let best = RefCell::new(BestSeen {
        scaled: vec![1.0; 5],
        objective: initial_objective,
        evaluations: 0,
        failure: None,
    });

    let objective = |scaled: &[f64], _data: &mut ()| -> f64 {
        let candidate = params_from_scaled(&initial, scaled);
        let mut state = best.borrow_mut();
        if state.failure.is_some() {
            return f64::MAX;
        }
        state.evaluations += 1;
        if candidate.validate(dt_hours).is_err() {
            // Infeasible probes get a finite penalty so the linear model
            // stays informative; they are never recorded as best.
            return initial_objective * 10.0 + 1e6;
        }
        let mut patched = model.clone();
        patched.cells[cell] = candidate;
        match density_mse(&patched, data) {
            Ok(mse) => {
                if mse < state.objective {
                    state.objective = mse;
                    state.scaled = scaled.to_vec();
                }
                mse
            }
            Err(e) => {
                state.failure = Some(e);
                f64::MAX
            }
        }
    };

    // Feasibility as C(x) >= 0, normalized by the initial magnitudes.
    let tol = crate::sim::FEASIBILITY_TOL;
    let separation = move |s: &[f64], _: &mut ()| -> f64 {
        let p = params_from_scaled(&initial, s);
        (p.jam_density_vpm - p.critical_density_vpm) / initial.jam_density_vpm
    };
    let free_cap = move |s: &[f64], _: &mut ()| -> f64 {
        let p = params_from_scaled(&initial, s);
        (p.free_flow_mph * p.critical_density_vpm * (1.0 + tol) - p.max_flow_vph)
            / initial.max_flow_vph
    };
    let wave_cap = move |s: &[f64], _: &mut ()| -> f64 {
        let p = params_from_scaled(&initial, s);
        (p.wave_speed_mph * (p.jam_density_vpm - p.critical_density_vpm) * (1.0 + tol)
            - p.max_flow_vph)
            / initial.max_flow_vph
    };
    let length = move |s: &[f64], _: &mut ()| -> f64 {
        let p = params_from_scaled(&initial, s);
        (p.length_miles / dt_hours - p.free_flow_mph) / initial.free_flow_mph
    };
    let cons: Vec<&dyn cobyla::Func<()>> = vec![&separation, &free_cap, &wave_cap, &length];

    let stop = cobyla::StopTols {
        xtol_abs: vec![options.radius_tolerance; 5],
        ..cobyla::StopTols::default()
    };
    let outcome = cobyla::minimize(
        &objective,
        &[1.0; 5],
        &[(0.2, 5.0); 5],
        &cons,
        (),
        options.max_evaluations,
        cobyla::RhoBeg::All(options.initial_radius),
        Some(stop),
    );
    // Either way the tracked best feasible point is what we report.
    let _ = outcome;

    let state = best.into_inner();
    if let Some(failure) = state.failure {
        return Err(failure);
    }
    let params = params_from_scaled(&initial, &state.scaled);
    params
        .validate(dt_hours)
        .map_err(|reason| CalibError::InfeasibleResult { cell, reason })?;
    Ok(CellRefineOutcome {
        params,
        evaluations: state.evaluations,
        initial_objective,
        final_objective: state.objective,
    })
}

/// Per-cell quality metrics of a finished calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFitMetrics {
    pub cell: usize,
    pub mape_pct: f64,
    pub mae_vpm: f64,
    pub refinement_evaluations: usize,
    pub congested_defaulted: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Output of the two-step calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub model: SegmentModel,
    /// Pre-refinement parameters, kept for audit.
    pub initial_model: SegmentModel,
    pub metrics: Vec<CellFitMetrics>,
}

/// Runs the least-squares initialization for every cell. Cells are
/// independent, so the fits run through the batch layer.
pub fn initial_fits(
    geometry: &SegmentGeometry,
    series: &[CellSeries],
) -> Result<Vec<InitialFit>, CalibError> {
    if series.len() != geometry.cells.len() {
        return Err(CalibError::LengthMismatch(format!(
            "{} series for {} cells",
            series.len(),
            geometry.cells.len()
        )));
    }
    let indexed: Vec<usize> = (0..series.len()).collect();
    batch::try_map(&indexed, |&i| {
        lsm_initial_fit(&series[i], &geometry.cells[i], geometry.dt_seconds).map_err(|e| match e {
            CalibError::InfeasibleResult { reason, .. } => {
                CalibError::InfeasibleResult { cell: i, reason }
            }
            other => other,
        })
    })
}

/// Refines the cells by block-coordinate descent on the shared objective:
/// repeated downstream-to-upstream sweeps, carrying refined parameters
/// along, until a sweep stops paying or the sweep cap is reached.
///
/// Downstream first, because the last cell is pinned by the measured
/// boundary and conserved free-flow throughput; each step up the segment
/// then faces an already-corrected downstream side. A cell fitted early
/// compensates its still-wrong neighbours, so later sweeps re-fit it
/// against the corrected segment.
pub fn refine_model(
    initial_model: &SegmentModel,
    data: &CalibrationData,
    options: &RefineOptions,
) -> Result<(SegmentModel, Vec<CellRefineOutcome>), CalibError> {
    let mut model = initial_model.clone();
    let mut outcomes: Vec<Option<CellRefineOutcome>> = vec![None; model.n_cells()];
    let mut last_objective = f64::INFINITY;
    for _sweep in 0..options.max_sweeps.max(1) {
        for cell in (0..model.n_cells()).rev() {
            let outcome = refine_constrained(&model, cell, data, options)?;
            model.cells[cell] = outcome.params;
            match &mut outcomes[cell] {
                None => outcomes[cell] = Some(outcome),
                Some(entry) => {
                    entry.params = outcome.params;
                    entry.evaluations += outcome.evaluations;
                    entry.final_objective = outcome.final_objective;
                }
            }
        }
        let objective = outcomes[0].as_ref().unwrap().final_objective;
        if objective >= last_objective * (1.0 - 0.01) {
            break;
        }
        last_objective = objective;
    }
    Ok((model, outcomes.into_iter().map(Option::unwrap).collect()))
}

/// The full two-step calibration: initial fits, a refinement sweep, and a
/// final simulation scored per cell.
pub fn calibrate_two_step(
    geometry: &SegmentGeometry,
    series: &[CellSeries],
    boundary: &BoundaryInput,
    options: &RefineOptions,
) -> Result<CalibrationResult, CalibError> {
    let fits = initial_fits(geometry, series)?;
    let initial_model = SegmentModel {
        dt_seconds: geometry.dt_seconds,
        cells: fits.iter().map(|f| f.params).collect(),
    };
    initial_model.validate()?;

    let horizon = series.iter().map(CellSeries::len).min().unwrap_or(0);
    let data = CalibrationData {
        boundary: boundary.clone(),
        measured_density: series
            .iter()
            .map(|s| s.density_vpm[..horizon].to_vec())
            .collect(),
    };
    data.validate(geometry.cells.len())?;

    let (model, outcomes) = refine_model(&initial_model, &data, options)?;

    let mut policy = Uncontrolled::new(&model);
    let traj = simulate(&model, boundary, &data.initial_densities(), &mut policy, horizon)?;
    let mut metrics = Vec::with_capacity(model.n_cells());
    for cell in 0..model.n_cells() {
        let simulated: Vec<f64> = (0..horizon).map(|k| traj.densities[k][cell]).collect();
        let (mape_pct, mae_vpm) = evaluate_fit(&simulated, &data.measured_density[cell])?;
        metrics.push(CellFitMetrics {
            cell,
            mape_pct,
            mae_vpm,
            refinement_evaluations: outcomes[cell].evaluations,
            congested_defaulted: fits[cell].congested_defaulted,
            initial_objective: outcomes[cell].initial_objective,
            final_objective: outcomes[cell].final_objective,
        });
    }
    Ok(CalibrationResult {
        model,
        initial_model,
        metrics,
    })
}

/// One station's aligned series as read from a detector CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StationSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    pub series: CellSeries,
}

/// Reads the station-level CSV
/// `station,timestamp,flow_vph,density_vpm,speed_mph`; a third column
/// named `occupancy` instead of `density_vpm` is converted through the
/// given g factor (or the default).
pub fn read_station_csv<R: Read>(
    reader: R,
    g_miles: Option<f64>,
) -> Result<BTreeMap<String, StationSeries>, CalibError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CalibError::CsvParse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let density_kind = headers.iter().nth(3).unwrap_or("").trim().to_string();
    let occupancy_input = match density_kind.as_str() {
        "density_vpm" => false,
        "occupancy" => true,
        other => {
            return Err(CalibError::CsvParse {
                line: 1,
                reason: format!("fourth column must be density_vpm or occupancy, got {other}"),
            })
        }
    };
    let g = g_miles.unwrap_or(DEFAULT_G_FACTOR_MILES);
    let mut out: BTreeMap<String, StationSeries> = BTreeMap::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| CalibError::CsvParse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 5 {
            return Err(CalibError::CsvParse {
                line,
                reason: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let num = |idx: usize| -> Result<f64, CalibError> {
            record[idx]
                .trim()
                .parse::<f64>()
                .map_err(|e| CalibError::CsvParse {
                    line,
                    reason: format!("field {}: {e}", idx + 1),
                })
        };
        let timestamp = DateTime::parse_from_rfc3339(record[1].trim())
            .map_err(|e| CalibError::CsvParse {
                line,
                reason: format!("timestamp: {e}"),
            })?
            .with_timezone(&Utc);
        let density = if occupancy_input {
            crate::pipeline::occupancy_to_density(num(3)?, g).map_err(|e| {
                CalibError::CsvParse {
                    line,
                    reason: e.to_string(),
                }
            })?
        } else {
            num(3)?
        };
        let entry = out.entry(record[0].trim().to_string()).or_default();
        entry.timestamps.push(timestamp);
        entry.series.flow_vph.push(num(2)?);
        entry.series.density_vpm.push(density);
        entry.series.speed_mph.push(num(4)?);
    }
    if out.is_empty() {
        return Err(CalibError::InsufficientData("detector CSV has no rows".into()));
    }
    Ok(out)
}

/// Writes the station-level CSV with densities.
pub fn write_station_csv<W: Write>(
    stations: &BTreeMap<String, StationSeries>,
    writer: W,
) -> Result<(), CalibError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["station", "timestamp", "flow_vph", "density_vpm", "speed_mph"])
        .map_err(|e| CalibError::CsvParse {
            line: 0,
            reason: e.to_string(),
        })?;
    for (station, s) in stations {
        for i in 0..s.series.len() {
            wtr.write_record(&[
                station.clone(),
                s.timestamps[i].to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                s.series.flow_vph[i].to_string(),
                s.series.density_vpm[i].to_string(),
                s.series.speed_mph[i].to_string(),
            ])
            .map_err(|e| CalibError::CsvParse {
                line: 0,
                reason: e.to_string(),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Orders station series into per-cell series following the geometry and
/// checks the stations share one step grid.
pub fn assemble_cell_series(
    geometry: &SegmentGeometry,
    stations: &BTreeMap<String, StationSeries>,
) -> Result<Vec<CellSeries>, CalibError> {
    let mut reference: Option<(&String, &Vec<DateTime<Utc>>)> = None;
    let mut out = Vec::with_capacity(geometry.cells.len());
    for template in &geometry.cells {
        let station = stations
            .get(&template.station)
            .ok_or_else(|| CalibError::MissingStation(template.station.clone()))?;
        match &reference {
            None => reference = Some((&template.station, &station.timestamps)),
            Some((name, ts)) => {
                if station.timestamps != **ts {
                    return Err(CalibError::Misaligned(format!(
                        "stations {name} and {} disagree on the step grid",
                        template.station
                    )));
                }
            }
        }
        out.push(station.series.clone());
    }
    Ok(out)
}

/// Synthesizes detector data by running the model on a boundary series:
/// per cell, the entering flow, the cell density, and the cell speed.
/// Returns the series and the matching refinement data.
pub fn synthesize_detector_data(
    model: &SegmentModel,
    boundary: &BoundaryInput,
    horizon: usize,
) -> Result<(Vec<CellSeries>, CalibrationData), CalibError> {
    let init: Vec<f64> = model
        .cells
        .iter()
        .map(|c| (boundary.upstream_flow_vph[0] / c.free_flow_mph).min(c.jam_density_vpm))
        .collect();
    let mut policy = Uncontrolled::new(model);
    let traj = simulate(model, boundary, &init, &mut policy, horizon)?;
    let mut series = Vec::with_capacity(model.n_cells());
    for cell in 0..model.n_cells() {
        let mut s = CellSeries::default();
        for k in 0..horizon {
            s.flow_vph.push(traj.flows[k][cell]);
            s.density_vpm.push(traj.densities[k][cell]);
            s.speed_mph.push(traj.speeds[k][cell]);
        }
        series.push(s);
    }
    let data = CalibrationData {
        boundary: boundary.clone(),
        measured_density: series.iter().map(|s| s.density_vpm.clone()).collect(),
    };
    Ok((series, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn cell1_template() -> CellTemplate {
        CellTemplate {
            station: "s1".into(),
            length_miles: 0.8,
            diverge: true,
            on_ramp: true,
            off_ramp: true,
        }
    }

    /// Points straight off cell 1's trapezoid, both regimes.
    fn cell1_fd_series() -> CellSeries {
        let cell = fixtures::segment_model().cells[0];
        let mut series = CellSeries::default();
        let mut push = |rho: f64| {
            let q = (cell.free_flow_mph * rho)
                .min(cell.max_flow_vph)
                .min(cell.wave_speed_mph * (cell.jam_density_vpm - rho));
            series.flow_vph.push(q);
            series.density_vpm.push(rho);
            series.speed_mph.push(if rho > 0.0 { q / rho } else { cell.free_flow_mph });
        };
        for i in 1..=144 {
            push(i as f64);
        }
        let mut rho = 180.0;
        while rho <= 900.0 {
            push(rho);
            rho += 20.0;
        }
        series
    }

    #[test]
    fn percentile_is_duplication_invariant() {
        let values = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3];
        let doubled: Vec<f64> = values.iter().flat_map(|&v| [v, v]).collect();
        for q in [0.1, 0.5, 0.85, 0.99] {
            assert_eq!(
                percentile_nearest_rank(&values, q),
                percentile_nearest_rank(&doubled, q)
            );
        }
    }

    #[test]
    fn lsm_recovers_noise_free_diagram() {
        let truth = fixtures::segment_model().cells[0];
        let fit = lsm_initial_fit(&cell1_fd_series(), &cell1_template(), 30.0).unwrap();
        assert!(!fit.congested_defaulted);
        let p = fit.params;
        assert!((p.free_flow_mph - truth.free_flow_mph).abs() / truth.free_flow_mph < 0.01);
        assert!((p.wave_speed_mph - truth.wave_speed_mph).abs() / truth.wave_speed_mph < 0.01);
        assert!((p.jam_density_vpm - truth.jam_density_vpm).abs() / truth.jam_density_vpm < 0.01);
        assert!((p.max_flow_vph - truth.max_flow_vph).abs() / truth.max_flow_vph < 0.02);
        p.validate(30.0 / 3600.0).unwrap();
    }

    #[test]
    fn lsm_duplicated_data_identical_fit() {
        let series = cell1_fd_series();
        let mut doubled = CellSeries::default();
        for i in 0..series.len() {
            for _ in 0..2 {
                doubled.flow_vph.push(series.flow_vph[i]);
                doubled.density_vpm.push(series.density_vpm[i]);
                doubled.speed_mph.push(series.speed_mph[i]);
            }
        }
        let a = lsm_initial_fit(&series, &cell1_template(), 30.0).unwrap();
        let b = lsm_initial_fit(&doubled, &cell1_template(), 30.0).unwrap();
        // Identical up to summation rounding; the weights cancel exactly
        // in real arithmetic.
        assert_eq!(a.congested_defaulted, b.congested_defaulted);
        let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
        assert!(rel(a.params.free_flow_mph, b.params.free_flow_mph) < 1e-12);
        assert!(rel(a.params.wave_speed_mph, b.params.wave_speed_mph) < 1e-12);
        assert!(rel(a.params.max_flow_vph, b.params.max_flow_vph) < 1e-12);
        assert!(rel(a.params.critical_density_vpm, b.params.critical_density_vpm) < 1e-12);
        assert!(rel(a.params.jam_density_vpm, b.params.jam_density_vpm) < 1e-12);
    }

    #[test]
    fn lsm_free_only_data_defaults_congested_branch() {
        let cell = fixtures::segment_model().cells[0];
        let mut series = CellSeries::default();
        for i in 1..=80 {
            let rho = i as f64;
            series.flow_vph.push(cell.free_flow_mph * rho);
            series.density_vpm.push(rho);
            series.speed_mph.push(cell.free_flow_mph);
        }
        let fit = lsm_initial_fit(&series, &cell1_template(), 30.0).unwrap();
        assert!(fit.congested_defaulted);
        assert!(approx(fit.params.free_flow_mph, cell.free_flow_mph, 1e-9));
        assert_eq!(fit.params.wave_speed_mph, DEFAULT_WAVE_SPEED_MPH);
        fit.params.validate(30.0 / 3600.0).unwrap();
    }

    #[test]
    fn lsm_rejects_short_series() {
        let mut series = CellSeries::default();
        for i in 0..20 {
            series.flow_vph.push(100.0 * i as f64);
            series.density_vpm.push(2.0 * i as f64);
            series.speed_mph.push(50.0);
        }
        assert!(matches!(
            lsm_initial_fit(&series, &cell1_template(), 30.0),
            Err(CalibError::InsufficientData(_))
        ));
    }

    #[test]
    fn evaluate_fit_identical_series() {
        let xs = vec![10.0, 20.0, 30.0];
        assert_eq!(evaluate_fit(&xs, &xs).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn evaluate_fit_uniform_relative_error() {
        let meas = vec![50.0, 80.0, 120.0];
        let sim: Vec<f64> = meas.iter().map(|m| m * 1.1).collect();
        let (mape, _) = evaluate_fit(&sim, &meas).unwrap();
        assert!(approx(mape, 10.0, 1e-9));
    }

    #[test]
    fn evaluate_fit_hand_oracle() {
        let (mape, mae) = evaluate_fit(&[90.0, 220.0], &[100.0, 200.0]).unwrap();
        assert!(approx(mape, 10.0, 1e-12));
        assert!(approx(mae, 15.0, 1e-12));
    }

    #[test]
    fn evaluate_fit_guards_near_zero_measurements() {
        let (mape, mae) = evaluate_fit(&[0.5, 110.0], &[0.2, 100.0]).unwrap();
        // Only the second step enters the percentage metric.
        assert!(approx(mape, 10.0, 1e-9));
        assert!(approx(mae, 5.15, 1e-9));
    }

    #[test]
    fn evaluate_fit_rejects_empty_and_mismatched() {
        assert!(evaluate_fit(&[], &[]).is_err());
        assert!(evaluate_fit(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn synthetic_setup() -> (SegmentModel, Vec<CellSeries>, CalibrationData) {
        let model = fixtures::segment_model();
        let boundary = fixtures::calibration_boundary_input(480);
        let (series, data) = synthesize_detector_data(&model, &boundary, 480).unwrap();
        (model, series, data)
    }

    #[test]
    fn refine_from_truth_never_degrades() {
        let (model, _, data) = synthetic_setup();
        let outcome = refine_constrained(&model, 1, &data, &RefineOptions::default()).unwrap();
        assert!(outcome.final_objective <= outcome.initial_objective);
        outcome.params.validate(model.dt_hours()).unwrap();
    }

    #[test]
    fn refine_rejects_infeasible_initial() {
        let (mut model, _, data) = synthetic_setup();
        model.cells[0].jam_density_vpm = model.cells[0].critical_density_vpm - 1.0;
        assert!(matches!(
            refine_constrained(&model, 0, &data, &RefineOptions::default()),
            Err(CalibError::InfeasibleInitial(_))
        ));
    }

    #[test]
    fn refine_output_respects_separation_constraint() {
        let (model, _, data) = synthetic_setup();
        let opts = RefineOptions {
            max_evaluations: 120,
            ..RefineOptions::default()
        };
        for cell in 0..model.n_cells() {
            let outcome = refine_constrained(&model, cell, &data, &opts).unwrap();
            assert!(outcome.params.critical_density_vpm < outcome.params.jam_density_vpm);
        }
    }

    /// Truth perturbed +-10% with the derived densities kept consistent.
    fn perturb_model(truth: &SegmentModel) -> SegmentModel {
        let mut perturbed = truth.clone();
        for (i, cell) in perturbed.cells.iter_mut().enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            cell.free_flow_mph *= 1.0 + 0.1 * sign;
            cell.wave_speed_mph *= 1.0 - 0.1 * sign;
            cell.max_flow_vph *= 1.0 + 0.1 * sign;
            cell.critical_density_vpm = cell.max_flow_vph / cell.free_flow_mph;
            cell.jam_density_vpm =
                cell.critical_density_vpm + cell.max_flow_vph / cell.wave_speed_mph;
        }
        perturbed
    }

    #[test]
    fn refine_recovers_slopes_from_perturbed_truth() {
        let (truth, _, data) = synthetic_setup();
        let perturbed = perturb_model(&truth);
        perturbed.validate().unwrap();
        let (refined, outcomes) =
            refine_model(&perturbed, &data, &RefineOptions::default()).unwrap();
        for (got, want) in refined.cells.iter().zip(&truth.cells) {
            let vf_err = (got.free_flow_mph - want.free_flow_mph).abs() / want.free_flow_mph;
            let wc_err = (got.wave_speed_mph - want.wave_speed_mph).abs() / want.wave_speed_mph;
            assert!(vf_err < 0.05, "free-flow speed off by {vf_err:.4}");
            assert!(wc_err < 0.05, "wave speed off by {wc_err:.4}");
        }
        for o in &outcomes {
            assert!(o.final_objective <= o.initial_objective);
        }
    }

    #[test]
    fn two_step_pipeline_tracks_densities() {
        // Full pipeline from scratch: least-squares initials, refinement,
        // then the re-simulated densities stay within 10% per cell.
        let (truth, series, _) = synthetic_setup();
        let geometry = SegmentGeometry {
            dt_seconds: truth.dt_seconds,
            cells: truth
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| CellTemplate {
                    station: format!("s{i}"),
                    length_miles: c.length_miles,
                    diverge: c.diverge,
                    on_ramp: c.on_ramp,
                    off_ramp: c.off_ramp,
                })
                .collect(),
        };
        let boundary = fixtures::calibration_boundary_input(480);
        let result =
            calibrate_two_step(&geometry, &series, &boundary, &RefineOptions::default()).unwrap();
        for m in &result.metrics {
            assert!(m.mape_pct < 10.0, "cell {} density MAPE {:.2}%", m.cell, m.mape_pct);
            assert!(m.final_objective <= m.initial_objective);
        }
        result.model.validate().unwrap();
    }

    #[test]
    fn calibrate_two_step_is_deterministic() {
        let (truth, series, _) = synthetic_setup();
        let geometry = SegmentGeometry {
            dt_seconds: truth.dt_seconds,
            cells: truth
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| CellTemplate {
                    station: format!("s{i}"),
                    length_miles: c.length_miles,
                    diverge: c.diverge,
                    on_ramp: c.on_ramp,
                    off_ramp: c.off_ramp,
                })
                .collect(),
        };
        let boundary = fixtures::calibration_boundary_input(480);
        let opts = RefineOptions {
            max_evaluations: 60,
            ..RefineOptions::default()
        };
        let a = calibrate_two_step(&geometry, &series, &boundary, &opts).unwrap();
        let b = calibrate_two_step(&geometry, &series, &boundary, &opts).unwrap();
        assert_eq!(a, b);
        for m in &a.metrics {
            assert!(m.final_objective <= m.initial_objective);
        }
    }

    #[test]
    fn station_csv_round_trip_and_assembly() {
        let (truth, series, _) = synthetic_setup();
        let start = DateTime::parse_from_rfc3339(fixtures::FIXTURE_START_RFC3339)
            .unwrap()
            .with_timezone(&Utc);
        let mut stations = BTreeMap::new();
        for (i, s) in series.iter().enumerate() {
            stations.insert(
                format!("s{i}"),
                StationSeries {
                    timestamps: (0..s.len())
                        .map(|k| start + chrono::Duration::seconds(30 * k as i64))
                        .collect(),
                    series: s.clone(),
                },
            );
        }
        let mut buf = Vec::new();
        write_station_csv(&stations, &mut buf).unwrap();
        let back = read_station_csv(buf.as_slice(), None).unwrap();
        assert_eq!(stations, back);

        let geometry = SegmentGeometry {
            dt_seconds: truth.dt_seconds,
            cells: truth
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| CellTemplate {
                    station: format!("s{i}"),
                    length_miles: c.length_miles,
                    diverge: c.diverge,
                    on_ramp: c.on_ramp,
                    off_ramp: c.off_ramp,
                })
                .collect(),
        };
        let assembled = assemble_cell_series(&geometry, &stations).unwrap();
        assert_eq!(assembled, series);

        let mut missing = geometry.clone();
        missing.cells[2].station = "nope".into();
        assert!(matches!(
            assemble_cell_series(&missing, &stations),
            Err(CalibError::MissingStation(_))
        ));
    }

    #[test]
    fn station_csv_occupancy_header_converts() {
        let csv_text = "station,timestamp,flow_vph,occupancy,speed_mph\n\
                        s0,2020-02-03T05:00:00Z,1200,0.1,60\n";
        let stations = read_station_csv(csv_text.as_bytes(), Some(0.004)).unwrap();
        assert!(approx(stations["s0"].series.density_vpm[0], 25.0, 1e-12));
        let bad = "station,timestamp,flow_vph,volume,speed_mph\ns0,2020-02-03T05:00:00Z,1,1,1\n";
        assert!(read_station_csv(bad.as_bytes(), None).is_err());
    }
}
