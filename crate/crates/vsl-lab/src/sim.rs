//! Density-based cell transmission simulation with speed-limit caps.
//!
//! A freeway segment is a chain of cells, each carrying a trapezoidal
//! flow-density diagram. Per step the simulator computes every sending and
//! receiving capacity from the current densities (a synchronous explicit
//! scheme), takes interface flows as their minimum, applies measured
//! boundary conditions, and advances the densities by mass balance. Posted
//! speed limits tilt the free branch and cap the attainable flow.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack allowed when checking the flow cap against the two
/// branch intersections of the trapezoid.
pub const FEASIBILITY_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cell {index}: {reason}")]
    InvalidCell { index: usize, reason: String },
    #[error("invalid segment model: {0}")]
    InvalidModel(String),
    #[error("speed limit must be positive, got {0}")]
    NonPositiveLimit(f64),
    #[error("boundary input is inconsistent: {0}")]
    InvalidInput(String),
    #[error("horizon {horizon} exceeds input length {available}")]
    HorizonMismatch { horizon: usize, available: usize },
    #[error("invalid initial densities: {0}")]
    InvalidInitial(String),
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-cell geometry and fundamental-diagram parameters.
///
/// Lengths are miles, speeds mph, flows veh/h, densities veh/mile
/// aggregated across the general-purpose lanes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub length_miles: f64,
    pub free_flow_mph: f64,
    pub wave_speed_mph: f64,
    pub max_flow_vph: f64,
    pub critical_density_vpm: f64,
    pub jam_density_vpm: f64,
    /// Diverge-segment indicator, feeds the risk model's DS feature.
    #[serde(default)]
    pub diverge: bool,
    #[serde(default)]
    pub on_ramp: bool,
    #[serde(default)]
    pub off_ramp: bool,
}

impl CellParams {
    pub fn validate(&self, dt_hours: f64) -> Result<(), String> {
        if !(self.length_miles > 0.0) {
            return Err(format!("length must be positive, got {}", self.length_miles));
        }
        if !(self.free_flow_mph > 0.0)
            || !(self.wave_speed_mph > 0.0)
            || !(self.max_flow_vph > 0.0)
        {
            return Err("free-flow speed, wave speed, and max flow must be positive".into());
        }
        if !(self.critical_density_vpm > 0.0)
            || !(self.critical_density_vpm < self.jam_density_vpm)
        {
            return Err(format!(
                "need 0 < critical density < jam density, got {} and {}",
                self.critical_density_vpm, self.jam_density_vpm
            ));
        }
        if self.length_miles < self.free_flow_mph * dt_hours {
            return Err(format!(
                "cell length {} mi is shorter than the free-flow travel distance {} mi per step",
                self.length_miles,
                self.free_flow_mph * dt_hours
            ));
        }
        let free_cap = self.free_flow_mph * self.critical_density_vpm;
        let wave_cap = self.wave_speed_mph * (self.jam_density_vpm - self.critical_density_vpm);
        if self.max_flow_vph > free_cap * (1.0 + FEASIBILITY_TOL) {
            return Err(format!(
                "max flow {} exceeds free-branch cap {free_cap}",
                self.max_flow_vph
            ));
        }
        if self.max_flow_vph > wave_cap * (1.0 + FEASIBILITY_TOL) {
            return Err(format!(
                "max flow {} exceeds congestion-branch cap {wave_cap}",
                self.max_flow_vph
            ));
        }
        Ok(())
    }
}

/// An ordered chain of cells sharing one simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentModel {
    pub dt_seconds: f64,
    pub cells: Vec<CellParams>,
}

impl SegmentModel {
    pub fn dt_hours(&self) -> f64 {
        self.dt_seconds / 3600.0
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Uncontrolled speed limit per cell (the free-flow speed).
    pub fn free_flow_limits(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.free_flow_mph).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_seconds > 0.0) {
            return Err(SimError::InvalidModel(format!(
                "dt_seconds must be positive, got {}",
                self.dt_seconds
            )));
        }
        if self.cells.is_empty() {
            return Err(SimError::InvalidModel("model needs at least one cell".into()));
        }
        for (index, cell) in self.cells.iter().enumerate() {
            cell.validate(self.dt_hours())
                .map_err(|reason| SimError::InvalidCell { index, reason })?;
        }
        Ok(())
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self, SimError> {
        let model: SegmentModel = serde_json::from_reader(reader)
            .map_err(|e| SimError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json_writer<W: Write>(&self, writer: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| SimError::InvalidModel(e.to_string()))?;
        Ok(())
    }
}

/// Simulator state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub step: usize,
    pub densities: Vec<f64>,
    pub limits: Vec<f64>,
}

/// Measured boundary series plus per-cell ramp flows, indexed `[cell][step]`
/// for the ramps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryInput {
    pub upstream_flow_vph: Vec<f64>,
    pub upstream_density_vpm: Vec<f64>,
    pub downstream_flow_vph: Vec<f64>,
    pub downstream_density_vpm: Vec<f64>,
    pub on_ramps_vph: Vec<Vec<f64>>,
    pub off_ramps_vph: Vec<Vec<f64>>,
}

impl BoundaryInput {
    /// All-zero input for `n_cells` cells over `steps` steps.
    pub fn zeros(n_cells: usize, steps: usize) -> Self {
        BoundaryInput {
            upstream_flow_vph: vec![0.0; steps],
            upstream_density_vpm: vec![0.0; steps],
            downstream_flow_vph: vec![0.0; steps],
            downstream_density_vpm: vec![0.0; steps],
            on_ramps_vph: vec![vec![0.0; steps]; n_cells],
            off_ramps_vph: vec![vec![0.0; steps]; n_cells],
        }
    }

    pub fn len(&self) -> usize {
        self.upstream_flow_vph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upstream_flow_vph.is_empty()
    }

    pub fn validate(&self, n_cells: usize) -> Result<(), SimError> {
        let steps = self.len();
        let series = [
            ("upstream_density", self.upstream_density_vpm.len()),
            ("downstream_flow", self.downstream_flow_vph.len()),
            ("downstream_density", self.downstream_density_vpm.len()),
        ];
        for (name, len) in series {
            if len != steps {
                return Err(SimError::InvalidInput(format!(
                    "{name} has {len} steps, expected {steps}"
                )));
            }
        }
        if self.on_ramps_vph.len() != n_cells || self.off_ramps_vph.len() != n_cells {
            return Err(SimError::InvalidInput(format!(
                "ramp series cover {} cells, expected {n_cells}",
                self.on_ramps_vph.len()
            )));
        }
        for (i, ramp) in self.on_ramps_vph.iter().chain(&self.off_ramps_vph).enumerate() {
            if ramp.len() != steps {
                return Err(SimError::InvalidInput(format!(
                    "ramp series {i} has {} steps, expected {steps}",
                    ramp.len()
                )));
            }
        }
        let negative = self
            .upstream_flow_vph
            .iter()
            .chain(&self.downstream_flow_vph)
            .chain(self.on_ramps_vph.iter().flatten())
            .chain(self.off_ramps_vph.iter().flatten())
            .any(|&q| q < 0.0 || !q.is_finite());
        if negative {
            return Err(SimError::InvalidInput(
                "flows must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Reads the one-row-per-step CSV
    /// `step,upstream_flow_vph,upstream_density_vpm,downstream_flow_vph,downstream_density_vpm,on_ramp_1_vph,..,off_ramp_1_vph,..`.
    pub fn read_csv<R: Read>(reader: R, n_cells: usize) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let expected_fields = 5 + 2 * n_cells;
        let mut input = BoundaryInput {
            on_ramps_vph: vec![Vec::new(); n_cells],
            off_ramps_vph: vec![Vec::new(); n_cells],
            ..BoundaryInput::default()
        };
        for (row_idx, record) in rdr.records().enumerate() {
            let line = row_idx + 2; // header occupies line 1
            let record = record.map_err(|e| SimError::CsvParse {
                line,
                reason: e.to_string(),
            })?;
            if record.len() != expected_fields {
                return Err(SimError::CsvParse {
                    line,
                    reason: format!("expected {expected_fields} fields, got {}", record.len()),
                });
            }
            let field = |idx: usize| -> Result<f64, SimError> {
                record[idx].trim().parse::<f64>().map_err(|e| SimError::CsvParse {
                    line,
                    reason: format!("field {}: {e}", idx + 1),
                })
            };
            let step: usize = record[0].trim().parse().map_err(|e| SimError::CsvParse {
                line,
                reason: format!("step column: {e}"),
            })?;
            if step != row_idx {
                return Err(SimError::CsvParse {
                    line,
                    reason: format!("expected step {row_idx}, got {step}"),
                });
            }
            input.upstream_flow_vph.push(field(1)?);
            input.upstream_density_vpm.push(field(2)?);
            input.downstream_flow_vph.push(field(3)?);
            input.downstream_density_vpm.push(field(4)?);
            for cell in 0..n_cells {
                input.on_ramps_vph[cell].push(field(5 + cell)?);
            }
            for cell in 0..n_cells {
                input.off_ramps_vph[cell].push(field(5 + n_cells + cell)?);
            }
        }
        if input.is_empty() {
            return Err(SimError::InvalidInput("boundary CSV has no data rows".into()));
        }
        input.validate(n_cells)?;
        Ok(input)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let n_cells = self.on_ramps_vph.len();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![
            "step".to_string(),
            "upstream_flow_vph".to_string(),
            "upstream_density_vpm".to_string(),
            "downstream_flow_vph".to_string(),
            "downstream_density_vpm".to_string(),
        ];
        for cell in 1..=n_cells {
            header.push(format!("on_ramp_{cell}_vph"));
        }
        for cell in 1..=n_cells {
            header.push(format!("off_ramp_{cell}_vph"));
        }
        wtr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![
                k.to_string(),
                self.upstream_flow_vph[k].to_string(),
                self.upstream_density_vpm[k].to_string(),
                self.downstream_flow_vph[k].to_string(),
                self.downstream_density_vpm[k].to_string(),
            ];
            for cell in 0..n_cells {
                row.push(self.on_ramps_vph[cell][k].to_string());
            }
            for cell in 0..n_cells {
                row.push(self.off_ramps_vph[cell][k].to_string());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Full record of one simulation run.
///
/// Row `k` of `densities`/`speeds`/`limits` describes step `k`; `flows[k]`
/// holds the `n + 1` interface flows realised during step `k` (index `i` is
/// the flow entering cell `i`, index `n` the flow leaving the segment).
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrajectory {
    pub dt_seconds: f64,
    pub cell_lengths_miles: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
    pub flows: Vec<Vec<f64>>,
    pub speeds: Vec<Vec<f64>>,
    pub limits: Vec<Vec<f64>>,
    pub final_densities: Vec<f64>,
    /// Number of density updates that had to be clamped back into
    /// `[0, jam density]`; nonzero only for infeasible ramp inputs.
    pub clamp_events: usize,
}

impl SimTrajectory {
    pub fn horizon(&self) -> usize {
        self.flows.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_lengths_miles.len()
    }

    /// Writes the long-format CSV `step,cell,density_vpm,flow_vph,speed_mph,limit_mph`
    /// with `flow_vph` being the flow entering the cell. Cells are 1-based.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "step",
            "cell",
            "density_vpm",
            "flow_vph",
            "speed_mph",
            "limit_mph",
        ])?;
        for k in 0..self.horizon() {
            for i in 0..self.n_cells() {
                wtr.write_record(&[
                    k.to_string(),
                    (i + 1).to_string(),
                    self.densities[k][i].to_string(),
                    self.flows[k][i].to_string(),
                    self.speeds[k][i].to_string(),
                    self.limits[k][i].to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Vehicles on the segment at the start of step `k` (or after the last
    /// step for `k == horizon`).
    pub fn vehicles_at(&self, k: usize) -> f64 {
        let densities = if k == self.horizon() {
            &self.final_densities
        } else {
            &self.densities[k]
        };
        densities
            .iter()
            .zip(&self.cell_lengths_miles)
            .map(|(rho, l)| rho * l)
            .sum()
    }
}

/// Flow cap and its density under a posted limit.
///
/// At or above the free-flow speed the limit is inactive and the cap is the
/// cell's own maximum. Below it, the cap sits where the limit line
/// `q = V rho` meets the congestion branch `q = w (rho_j - rho)`.
pub fn max_flow_under_limit(cell: &CellParams, limit_mph: f64) -> Result<(f64, f64), SimError> {
    if !(limit_mph > 0.0) {
        return Err(SimError::NonPositiveLimit(limit_mph));
    }
    Ok(limit_caps(cell, limit_mph))
}

/// Sending capacity of a cell, net of its off-ramp flow. Never negative.
pub fn sending(cell: &CellParams, density: f64, off_ramp_vph: f64, limit_mph: f64) -> f64 {
    let (q_cap, _) = limit_caps(cell, limit_mph);
    let demand = limit_mph.min(cell.free_flow_mph) * density;
    (demand - off_ramp_vph).min(q_cap - off_ramp_vph).max(0.0)
}

/// Receiving capacity of a cell, net of its on-ramp flow. Never negative.
pub fn receiving(cell: &CellParams, density: f64, on_ramp_vph: f64, limit_mph: f64) -> f64 {
    let (q_cap, _) = limit_caps(cell, limit_mph);
    let space = cell.wave_speed_mph * (cell.jam_density_vpm - density);
    (q_cap - on_ramp_vph).min(space - on_ramp_vph).max(0.0)
}

/// Realised interface flow between neighbouring cells.
pub fn interface_flow(sending_vph: f64, receiving_vph: f64) -> f64 {
    sending_vph.min(receiving_vph)
}

/// Speed within a cell given its density and the limit posted in the
/// previous step.
pub fn cell_speed(cell: &CellParams, density: f64, prev_limit_mph: f64) -> f64 {
    let (_, rho_cap) = limit_caps(cell, prev_limit_mph);
    if density <= rho_cap {
        cell.free_flow_mph.min(prev_limit_mph)
    } else {
        cell.wave_speed_mph * (cell.jam_density_vpm - density) / density
    }
}

/// Infallible core of [`max_flow_under_limit`] for validated limits.
fn limit_caps(cell: &CellParams, limit_mph: f64) -> (f64, f64) {
    if limit_mph >= cell.free_flow_mph {
        (cell.max_flow_vph, cell.critical_density_vpm)
    } else {
        let rho = cell.wave_speed_mph * cell.jam_density_vpm / (limit_mph + cell.wave_speed_mph);
        ((limit_mph * rho).min(cell.max_flow_vph), rho)
    }
}

/// Boundary flows for step `k`: the flow entering the first cell and the
/// flow leaving the last. The unbounded sentinel used for uncongested
/// boundaries never escapes the enclosing `min`.
pub fn boundary_flows(
    model: &SegmentModel,
    densities: &[f64],
    limits: &[f64],
    input: &BoundaryInput,
    k: usize,
) -> (f64, f64) {
    let n = model.n_cells();
    let first = &model.cells[0];
    let last = &model.cells[n - 1];

    let upstream_supply = if input.upstream_density_vpm[k] <= first.critical_density_vpm {
        input.upstream_flow_vph[k]
    } else {
        f64::INFINITY
    };
    let r_first = receiving(first, densities[0], input.on_ramps_vph[0][k], limits[0]);
    let q_in = upstream_supply.min(r_first);

    let downstream_demand = if input.downstream_density_vpm[k] <= last.critical_density_vpm {
        f64::INFINITY
    } else {
        input.downstream_flow_vph[k]
    };
    let s_last = sending(
        last,
        densities[n - 1],
        input.off_ramps_vph[n - 1][k],
        limits[n - 1],
    );
    let q_out = s_last.min(downstream_demand);

    debug_assert!(q_in.is_finite() && q_out.is_finite());
    (q_in, q_out)
}

/// All `n + 1` interface flows for step `k` from the step-`k` densities.
pub fn compute_flows(
    model: &SegmentModel,
    densities: &[f64],
    limits: &[f64],
    input: &BoundaryInput,
    k: usize,
) -> Vec<f64> {
    let n = model.n_cells();
    let mut flows = vec![0.0; n + 1];
    let (q_in, q_out) = boundary_flows(model, densities, limits, input, k);
    flows[0] = q_in;
    flows[n] = q_out;
    for i in 1..n {
        let s = sending(
            &model.cells[i - 1],
            densities[i - 1],
            input.off_ramps_vph[i - 1][k],
            limits[i - 1],
        );
        let r = receiving(&model.cells[i], densities[i], input.on_ramps_vph[i][k], limits[i]);
        flows[i] = interface_flow(s, r);
    }
    flows
}

/// One mass-balance update; returns the next densities and the number of
/// clamp events.
fn update_densities(
    model: &SegmentModel,
    densities: &[f64],
    flows: &[f64],
    input: &BoundaryInput,
    k: usize,
) -> (Vec<f64>, usize) {
    let dt = model.dt_hours();
    let mut clamps = 0;
    let next = model
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let balance =
                flows[i] - flows[i + 1] + input.on_ramps_vph[i][k] - input.off_ramps_vph[i][k];
            let raw = densities[i] + dt / cell.length_miles * balance;
            let clamped = raw.clamp(0.0, cell.jam_density_vpm);
            if clamped != raw {
                clamps += 1;
            }
            clamped
        })
        .collect();
    (next, clamps)
}

/// Advances one step; flows are computed from the current densities before
/// any density is written. Returns the next state plus the step's flows,
/// speeds, and clamp count.
pub fn step(
    model: &SegmentModel,
    state: &SimState,
    input: &BoundaryInput,
    prev_limits: &[f64],
) -> Result<(SimState, Vec<f64>, Vec<f64>, usize), SimError> {
    let k = state.step;
    if k >= input.len() {
        return Err(SimError::HorizonMismatch {
            horizon: k + 1,
            available: input.len(),
        });
    }
    for &v in &state.limits {
        if !(v > 0.0) {
            return Err(SimError::NonPositiveLimit(v));
        }
    }
    let speeds: Vec<f64> = model
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| cell_speed(cell, state.densities[i], prev_limits[i]))
        .collect();
    let flows = compute_flows(model, &state.densities, &state.limits, input, k);
    let (next, clamps) = update_densities(model, &state.densities, &flows, input, k);
    Ok((
        SimState {
            step: k + 1,
            densities: next,
            limits: state.limits.clone(),
        },
        flows,
        speeds,
        clamps,
    ))
}

/// Supplies the per-cell speed limits for each step.
///
/// Implementations see the trajectory built so far (steps `0..k`), so a
/// controller can derive features from recent flows and speeds.
pub trait LimitPolicy {
    fn limits(&mut self, step: usize, densities: &[f64], history: &SimTrajectory) -> Vec<f64>;
}

/// No control: every cell runs at its free-flow speed.
pub struct Uncontrolled {
    limits: Vec<f64>,
}

impl Uncontrolled {
    pub fn new(model: &SegmentModel) -> Self {
        Uncontrolled {
            limits: model.free_flow_limits(),
        }
    }
}

impl LimitPolicy for Uncontrolled {
    fn limits(&mut self, _step: usize, _densities: &[f64], _history: &SimTrajectory) -> Vec<f64> {
        self.limits.clone()
    }
}

/// The same limits at every step.
pub struct FixedLimits(pub Vec<f64>);

impl LimitPolicy for FixedLimits {
    fn limits(&mut self, _step: usize, _densities: &[f64], _history: &SimTrajectory) -> Vec<f64> {
        self.0.clone()
    }
}

/// A precomputed per-step limit schedule.
pub struct LimitSchedule(pub Vec<Vec<f64>>);

impl LimitPolicy for LimitSchedule {
    fn limits(&mut self, step: usize, _densities: &[f64], _history: &SimTrajectory) -> Vec<f64> {
        self.0[step].clone()
    }
}

/// Runs the model for `horizon` steps from the given initial densities.
pub fn simulate<P: LimitPolicy>(
    model: &SegmentModel,
    input: &BoundaryInput,
    initial_densities: &[f64],
    policy: &mut P,
    horizon: usize,
) -> Result<SimTrajectory, SimError> {
    model.validate()?;
    let n = model.n_cells();
    input.validate(n)?;
    if horizon == 0 || horizon > input.len() {
        return Err(SimError::HorizonMismatch {
            horizon,
            available: input.len(),
        });
    }
    if initial_densities.len() != n {
        return Err(SimError::InvalidInitial(format!(
            "expected {n} densities, got {}",
            initial_densities.len()
        )));
    }
    for (i, (&rho, cell)) in initial_densities.iter().zip(&model.cells).enumerate() {
        if !(0.0..=cell.jam_density_vpm).contains(&rho) {
            return Err(SimError::InvalidInitial(format!(
                "density {rho} of cell {i} outside [0, {}]",
                cell.jam_density_vpm
            )));
        }
    }

    let mut traj = SimTrajectory {
        dt_seconds: model.dt_seconds,
        cell_lengths_miles: model.cells.iter().map(|c| c.length_miles).collect(),
        densities: Vec::with_capacity(horizon),
        flows: Vec::with_capacity(horizon),
        speeds: Vec::with_capacity(horizon),
        limits: Vec::with_capacity(horizon),
        final_densities: Vec::new(),
        clamp_events: 0,
    };

    let mut densities = initial_densities.to_vec();
    for k in 0..horizon {
        let limits = policy.limits(k, &densities, &traj);
        if limits.len() != n {
            return Err(SimError::InvalidInput(format!(
                "policy returned {} limits for {n} cells",
                limits.len()
            )));
        }
        for &v in &limits {
            if !(v > 0.0) {
                return Err(SimError::NonPositiveLimit(v));
            }
        }
        let prev_limits: &[f64] = if k == 0 { &limits } else { &traj.limits[k - 1] };
        let speeds: Vec<f64> = model
            .cells
            .iter()
            .enumerate()
            .map(|(i, cell)| cell_speed(cell, densities[i], prev_limits[i]))
            .collect();
        let flows = compute_flows(model, &densities, &limits, input, k);
        let (next, clamps) = update_densities(model, &densities, &flows, input, k);
        traj.clamp_events += clamps;
        traj.densities.push(densities);
        traj.flows.push(flows);
        traj.speeds.push(speeds);
        traj.limits.push(limits);
        densities = next;
    }
    traj.final_densities = densities;
    Ok(traj)
}
