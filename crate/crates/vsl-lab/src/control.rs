//! Threshold-triggered stepwise speed-limit controller.
//!
//! Four factors govern it: the start threshold R on the risk value, the
//! control cycle T, the per-cycle speed change step, and the maximum gap
//! allowed between adjacent signs. On each cycle boundary every sign moves
//! one step towards the floor (risk at or above R) or back towards its
//! default (risk below R), then the spatial clamp lowers whatever violates
//! the adjacent-gap bound, then the result is rounded down to the display
//! quantum. Between cycle boundaries the state is untouched.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::exceeds_threshold;

/// Risk value at which control engages, from the clustering of observed
/// risk levels. Signs activate at or above it.
pub const DEFAULT_START_THRESHOLD: f64 = 0.2;

/// Factor bounds searched by the optimizer.
pub const CYCLE_BOUNDS_SECONDS: (f64, f64) = (30.0, 300.0);
pub const STEP_BOUNDS_MPH: (f64, f64) = (1.0, 20.0);
pub const ADJACENT_BOUNDS_MPH: (f64, f64) = (1.0, 20.0);

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control factors: {0}")]
    InvalidFactors(String),
    #[error("invalid sign layout: {0}")]
    InvalidLayout(String),
    #[error("cycle of {cycle_seconds}s is not a multiple of the {dt_seconds}s step")]
    CycleNotMultiple { cycle_seconds: f64, dt_seconds: f64 },
    #[error("expected {expected} risk values, got {got}")]
    RiskCount { expected: usize, got: usize },
    #[error("json error: {0}")]
    Json(String),
}

/// The four control factors. The start threshold may be `+inf` as an
/// explicit never-trigger sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlFactors {
    pub start_threshold: f64,
    pub cycle_seconds: f64,
    pub step_mph: f64,
    pub adjacent_clamp_mph: f64,
}

impl ControlFactors {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.start_threshold.is_nan() {
            return Err(ControlError::InvalidFactors("start threshold is NaN".into()));
        }
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !in_range(self.cycle_seconds, CYCLE_BOUNDS_SECONDS) {
            return Err(ControlError::InvalidFactors(format!(
                "cycle {}s outside [{}, {}]s",
                self.cycle_seconds, CYCLE_BOUNDS_SECONDS.0, CYCLE_BOUNDS_SECONDS.1
            )));
        }
        if !in_range(self.step_mph, STEP_BOUNDS_MPH) {
            return Err(ControlError::InvalidFactors(format!(
                "speed change step {} mph outside [{}, {}]",
                self.step_mph, STEP_BOUNDS_MPH.0, STEP_BOUNDS_MPH.1
            )));
        }
        if !in_range(self.adjacent_clamp_mph, ADJACENT_BOUNDS_MPH) {
            return Err(ControlError::InvalidFactors(format!(
                "adjacent clamp {} mph outside [{}, {}]",
                self.adjacent_clamp_mph, ADJACENT_BOUNDS_MPH.0, ADJACENT_BOUNDS_MPH.1
            )));
        }
        Ok(())
    }
}

/// A sign position and the limit it shows when control is idle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignSpec {
    /// Cell index the sign governs, 0-based.
    pub cell: usize,
    pub default_mph: f64,
}

/// Where the signs stand and how low they may go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignLayout {
    pub signs: Vec<SignSpec>,
    pub floor_mph: f64,
}

impl SignLayout {
    /// One sign per cell, a common default limit, and a common floor.
    pub fn uniform(n_cells: usize, default_mph: f64, floor_mph: f64) -> Self {
        SignLayout {
            signs: (0..n_cells)
                .map(|cell| SignSpec {
                    cell,
                    default_mph,
                })
                .collect(),
            floor_mph,
        }
    }

    pub fn sign_count(&self) -> usize {
        self.signs.len()
    }

    pub fn sign_cells(&self) -> Vec<usize> {
        self.signs.iter().map(|s| s.cell).collect()
    }

    pub fn validate(&self, n_cells: usize) -> Result<(), ControlError> {
        if self.signs.is_empty() {
            return Err(ControlError::InvalidLayout("layout needs at least one sign".into()));
        }
        if !(self.floor_mph > 0.0) {
            return Err(ControlError::InvalidLayout(format!(
                "floor must be positive, got {}",
                self.floor_mph
            )));
        }
        let mut prev: Option<usize> = None;
        for sign in &self.signs {
            if sign.cell >= n_cells {
                return Err(ControlError::InvalidLayout(format!(
                    "sign cell {} outside the {n_cells}-cell segment",
                    sign.cell
                )));
            }
            if let Some(p) = prev {
                if sign.cell <= p {
                    return Err(ControlError::InvalidLayout(
                        "sign cells must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(sign.cell);
            if sign.default_mph <= self.floor_mph {
                return Err(ControlError::InvalidLayout(format!(
                    "default {} mph must exceed the floor {} mph",
                    sign.default_mph, self.floor_mph
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self, ControlError> {
        serde_json::from_reader(reader).map_err(|e| ControlError::Json(e.to_string()))
    }

    pub fn to_json_writer<W: Write>(&self, writer: W) -> Result<(), ControlError> {
        serde_json::to_writer_pretty(writer, self).map_err(|e| ControlError::Json(e.to_string()))
    }
}

/// Whether each sign answers to its own cell's risk or all signs share the
/// segment-wide maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    #[default]
    PerSign,
    GlobalMax,
}

/// Posted limits plus cycle bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub posted_mph: Vec<f64>,
    pub steps_since_cycle: usize,
    pub active: bool,
}

/// What a cycle-boundary tick did, for audit traces.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub step: usize,
    pub risks: Vec<f64>,
    pub targets_mph: Vec<f64>,
    pub posted_mph: Vec<f64>,
}

/// Per-sign raw targets before spatial smoothing: one step down at or above
/// the threshold, one step back towards the default below it.
pub fn compute_targets(
    risks: &[f64],
    posted: &[f64],
    layout: &SignLayout,
    factors: &ControlFactors,
) -> Vec<f64> {
    posted
        .iter()
        .enumerate()
        .map(|(i, &current)| {
            let default = layout.signs[i].default_mph;
            if exceeds_threshold(risks[i], factors.start_threshold) {
                (current - factors.step_mph).max(layout.floor_mph)
            } else if current < default {
                (current + factors.step_mph).min(default)
            } else {
                current
            }
        })
        .collect()
}

/// Lowers targets until every adjacent pair differs by at most `max_gap`.
///
/// Iterates `v[i] <- min(target[i], v[i-1] + gap, v[i+1] + gap)` to its
/// unique fixpoint; values only move down, never above the raw target.
pub fn smooth_adjacent(targets: &[f64], max_gap_mph: f64) -> Vec<f64> {
    let mut current = targets.to_vec();
    for _ in 0..targets.len() {
        let mut next = current.clone();
        for i in 0..current.len() {
            let mut cap = targets[i];
            if i > 0 {
                cap = cap.min(current[i - 1] + max_gap_mph);
            }
            if i + 1 < current.len() {
                cap = cap.min(current[i + 1] + max_gap_mph);
            }
            next[i] = cap;
        }
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// The controller owned by one simulation run.
#[derive(Debug, Clone)]
pub struct VslController {
    pub layout: SignLayout,
    pub factors: ControlFactors,
    pub trigger: TriggerMode,
    /// Display resolution; posted limits are rounded down to multiples of it.
    pub quantum_mph: f64,
    cycle_steps: usize,
    state: ControllerState,
}

impl VslController {
    pub fn new(
        layout: SignLayout,
        factors: ControlFactors,
        dt_seconds: f64,
        quantum_mph: f64,
        trigger: TriggerMode,
    ) -> Result<Self, ControlError> {
        factors.validate()?;
        if layout.signs.is_empty() {
            return Err(ControlError::InvalidLayout("layout needs at least one sign".into()));
        }
        let ratio = factors.cycle_seconds / dt_seconds;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(ControlError::CycleNotMultiple {
                cycle_seconds: factors.cycle_seconds,
                dt_seconds,
            });
        }
        if !(quantum_mph > 0.0) {
            return Err(ControlError::InvalidFactors(format!(
                "display quantum must be positive, got {quantum_mph}"
            )));
        }
        let on_grid = |v: f64| ((v / quantum_mph) - (v / quantum_mph).round()).abs() < 1e-9;
        if !on_grid(layout.floor_mph) {
            return Err(ControlError::InvalidLayout(format!(
                "floor {} mph is not a multiple of the {quantum_mph} mph quantum",
                layout.floor_mph
            )));
        }
        for sign in &layout.signs {
            if !on_grid(sign.default_mph) {
                return Err(ControlError::InvalidLayout(format!(
                    "default {} mph is not a multiple of the {quantum_mph} mph quantum",
                    sign.default_mph
                )));
            }
        }
        let posted = layout.signs.iter().map(|s| s.default_mph).collect();
        Ok(VslController {
            cycle_steps: ratio.round() as usize,
            state: ControllerState {
                posted_mph: posted,
                steps_since_cycle: 0,
                active: false,
            },
            layout,
            factors,
            trigger,
            quantum_mph,
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn cycle_steps(&self) -> usize {
        self.cycle_steps
    }

    /// Advances one simulation step. Only cycle boundaries (step index a
    /// multiple of the cycle) change the posted limits; those ticks return
    /// a record of what happened.
    pub fn tick(&mut self, step: usize, risks: &[f64]) -> Result<Option<TickRecord>, ControlError> {
        if risks.len() != self.layout.signs.len() {
            return Err(ControlError::RiskCount {
                expected: self.layout.signs.len(),
                got: risks.len(),
            });
        }
        if step % self.cycle_steps != 0 {
            self.state.steps_since_cycle += 1;
            return Ok(None);
        }
        self.state.steps_since_cycle = 0;

        let effective_risks: Vec<f64> = match self.trigger {
            TriggerMode::PerSign => risks.to_vec(),
            TriggerMode::GlobalMax => {
                let max = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                vec![max; risks.len()]
            }
        };
        let targets = compute_targets(
            &effective_risks,
            &self.state.posted_mph,
            &self.layout,
            &self.factors,
        );
        let quantize = |values: &[f64]| -> Vec<f64> {
            values
                .iter()
                .zip(&self.layout.signs)
                .map(|(&v, sign)| {
                    let q = self.quantum_mph;
                    let quantized = ((v / q) + 1e-9).floor() * q;
                    quantized.clamp(self.layout.floor_mph, sign.default_mph)
                })
                .collect()
        };
        // Rounding down can widen an adjacent gap past the clamp when the
        // clamp is not a multiple of the display quantum, so smoothing and
        // quantization iterate to a joint fixpoint. Every pass only lowers
        // values and the floor sits on the grid, so this terminates.
        let mut posted = quantize(&smooth_adjacent(
            &targets,
            self.factors.adjacent_clamp_mph,
        ));
        loop {
            let again = quantize(&smooth_adjacent(&posted, self.factors.adjacent_clamp_mph));
            if again == posted {
                break;
            }
            posted = again;
        }
        self.state.active = posted
            .iter()
            .zip(&self.layout.signs)
            .any(|(&v, sign)| v < sign.default_mph);
        self.state.posted_mph = posted;
        Ok(Some(TickRecord {
            step,
            risks: effective_risks,
            targets_mph: targets,
            posted_mph: self.state.posted_mph.clone(),
        }))
    }
}

/// Expands sign-posted limits to per-cell effective limits.
///
/// Each cell follows the nearest sign at or upstream of it; cells upstream
/// of the first sign are uncontrolled. A sign still showing its default is
/// treated as idle and leaves its cells at free-flow speed, which makes a
/// never-triggered controller reproduce the uncontrolled run exactly.
pub fn map_limits_to_cells(
    layout: &SignLayout,
    posted_mph: &[f64],
    free_flow_mph: &[f64],
) -> Vec<f64> {
    let mut limits = free_flow_mph.to_vec();
    let mut sign_idx: Option<usize> = None;
    for (cell, limit) in limits.iter_mut().enumerate() {
        let next = sign_idx.map_or(0, |s| s + 1);
        if next < layout.signs.len() && layout.signs[next].cell == cell {
            sign_idx = Some(next);
        }
        if let Some(s) = sign_idx {
            if posted_mph[s] < layout.signs[s].default_mph {
                *limit = posted_mph[s];
            }
        }
    }
    limits
}
