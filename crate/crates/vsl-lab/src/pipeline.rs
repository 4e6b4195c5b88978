//! Detector and weather ingestion, lane-to-section aggregation, and the
//! rolling-window feature extraction feeding the risk model.
//!
//! Counts are reported in veh/5min to match the risk model's units; a flow
//! of 1200 veh/h therefore contributes a count of 100. Window statistics
//! use the sample (n-1) standard deviation. Features at step `k` are built
//! from the `window` rows strictly before `k`, so extraction is causal.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::RiskFeatures;
use crate::sim::{BoundaryInput, SegmentModel, SimTrajectory};

/// Effective vehicle length converting occupancy to density: 20 ft in miles.
pub const DEFAULT_G_FACTOR_MILES: f64 = 20.0 / 5280.0;

/// Steps per 5-minute feature window at the 30-second cadence.
pub const DEFAULT_FEATURE_WINDOW: usize = 10;

/// Gaps longer than this many steps are not imputed; the step is dropped.
pub const MAX_IMPUTED_STEPS: usize = 4;

/// Scale from veh/h to veh/5min.
const COUNT_PER_5MIN: f64 = 1.0 / 12.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("g factor must be positive, got {0}")]
    BadGFactor(f64),
    #[error("occupancy must lie in [0, 1], got {0}")]
    BadOccupancy(f64),
    #[error("no usable lane records: {0}")]
    NoLanes(String),
    #[error("weather coverage gap exceeds 2 hours at the {0} end")]
    WeatherGap(&'static str),
    #[error("weather records are empty")]
    NoWeather,
    #[error("feature window must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("step {step} needs {window} prior rows, trajectory has {available}")]
    WindowOutOfRange {
        step: usize,
        window: usize,
        available: usize,
    },
    #[error("cell {cell} outside the {n_cells}-cell segment")]
    CellOutOfRange { cell: usize, n_cells: usize },
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error("series are misaligned: {0}")]
    Misaligned(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One 30-second lane record as reported by a loop-detector station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetectorRecord {
    pub station: String,
    pub timestamp: DateTime<Utc>,
    pub lane: u32,
    /// Vehicles counted in the 30-second interval.
    pub flow: f64,
    /// Occupied fraction of the interval, in [0, 1].
    pub occupancy: f64,
    pub speed: f64,
    pub hov: bool,
}

/// Hourly visibility reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub timestamp: DateTime<Utc>,
    pub visibility_miles: f64,
}

/// Section-level series on an aligned step grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SectionSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    pub flow_vph: Vec<f64>,
    pub density_vpm: Vec<f64>,
    pub speed_mph: Vec<f64>,
    /// Filled by [`join_visibility`]; empty before the join.
    pub visibility_miles: Vec<f64>,
}

impl SectionSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// CSV `timestamp,flow_vph,density_vpm,speed_mph,visibility_miles`;
    /// the visibility column is left blank before the weather join.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PipelineError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["timestamp", "flow_vph", "density_vpm", "speed_mph", "visibility_miles"])
            .map_err(csv_io)?;
        let joined = !self.visibility_miles.is_empty();
        for i in 0..self.len() {
            wtr.write_record(&[
                self.timestamps[i].to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                self.flow_vph[i].to_string(),
                self.density_vpm[i].to_string(),
                self.speed_mph[i].to_string(),
                if joined {
                    self.visibility_miles[i].to_string()
                } else {
                    String::new()
                },
            ])
            .map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PipelineError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut series = SectionSeries::default();
        let mut any_visibility = false;
        for (row_idx, record) in rdr.records().enumerate() {
            let line = row_idx + 2;
            let record = record.map_err(|e| PipelineError::CsvParse {
                line,
                reason: e.to_string(),
            })?;
            if record.len() != 5 {
                return Err(PipelineError::CsvParse {
                    line,
                    reason: format!("expected 5 fields, got {}", record.len()),
                });
            }
            let ts = DateTime::parse_from_rfc3339(record[0].trim())
                .map_err(|e| PipelineError::CsvParse {
                    line,
                    reason: format!("timestamp: {e}"),
                })?
                .with_timezone(&Utc);
            let num = |idx: usize| -> Result<f64, PipelineError> {
                record[idx]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| PipelineError::CsvParse {
                        line,
                        reason: format!("field {}: {e}", idx + 1),
                    })
            };
            series.timestamps.push(ts);
            series.flow_vph.push(num(1)?);
            series.density_vpm.push(num(2)?);
            series.speed_mph.push(num(3)?);
            if !record[4].trim().is_empty() {
                any_visibility = true;
                series.visibility_miles.push(num(4)?);
            }
        }
        if any_visibility && series.visibility_miles.len() != series.timestamps.len() {
            return Err(PipelineError::Misaligned(
                "visibility column is only partially filled".into(),
            ));
        }
        Ok(series)
    }
}

/// Result of assembling one station's series, with imputation bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSeries {
    pub series: SectionSeries,
    pub imputed_steps: usize,
    pub dropped_steps: Vec<DateTime<Utc>>,
}

/// Converts a lane occupancy fraction to a density via the g factor.
pub fn occupancy_to_density(occupancy: f64, g_miles: f64) -> Result<f64, PipelineError> {
    if !(g_miles > 0.0) {
        return Err(PipelineError::BadGFactor(g_miles));
    }
    if !(0.0..=1.0).contains(&occupancy) {
        return Err(PipelineError::BadOccupancy(occupancy));
    }
    Ok(occupancy / g_miles)
}

/// Aggregates one station's lane records for a single interval to section
/// level: HOV lanes are dropped, flows and densities sum, and the speed is
/// the flow-weighted mean (arithmetic mean when all flows are zero).
///
/// Returns `(flow veh/h, density veh/mile, speed mph)`.
pub fn aggregate_lanes(
    records: &[RawDetectorRecord],
    g_miles: f64,
) -> Result<(f64, f64, f64), PipelineError> {
    let lanes: Vec<&RawDetectorRecord> = records.iter().filter(|r| !r.hov).collect();
    if lanes.is_empty() {
        return Err(PipelineError::NoLanes(
            "every lane in the interval is HOV-flagged".into(),
        ));
    }
    let mut flow = 0.0;
    let mut density = 0.0;
    let mut weighted_speed = 0.0;
    let mut plain_speed = 0.0;
    for lane in &lanes {
        let lane_flow_vph = lane.flow * 120.0;
        flow += lane_flow_vph;
        density += occupancy_to_density(lane.occupancy, g_miles)?;
        weighted_speed += lane_flow_vph * lane.speed;
        plain_speed += lane.speed;
    }
    let speed = if flow > 0.0 {
        weighted_speed / flow
    } else {
        plain_speed / lanes.len() as f64
    };
    Ok((flow, density, speed))
}

/// Reads the lane-level CSV `station,timestamp,lane,flow,occupancy,speed,hov`.
pub fn read_detector_csv<R: Read>(reader: R) -> Result<Vec<RawDetectorRecord>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| PipelineError::CsvParse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 7 {
            return Err(PipelineError::CsvParse {
                line,
                reason: format!("expected 7 fields, got {}", record.len()),
            });
        }
        let parse_f64 = |idx: usize| -> Result<f64, PipelineError> {
            record[idx]
                .trim()
                .parse::<f64>()
                .map_err(|e| PipelineError::CsvParse {
                    line,
                    reason: format!("field {}: {e}", idx + 1),
                })
        };
        let timestamp = DateTime::parse_from_rfc3339(record[1].trim())
            .map_err(|e| PipelineError::CsvParse {
                line,
                reason: format!("timestamp: {e}"),
            })?
            .with_timezone(&Utc);
        let lane = record[2].trim().parse::<u32>().map_err(|e| PipelineError::CsvParse {
            line,
            reason: format!("lane: {e}"),
        })?;
        let hov = match record[6].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(PipelineError::CsvParse {
                    line,
                    reason: format!("hov flag must be 0/1/true/false, got {other}"),
                })
            }
        };
        records.push(RawDetectorRecord {
            station: record[0].trim().to_string(),
            timestamp,
            lane,
            flow: parse_f64(3)?,
            occupancy: parse_f64(4)?,
            speed: parse_f64(5)?,
            hov,
        });
    }
    Ok(records)
}

pub fn write_detector_csv<W: Write>(
    records: &[RawDetectorRecord],
    writer: W,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["station", "timestamp", "lane", "flow", "occupancy", "speed", "hov"])
        .map_err(csv_io)?;
    for r in records {
        wtr.write_record(&[
            r.station.clone(),
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.lane.to_string(),
            r.flow.to_string(),
            r.occupancy.to_string(),
            r.speed.to_string(),
            if r.hov { "1".into() } else { "0".into() },
        ])
        .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the weather CSV `timestamp,visibility_miles`.
pub fn read_weather_csv<R: Read>(reader: R) -> Result<Vec<WeatherRecord>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| PipelineError::CsvParse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(PipelineError::CsvParse {
                line,
                reason: format!("expected 2 fields, got {}", record.len()),
            });
        }
        let timestamp = DateTime::parse_from_rfc3339(record[0].trim())
            .map_err(|e| PipelineError::CsvParse {
                line,
                reason: format!("timestamp: {e}"),
            })?
            .with_timezone(&Utc);
        let visibility_miles =
            record[1]
                .trim()
                .parse::<f64>()
                .map_err(|e| PipelineError::CsvParse {
                    line,
                    reason: format!("visibility: {e}"),
                })?;
        records.push(WeatherRecord {
            timestamp,
            visibility_miles,
        });
    }
    Ok(records)
}

pub fn write_weather_csv<W: Write>(
    records: &[WeatherRecord],
    writer: W,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "visibility_miles"]).map_err(csv_io)?;
    for r in records {
        wtr.write_record(&[
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.visibility_miles.to_string(),
        ])
        .map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Groups lane records into per-station section series on an aligned step
/// grid. Missing intervals are carried forward for up to
/// [`MAX_IMPUTED_STEPS`] steps, longer gaps drop the step and flag it.
pub fn assemble_station_series(
    records: &[RawDetectorRecord],
    g_miles: f64,
    dt_seconds: i64,
) -> Result<BTreeMap<String, AssembledSeries>, PipelineError> {
    let mut by_station: BTreeMap<String, BTreeMap<DateTime<Utc>, Vec<&RawDetectorRecord>>> =
        BTreeMap::new();
    for r in records {
        by_station
            .entry(r.station.clone())
            .or_default()
            .entry(r.timestamp)
            .or_default()
            .push(r);
    }
    let step = Duration::seconds(dt_seconds);
    let mut out = BTreeMap::new();
    for (station, intervals) in by_station {
        let first = *intervals.keys().next().unwrap();
        let last = *intervals.keys().last().unwrap();
        let mut series = SectionSeries::default();
        let mut imputed_steps = 0;
        let mut dropped_steps = Vec::new();
        let mut cursor = first;
        let mut gap_run = 0usize;
        let mut last_good: Option<(f64, f64, f64)> = None;
        while cursor <= last {
            match intervals.get(&cursor) {
                Some(lane_records) => {
                    let owned: Vec<RawDetectorRecord> =
                        lane_records.iter().map(|r| (*r).clone()).collect();
                    let agg = aggregate_lanes(&owned, g_miles)?;
                    gap_run = 0;
                    last_good = Some(agg);
                    push_row(&mut series, cursor, agg);
                }
                None => {
                    gap_run += 1;
                    if gap_run <= MAX_IMPUTED_STEPS {
                        if let Some(agg) = last_good {
                            imputed_steps += 1;
                            push_row(&mut series, cursor, agg);
                        } else {
                            dropped_steps.push(cursor);
                        }
                    } else {
                        dropped_steps.push(cursor);
                    }
                }
            }
            cursor += step;
        }
        out.insert(
            station,
            AssembledSeries {
                series,
                imputed_steps,
                dropped_steps,
            },
        );
    }
    Ok(out)
}

fn push_row(series: &mut SectionSeries, ts: DateTime<Utc>, (flow, density, speed): (f64, f64, f64)) {
    series.timestamps.push(ts);
    series.flow_vph.push(flow);
    series.density_vpm.push(density);
    series.speed_mph.push(speed);
}

/// Attaches the nearest-in-time visibility reading to every step. Ties go
/// to the earlier record. Weather must reach within 2 hours of both ends
/// of the series.
pub fn join_visibility(
    series: &SectionSeries,
    weather: &[WeatherRecord],
) -> Result<SectionSeries, PipelineError> {
    if weather.is_empty() {
        return Err(PipelineError::NoWeather);
    }
    let mut sorted: Vec<&WeatherRecord> = weather.iter().collect();
    sorted.sort_by_key(|r| r.timestamp);
    if series.is_empty() {
        let mut joined = series.clone();
        joined.visibility_miles = Vec::new();
        return Ok(joined);
    }
    let max_gap = Duration::hours(2);
    let start = series.timestamps[0];
    let end = *series.timestamps.last().unwrap();
    if sorted[0].timestamp > start + max_gap {
        return Err(PipelineError::WeatherGap("start"));
    }
    if sorted.last().unwrap().timestamp < end - max_gap {
        return Err(PipelineError::WeatherGap("end"));
    }
    let mut joined = series.clone();
    joined.visibility_miles = series
        .timestamps
        .iter()
        .map(|ts| nearest_visibility(&sorted, *ts))
        .collect();
    Ok(joined)
}

fn nearest_visibility(sorted: &[&WeatherRecord], ts: DateTime<Utc>) -> f64 {
    let mut best = sorted[0];
    let mut best_gap = (ts - best.timestamp).abs();
    for record in &sorted[1..] {
        let gap = (ts - record.timestamp).abs();
        // Strict inequality keeps the earlier record on ties.
        if gap < best_gap {
            best = record;
            best_gap = gap;
        }
    }
    best.visibility_miles
}

/// Feature extraction settings: the rolling window length in steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindowConfig {
    pub window: usize,
}

impl Default for FeatureWindowConfig {
    fn default() -> Self {
        FeatureWindowConfig {
            window: DEFAULT_FEATURE_WINDOW,
        }
    }
}

impl FeatureWindowConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.window < 2 {
            return Err(PipelineError::WindowTooShort(self.window));
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 divisor).
fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Window statistics over paired upstream/downstream flow and speed rows.
/// Flows are veh/h and are converted to veh/5min counts here.
fn window_features(
    up_flow_vph: &[f64],
    up_speed: &[f64],
    down_flow_vph: &[f64],
    down_speed: &[f64],
    visibility: f64,
    ds: bool,
) -> RiskFeatures {
    let up_counts: Vec<f64> = up_flow_vph.iter().map(|q| q * COUNT_PER_5MIN).collect();
    let down_counts: Vec<f64> = down_flow_vph.iter().map(|q| q * COUNT_PER_5MIN).collect();
    RiskFeatures {
        visibility,
        ds,
        aqu: mean(&up_counts),
        aqd: mean(&down_counts),
        dqu: sample_std(&up_counts),
        dvu: sample_std(up_speed),
        dqd: sample_std(&down_counts),
        dvd: sample_std(down_speed),
        dv: mean(up_speed) - mean(down_speed),
    }
}

/// Feature source backed by a simulated trajectory.
///
/// The "upstream station" of cell `i` is its upstream interface: flow
/// `q_i` with the speed of cell `i - 1` (the measured boundary stands in
/// for cell 0). The "downstream station" is the downstream interface:
/// flow `q_{i+1}` with the cell's own speed.
pub struct TrajectoryFeatures<'a> {
    pub model: &'a SegmentModel,
    pub trajectory: &'a SimTrajectory,
    pub input: &'a BoundaryInput,
    pub visibility_miles: &'a [f64],
    pub window: usize,
}

impl<'a> TrajectoryFeatures<'a> {
    pub fn new(
        model: &'a SegmentModel,
        trajectory: &'a SimTrajectory,
        input: &'a BoundaryInput,
        visibility_miles: &'a [f64],
        window: usize,
    ) -> Result<Self, PipelineError> {
        FeatureWindowConfig { window }.validate()?;
        Ok(TrajectoryFeatures {
            model,
            trajectory,
            input,
            visibility_miles,
            window,
        })
    }

    /// Speed recorded by the upstream boundary detector at row `r`.
    fn boundary_speed(&self, r: usize) -> f64 {
        let rho = self.input.upstream_density_vpm[r];
        if rho > 1e-9 {
            self.input.upstream_flow_vph[r] / rho
        } else {
            self.model.cells[0].free_flow_mph
        }
    }

    /// Features for `cell` at step `k`, built from rows `k - window .. k`.
    pub fn features(&self, cell: usize, k: usize) -> Result<RiskFeatures, PipelineError> {
        let n = self.model.n_cells();
        if cell >= n {
            return Err(PipelineError::CellOutOfRange { cell, n_cells: n });
        }
        let rows = self.trajectory.horizon().min(self.visibility_miles.len());
        if k < self.window || k > rows {
            return Err(PipelineError::WindowOutOfRange {
                step: k,
                window: self.window,
                available: rows,
            });
        }
        let range = (k - self.window)..k;
        let up_flow: Vec<f64> = range.clone().map(|r| self.trajectory.flows[r][cell]).collect();
        let down_flow: Vec<f64> = range
            .clone()
            .map(|r| self.trajectory.flows[r][cell + 1])
            .collect();
        let up_speed: Vec<f64> = range
            .clone()
            .map(|r| {
                if cell == 0 {
                    self.boundary_speed(r)
                } else {
                    self.trajectory.speeds[r][cell - 1]
                }
            })
            .collect();
        let down_speed: Vec<f64> = range.map(|r| self.trajectory.speeds[r][cell]).collect();
        let visibility = self.visibility_miles[(k - 1).min(self.visibility_miles.len() - 1)];
        Ok(window_features(
            &up_flow,
            &up_speed,
            &down_flow,
            &down_speed,
            visibility,
            self.model.cells[cell].diverge,
        ))
    }
}

/// Features from measured upstream/downstream station series, using rows
/// `k - window .. k` of both series. Both series must share the step grid.
pub fn extract_features_measured(
    upstream: &SectionSeries,
    downstream: &SectionSeries,
    k: usize,
    window: usize,
    ds: bool,
) -> Result<RiskFeatures, PipelineError> {
    FeatureWindowConfig { window }.validate()?;
    if upstream.len() != downstream.len() {
        return Err(PipelineError::Misaligned(format!(
            "upstream has {} rows, downstream {}",
            upstream.len(),
            downstream.len()
        )));
    }
    if upstream.visibility_miles.is_empty() {
        return Err(PipelineError::Misaligned(
            "visibility missing; run join_visibility first".into(),
        ));
    }
    if k < window || k > upstream.len() {
        return Err(PipelineError::WindowOutOfRange {
            step: k,
            window,
            available: upstream.len(),
        });
    }
    let range = (k - window)..k;
    Ok(window_features(
        &upstream.flow_vph[range.clone()],
        &upstream.speed_mph[range.clone()],
        &downstream.flow_vph[range.clone()],
        &downstream.speed_mph[range.clone()],
        upstream.visibility_miles[k - 1],
        ds,
    ))
}

fn csv_io(e: csv::Error) -> PipelineError {
    PipelineError::CsvParse {
        line: 0,
        reason: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sim::{simulate, Uncontrolled};
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn ts(offset_secs: i64) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(fixtures::FIXTURE_START_RFC3339)
            .unwrap()
            .with_timezone(&Utc)
            + Duration::seconds(offset_secs)
    }

    fn lane(lane_id: u32, flow: f64, occupancy: f64, speed: f64, hov: bool) -> RawDetectorRecord {
        RawDetectorRecord {
            station: "s1".into(),
            timestamp: ts(0),
            lane: lane_id,
            flow,
            occupancy,
            speed,
            hov,
        }
    }

    #[test]
    fn occupancy_zero_maps_to_zero() {
        assert_eq!(occupancy_to_density(0.0, 0.004).unwrap(), 0.0);
    }

    #[test]
    fn occupancy_division_oracle() {
        assert!(approx(occupancy_to_density(0.1, 0.004).unwrap(), 25.0, 1e-12));
    }

    #[test]
    fn occupancy_is_linear_in_g() {
        let d1 = occupancy_to_density(0.2, 0.004).unwrap();
        let d2 = occupancy_to_density(0.4, 0.004).unwrap();
        assert!(approx(d2, 2.0 * d1, 1e-12));
    }

    #[test]
    fn occupancy_rejects_bad_inputs() {
        assert!(occupancy_to_density(0.5, 0.0).is_err());
        assert!(occupancy_to_density(0.5, -1.0).is_err());
        assert!(occupancy_to_density(1.5, 0.004).is_err());
    }

    #[test]
    fn aggregate_single_lane_is_identity() {
        let records = [lane(1, 10.0, 0.1, 60.0, false)];
        let (flow, density, speed) = aggregate_lanes(&records, 0.004).unwrap();
        assert!(approx(flow, 1200.0, 1e-12));
        assert!(approx(density, 25.0, 1e-12));
        assert!(approx(speed, 60.0, 1e-12));
    }

    #[test]
    fn aggregate_two_identical_lanes_doubles() {
        let records = [lane(1, 10.0, 0.1, 60.0, false), lane(2, 10.0, 0.1, 60.0, false)];
        let (flow, density, speed) = aggregate_lanes(&records, 0.004).unwrap();
        assert!(approx(flow, 2400.0, 1e-12));
        assert!(approx(density, 50.0, 1e-12));
        assert!(approx(speed, 60.0, 1e-12));
    }

    #[test]
    fn aggregate_flow_weighted_speed() {
        // 1200 veh/h at 60 mph plus 600 veh/h at 30 mph averages to 50 mph.
        let records = [lane(1, 10.0, 0.1, 60.0, false), lane(2, 5.0, 0.08, 30.0, false)];
        let (flow, _, speed) = aggregate_lanes(&records, 0.004).unwrap();
        assert!(approx(flow, 1800.0, 1e-12));
        assert!(approx(speed, 50.0, 1e-12));
    }

    #[test]
    fn aggregate_drops_hov_and_errors_when_all_hov() {
        let records = [lane(1, 10.0, 0.1, 60.0, true), lane(2, 5.0, 0.08, 30.0, false)];
        let (flow, _, _) = aggregate_lanes(&records, 0.004).unwrap();
        assert!(approx(flow, 600.0, 1e-12));
        let only_hov = [lane(1, 10.0, 0.1, 60.0, true)];
        assert!(matches!(
            aggregate_lanes(&only_hov, 0.004),
            Err(PipelineError::NoLanes(_))
        ));
    }

    #[test]
    fn aggregate_zero_flow_uses_plain_mean() {
        let records = [lane(1, 0.0, 0.0, 62.0, false), lane(2, 0.0, 0.0, 58.0, false)];
        let (flow, _, speed) = aggregate_lanes(&records, 0.004).unwrap();
        assert_eq!(flow, 0.0);
        assert!(approx(speed, 60.0, 1e-12));
    }

    #[test]
    fn visibility_join_takes_nearest() {
        let mut series = SectionSeries::default();
        push_row(&mut series, ts(20 * 60), (1200.0, 20.0, 60.0));
        let weather = [
            WeatherRecord { timestamp: ts(0), visibility_miles: 3.0 },
            WeatherRecord { timestamp: ts(3600), visibility_miles: 5.0 },
        ];
        let joined = join_visibility(&series, &weather).unwrap();
        assert_eq!(joined.visibility_miles, vec![3.0]);
    }

    #[test]
    fn visibility_tie_goes_to_earlier_record() {
        let mut series = SectionSeries::default();
        push_row(&mut series, ts(1800), (1200.0, 20.0, 60.0));
        let weather = [
            WeatherRecord { timestamp: ts(0), visibility_miles: 3.0 },
            WeatherRecord { timestamp: ts(3600), visibility_miles: 5.0 },
        ];
        let joined = join_visibility(&series, &weather).unwrap();
        assert_eq!(joined.visibility_miles, vec![3.0]);
    }

    #[test]
    fn visibility_single_record_covers_all() {
        let mut series = SectionSeries::default();
        for i in 0..5 {
            push_row(&mut series, ts(i * 30), (1200.0, 20.0, 60.0));
        }
        let weather = [WeatherRecord { timestamp: ts(60), visibility_miles: 1.5 }];
        let joined = join_visibility(&series, &weather).unwrap();
        assert_eq!(joined.visibility_miles, vec![1.5; 5]);
    }

    #[test]
    fn visibility_gap_rejected() {
        let mut series = SectionSeries::default();
        push_row(&mut series, ts(0), (1200.0, 20.0, 60.0));
        push_row(&mut series, ts(4 * 3600), (1200.0, 20.0, 60.0));
        let weather = [WeatherRecord { timestamp: ts(0), visibility_miles: 3.0 }];
        let err = join_visibility(&series, &weather).unwrap_err();
        assert!(matches!(err, PipelineError::WeatherGap("end")));
    }

    #[test]
    fn assemble_imputes_short_gaps_and_drops_long_ones() {
        let mut records = Vec::new();
        for k in [0i64, 1, 2, 8, 9, 10, 11, 12, 13, 20] {
            records.push(RawDetectorRecord {
                station: "s1".into(),
                timestamp: ts(k * 30),
                lane: 1,
                flow: 10.0,
                occupancy: 0.1,
                speed: 60.0,
                hov: false,
            });
        }
        let out = assemble_station_series(&records, 0.004, 30).unwrap();
        let assembled = &out["s1"];
        // Steps 3-7 form a 5-step gap: four imputed, one dropped; steps
        // 14-19 form a 6-step gap: four imputed, two dropped.
        assert_eq!(assembled.imputed_steps, 8);
        assert_eq!(assembled.dropped_steps.len(), 3);
        assert_eq!(assembled.series.len(), 10 + 8);
        let flows: Vec<f64> = assembled.series.flow_vph.clone();
        assert!(flows.iter().all(|&q| approx(q, 1200.0, 1e-9)));
    }

    #[test]
    fn section_series_csv_round_trip() {
        let mut series = SectionSeries::default();
        for i in 0..6 {
            push_row(
                &mut series,
                ts(i * 30),
                (1200.0 + i as f64 * 0.123456789, 20.0 + i as f64, 60.0 - i as f64 * 0.5),
            );
        }
        let weather = [WeatherRecord { timestamp: ts(0), visibility_miles: 2.25 }];
        let joined = join_visibility(&series, &weather).unwrap();
        let mut buf = Vec::new();
        joined.write_csv(&mut buf).unwrap();
        let back = SectionSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(joined, back);
    }

    #[test]
    fn detector_csv_round_trip() {
        let records = vec![
            lane(1, 10.25, 0.125, 61.5, false),
            lane(2, 4.0, 0.05, 58.0, true),
        ];
        let mut buf = Vec::new();
        write_detector_csv(&records, &mut buf).unwrap();
        let back = read_detector_csv(buf.as_slice()).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn weather_csv_round_trip_and_parse_error() {
        let records = vec![
            WeatherRecord { timestamp: ts(0), visibility_miles: 0.3 },
            WeatherRecord { timestamp: ts(3600), visibility_miles: 1.75 },
        ];
        let mut buf = Vec::new();
        write_weather_csv(&records, &mut buf).unwrap();
        let back = read_weather_csv(buf.as_slice()).unwrap();
        assert_eq!(records, back);

        let bad = "timestamp,visibility_miles\nnot-a-time,1.0\n";
        let err = read_weather_csv(bad.as_bytes()).unwrap_err();
        match err {
            PipelineError::CsvParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn constant_trajectory_features() -> (SegmentModel, BoundaryInput, Vec<f64>, SimTrajectory) {
        let model = fixtures::segment_model();
        let n = model.n_cells();
        let steps = 40;
        let mut input = BoundaryInput::zeros(n, steps);
        for k in 0..steps {
            input.upstream_flow_vph[k] = 1200.0;
            input.upstream_density_vpm[k] = 20.0;
        }
        let init: Vec<f64> = model.cells.iter().map(|c| 1200.0 / c.free_flow_mph).collect();
        let mut policy = Uncontrolled::new(&model);
        let traj = simulate(&model, &input, &init, &mut policy, steps).unwrap();
        let vis = vec![2.0; steps];
        (model, input, vis, traj)
    }

    #[test]
    fn constant_flow_yields_constant_counts() {
        let (model, input, vis, traj) = constant_trajectory_features();
        let feats = TrajectoryFeatures::new(&model, &traj, &input, &vis, 10).unwrap();
        // Steady state by step 30; counts are 1200/12 = 100 veh/5min.
        let f = feats.features(1, 30).unwrap();
        assert!(approx(f.aqu, 100.0, 1e-6), "aqu {}", f.aqu);
        assert!(approx(f.aqd, 100.0, 1e-6));
        assert!(approx(f.dqu, 0.0, 1e-9));
        assert!(approx(f.dqd, 0.0, 1e-9));
        assert!(approx(f.dvu, 0.0, 1e-9));
        assert!(approx(f.dvd, 0.0, 1e-9));
        // Upstream station speed is cell 1's free-flow speed, downstream is
        // cell 2's.
        assert!(approx(f.dv, 74.25 - 74.34, 1e-9));
        assert_eq!(f.visibility, 2.0);
        assert!(!f.ds);
        let f0 = feats.features(0, 30).unwrap();
        assert!(f0.ds);
    }

    #[test]
    fn alternating_speed_std_dev_oracle() {
        let up_speed: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 50.0 } else { 70.0 }).collect();
        let flat = vec![1200.0; 10];
        let down_speed = vec![60.0; 10];
        let f = window_features(&flat, &up_speed, &flat, &down_speed, 1.0, false);
        // Sample std of five 50s and five 70s.
        assert!(approx(f.dvu, (1000.0f64 / 9.0).sqrt(), 1e-9));
        assert!(approx(f.dvu, 10.54, 0.01));
        assert!(approx(f.dv, 0.0, 1e-9));
    }

    #[test]
    fn identical_station_series_have_zero_dv() {
        let flows: Vec<f64> = (0..10).map(|i| 900.0 + 40.0 * i as f64).collect();
        let speeds: Vec<f64> = (0..10).map(|i| 55.0 + (i as f64 * 0.7).sin()).collect();
        let f = window_features(&flows, &speeds, &flows, &speeds, 1.0, false);
        assert_eq!(f.dv, 0.0);
        assert_eq!(f.dqu, f.dqd);
        assert_eq!(f.dvu, f.dvd);
    }

    #[test]
    fn features_are_causal() {
        let (model, mut input, vis, _) = constant_trajectory_features();
        // Perturb the future beyond step k and re-simulate; features at k
        // must not change.
        let k = 20;
        let window = 10;
        let init: Vec<f64> = model.cells.iter().map(|c| 1200.0 / c.free_flow_mph).collect();
        let mut policy = Uncontrolled::new(&model);
        let base = simulate(&model, &input, &init, &mut policy, 40).unwrap();
        let feats_base = TrajectoryFeatures::new(&model, &base, &input, &vis, window).unwrap();
        let before = feats_base.features(2, k).unwrap();

        for step in k..40 {
            input.upstream_flow_vph[step] = 9000.0;
            input.upstream_density_vpm[step] = 120.0;
        }
        let mut policy = Uncontrolled::new(&model);
        let perturbed = simulate(&model, &input, &init, &mut policy, 40).unwrap();
        let feats_after = TrajectoryFeatures::new(&model, &perturbed, &input, &vis, window).unwrap();
        let after = feats_after.features(2, k).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn features_reject_short_history() {
        let (model, input, vis, traj) = constant_trajectory_features();
        let feats = TrajectoryFeatures::new(&model, &traj, &input, &vis, 10).unwrap();
        assert!(matches!(
            feats.features(0, 9),
            Err(PipelineError::WindowOutOfRange { .. })
        ));
        assert!(feats.features(0, 10).is_ok());
        assert!(TrajectoryFeatures::new(&model, &traj, &input, &vis, 1).is_err());
    }

    #[test]
    fn measured_features_match_window_oracle() {
        let mut up = SectionSeries::default();
        let mut down = SectionSeries::default();
        for i in 0..12 {
            let q = 1200.0 + 60.0 * (i % 3) as f64;
            push_row(&mut up, ts(i * 30), (q, q / 60.0, 60.0));
            push_row(&mut down, ts(i * 30), (q, q / 55.0, 55.0));
        }
        let weather = [WeatherRecord { timestamp: ts(0), visibility_miles: 0.8 }];
        let up = join_visibility(&up, &weather).unwrap();
        let f = extract_features_measured(&up, &down, 12, 10, true).unwrap();
        assert!(f.ds);
        assert_eq!(f.visibility, 0.8);
        assert!(approx(f.dv, 5.0, 1e-12));
        assert!(f.dqu > 0.0 && approx(f.dqu, f.dqd, 1e-12));
    }

    proptest! {
        #[test]
        fn section_csv_round_trip_lossless(
            rows in proptest::collection::vec((0.0f64..20000.0, 0.0f64..900.0, 0.0f64..90.0, 0.0f64..10.0), 1..40)
        ) {
            let mut series = SectionSeries::default();
            for (i, (q, d, v, vis)) in rows.iter().enumerate() {
                push_row(&mut series, ts(i as i64 * 30), (*q, *d, *v));
                series.visibility_miles.push(*vis);
            }
            let mut buf = Vec::new();
            series.write_csv(&mut buf).unwrap();
            let back = SectionSeries::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(series, back);
        }

        #[test]
        fn aggregation_conserves_flow(
            lanes in proptest::collection::vec((0.0f64..40.0, 0.0f64..0.9, 1.0f64..90.0), 1..6)
        ) {
            let records: Vec<RawDetectorRecord> = lanes
                .iter()
                .enumerate()
                .map(|(i, (flow, occ, speed))| lane(i as u32, *flow, *occ, *speed, false))
                .collect();
            let (flow, _, _) = aggregate_lanes(&records, 0.004).unwrap();
            let expected: f64 = lanes.iter().map(|(f, _, _)| f * 120.0).sum();
            prop_assert!((flow - expected).abs() < 1e-9);
        }
    }
}
