//! Bundled synthetic corridor: a four-cell freeway with one diverge and
//! three merges, morning-peak demand, and an early-morning fog episode.
//! Everything here is deterministic so demos, tests, and CLI runs
//! reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{BoundaryInput, CellParams, SegmentModel};

/// Simulation step of the bundled corridor, seconds.
pub const FIXTURE_DT_SECONDS: f64 = 30.0;

/// Wall-clock anchor of step 0, used when joining hourly weather records.
pub const FIXTURE_START_RFC3339: &str = "2020-02-03T05:00:00Z";

/// Seed for the demand jitter baked into the bundled boundary series.
const DEMAND_SEED: u64 = 0x0405_1337;

/// The calibrated four-cell segment: 0.8-mile cells, a diverge with an
/// off-ramp in cell 1, on-ramps in cells 1-3.
pub fn segment_model() -> SegmentModel {
    let cell = |free_flow_mph: f64,
                wave_speed_mph: f64,
                max_flow_vph: f64,
                critical_density_vpm: f64,
                jam_density_vpm: f64,
                diverge: bool,
                on_ramp: bool,
                off_ramp: bool| CellParams {
        length_miles: 0.8,
        free_flow_mph,
        wave_speed_mph,
        max_flow_vph,
        critical_density_vpm,
        jam_density_vpm,
        diverge,
        on_ramp,
        off_ramp,
    };
    SegmentModel {
        dt_seconds: FIXTURE_DT_SECONDS,
        cells: vec![
            cell(74.25, 13.55, 10717.09, 144.34, 935.08, true, true, true),
            cell(74.34, 18.13, 12478.87, 167.86, 856.19, false, true, false),
            cell(85.96, 14.59, 11295.81, 131.41, 905.48, false, true, false),
            cell(66.39, 11.06, 9142.086, 137.70, 964.57, false, false, false),
        ],
    }
}

/// Knobs of the synthetic demand generator.
#[derive(Debug, Clone, Copy)]
pub struct DemandProfile {
    pub base_vph: f64,
    /// Extra demand at the top of the morning peak.
    pub peak_vph: f64,
    /// Peak centre and width, in steps.
    pub peak_center: f64,
    pub peak_width: f64,
    /// Amplitude of the uniform white jitter on the mainline flow.
    pub noise_vph: f64,
    /// On-ramp base and peak extra, per ramp.
    pub ramp_base_vph: f64,
    pub ramp_peak_vph: f64,
    /// Downstream congestion episode: density plateau and metered flow.
    /// Episodes are disabled when `meter_from >= meter_until`.
    pub meter_from: usize,
    pub meter_until: usize,
    pub meter_density_vpm: f64,
    pub meter_flow_vph: f64,
    pub seed: u64,
}

impl Default for DemandProfile {
    fn default() -> Self {
        // A pre-dawn fog window over light traffic, with the commute peak
        // arriving after the fog lifts. Total demand stays well under the
        // lowest cell's capped flow at the 20 mph floor (about 6900
        // veh/h), so posted limits never congest the corridor themselves.
        DemandProfile {
            base_vph: 550.0,
            peak_vph: 2900.0,
            peak_center: 720.0,
            peak_width: 100.0,
            noise_vph: 20.0,
            ramp_base_vph: 100.0,
            ramp_peak_vph: 250.0,
            meter_from: 0,
            meter_until: 0,
            meter_density_vpm: 0.0,
            meter_flow_vph: 0.0,
            seed: DEMAND_SEED,
        }
    }
}

fn gaussian_bump(k: f64, center: f64, width: f64) -> f64 {
    let z = (k - center) / width;
    (-0.5 * z * z).exp()
}

/// Boundary series for the four-cell corridor under the given profile.
pub fn boundary_input(model: &SegmentModel, steps: usize, profile: &DemandProfile) -> BoundaryInput {
    let n = model.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut input = BoundaryInput::zeros(n, steps);
    for k in 0..steps {
        let t = k as f64;
        let bump = gaussian_bump(t, profile.peak_center, profile.peak_width);
        let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * profile.noise_vph;
        let demand = (profile.base_vph + profile.peak_vph * bump + jitter).max(0.0);
        input.upstream_flow_vph[k] = demand;
        // The upstream detector sits in free flow; density follows the demand.
        input.upstream_density_vpm[k] = demand / 70.0;

        for (cell, ramp) in input.on_ramps_vph.iter_mut().enumerate() {
            if model.cells[cell].on_ramp {
                let ramp_jitter = (rng.gen::<f64>() * 2.0 - 1.0) * profile.noise_vph * 0.2;
                ramp[k] =
                    (profile.ramp_base_vph + profile.ramp_peak_vph * bump + ramp_jitter).max(0.0);
            }
        }
        for (cell, ramp) in input.off_ramps_vph.iter_mut().enumerate() {
            if model.cells[cell].off_ramp {
                // The diverge sheds a share of the mainline arrivals.
                ramp[k] = 0.08 * demand;
            }
        }

        let metered = profile.meter_from < profile.meter_until
            && (profile.meter_from..profile.meter_until).contains(&k);
        if metered {
            input.downstream_density_vpm[k] = profile.meter_density_vpm;
            input.downstream_flow_vph[k] = profile.meter_flow_vph;
        } else {
            input.downstream_density_vpm[k] = 30.0;
            input.downstream_flow_vph[k] = 0.0;
        }
    }
    input
}

/// Demand used by the control-evaluation scenario: a free-flowing morning
/// peak without a downstream blockage.
pub fn fog_boundary_input(steps: usize) -> BoundaryInput {
    boundary_input(&segment_model(), steps, &DemandProfile::default())
}

/// Demand used by the calibration fixture: a near-capacity peak probes the
/// free branch and the flow cap, then a hard downstream metering episode
/// backs a queue through the segment so the congested branch is covered.
pub fn calibration_boundary_input(steps: usize) -> BoundaryInput {
    let profile = DemandProfile {
        base_vph: 2800.0,
        peak_vph: 5600.0,
        peak_center: steps as f64 * 0.33,
        peak_width: steps as f64 * 0.1,
        noise_vph: 140.0,
        ramp_base_vph: 150.0,
        ramp_peak_vph: 200.0,
        meter_from: steps / 2,
        meter_until: steps * 41 / 50,
        meter_density_vpm: 420.0,
        meter_flow_vph: 1100.0,
        ..DemandProfile::default()
    };
    boundary_input(&segment_model(), steps, &profile)
}

/// Per-step visibility profile, miles. Fog through the first two and a
/// half hours, burning off over the next hour, clear before the commute
/// peak builds.
pub fn fog_visibility(steps: usize) -> Vec<f64> {
    visibility_profile(steps, 0.3, 6.5)
}

/// Clear-morning counterpart of [`fog_visibility`].
pub fn clear_visibility(steps: usize) -> Vec<f64> {
    vec![6.5; steps]
}

fn visibility_profile(steps: usize, fog_miles: f64, clear_miles: f64) -> Vec<f64> {
    let steps_per_hour = 3600.0 / FIXTURE_DT_SECONDS;
    (0..steps)
        .map(|k| {
            let hours = k as f64 / steps_per_hour;
            if hours < 2.5 {
                fog_miles
            } else if hours < 3.5 {
                let frac = hours - 2.5;
                fog_miles + (clear_miles - fog_miles) * frac
            } else {
                clear_miles
            }
        })
        .collect()
}

/// Hourly visibility readings matching [`fog_visibility`], for weather CSVs.
pub fn fog_weather_hours(hours: usize) -> Vec<f64> {
    let steps_per_hour = (3600.0 / FIXTURE_DT_SECONDS) as usize;
    let profile = fog_visibility(hours * steps_per_hour + 1);
    (0..=hours).map(|h| profile[h * steps_per_hour]).collect()
}

/// Evaluation horizon of the bundled scenarios: four hours at 30 s.
pub const FIXTURE_HORIZON: usize = 480;

/// The bundled fog-morning scenario: the four-cell corridor, morning-peak
/// demand, a sign in every cell, and fog through the first two hours.
pub fn fog_scenario() -> crate::optimize::Scenario {
    scenario_with_visibility(fog_visibility(FIXTURE_HORIZON))
}

/// The clear-morning counterpart, identical but for visibility.
pub fn clear_scenario() -> crate::optimize::Scenario {
    scenario_with_visibility(clear_visibility(FIXTURE_HORIZON))
}

fn scenario_with_visibility(visibility_miles: Vec<f64>) -> crate::optimize::Scenario {
    let model = segment_model();
    let input = fog_boundary_input(FIXTURE_HORIZON);
    crate::optimize::Scenario {
        layout: crate::control::SignLayout::uniform(model.n_cells(), 65.0, 20.0),
        model,
        input,
        visibility_miles,
        coefficients: crate::risk::RiskCoefficients::reference(),
        risk_mode: crate::risk::RiskMode::Linear,
        horizon: FIXTURE_HORIZON,
        window: crate::pipeline::DEFAULT_FEATURE_WINDOW,
        quantum_mph: 5.0,
        trigger: crate::control::TriggerMode::PerSign,
    }
}

/// Sign placements evaluated against each other: one sign per cell, two
/// spacings of a two-sign pair, and a single entrance sign.
pub fn placement_layouts() -> Vec<(String, crate::control::SignLayout)> {
    use crate::control::{SignLayout, SignSpec};
    let sign = |cell: usize| SignSpec {
        cell,
        default_mph: 65.0,
    };
    vec![
        ("every_cell".to_string(), SignLayout::uniform(4, 65.0, 20.0)),
        (
            "pair_gap_one".to_string(),
            SignLayout {
                signs: vec![sign(0), sign(2)],
                floor_mph: 20.0,
            },
        ),
        (
            "pair_gap_two".to_string(),
            SignLayout {
                signs: vec![sign(0), sign(3)],
                floor_mph: 20.0,
            },
        ),
        (
            "single_entrance".to_string(),
            SignLayout {
                signs: vec![sign(0)],
                floor_mph: 20.0,
            },
        ),
    ]
}

/// The control factors found best for the fog condition: 120 s cycle,
/// 5 mph step, 15 mph adjacent clamp, threshold 0.2.
pub fn fog_factors() -> crate::control::ControlFactors {
    crate::control::ControlFactors {
        start_threshold: crate::control::DEFAULT_START_THRESHOLD,
        cycle_seconds: 120.0,
        step_mph: 5.0,
        adjacent_clamp_mph: 15.0,
    }
}

/// Calibration geometry matching [`segment_model`], stations `det_1..4`.
pub fn segment_geometry() -> crate::calib::SegmentGeometry {
    let model = segment_model();
    crate::calib::SegmentGeometry {
        dt_seconds: model.dt_seconds,
        cells: model
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| crate::calib::CellTemplate {
                station: format!("det_{}", i + 1),
                length_miles: c.length_miles,
                diverge: c.diverge,
                on_ramp: c.on_ramp,
                off_ramp: c.off_ramp,
            })
            .collect(),
    }
}

/// Writes the whole corridor bundle into a directory: the model and
/// geometry, risk coefficients, boundary series for control runs and for
/// calibration, synthetic detector data, hourly weather, and the four
/// candidate sign layouts.
pub fn write_bundle(dir: &std::path::Path, steps: usize) -> std::io::Result<()> {
    use std::fs::File;
    use std::io::{BufWriter, Write};
    fn other<E: std::fmt::Display>(e: E) -> std::io::Error {
        std::io::Error::other(e.to_string())
    }

    let model = segment_model();
    let mut w = BufWriter::new(File::create(dir.join("model.json"))?);
    model.to_json_writer(&mut w).map_err(other)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let geometry = segment_geometry();
    let mut w = BufWriter::new(File::create(dir.join("geometry.json"))?);
    geometry.to_json_writer(&mut w).map_err(other)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let coefficients = crate::risk::RiskCoefficients::reference();
    let mut w = BufWriter::new(File::create(dir.join("coefficients.json"))?);
    serde_json::to_writer_pretty(&mut w, &coefficients).map_err(other)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let boundary = boundary_input(&model, steps, &DemandProfile::default());
    boundary
        .write_csv(BufWriter::new(File::create(dir.join("boundary.csv"))?))
        .map_err(other)?;

    let calibration_steps = steps.min(480);
    let calibration_boundary = calibration_boundary_input(calibration_steps);
    calibration_boundary
        .write_csv(BufWriter::new(File::create(
            dir.join("calibration_boundary.csv"),
        )?))
        .map_err(other)?;

    // Detector data observed on the calibration day.
    let (series, _) =
        crate::calib::synthesize_detector_data(&model, &calibration_boundary, calibration_steps)
            .map_err(other)?;
    let start = chrono::DateTime::parse_from_rfc3339(FIXTURE_START_RFC3339)
        .expect("fixture start timestamp")
        .with_timezone(&chrono::Utc);
    let mut stations = std::collections::BTreeMap::new();
    for (i, s) in series.iter().enumerate() {
        stations.insert(
            format!("det_{}", i + 1),
            crate::calib::StationSeries {
                timestamps: (0..s.len())
                    .map(|k| {
                        start
                            + chrono::Duration::seconds(
                                (k as f64 * FIXTURE_DT_SECONDS) as i64,
                            )
                    })
                    .collect(),
                series: s.clone(),
            },
        );
    }
    crate::calib::write_station_csv(
        &stations,
        BufWriter::new(File::create(dir.join("detectors.csv"))?),
    )
    .map_err(other)?;

    let hours = steps.div_ceil((3600.0 / FIXTURE_DT_SECONDS) as usize);
    let weather: Vec<crate::pipeline::WeatherRecord> = fog_weather_hours(hours)
        .into_iter()
        .enumerate()
        .map(|(h, visibility_miles)| crate::pipeline::WeatherRecord {
            timestamp: start + chrono::Duration::hours(h as i64),
            visibility_miles,
        })
        .collect();
    crate::pipeline::write_weather_csv(
        &weather,
        BufWriter::new(File::create(dir.join("weather.csv"))?),
    )
    .map_err(other)?;

    for (name, layout) in placement_layouts() {
        let mut w = BufWriter::new(File::create(dir.join(format!("layout_{name}.json")))?);
        layout.to_json_writer(&mut w).map_err(other)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_validates() {
        segment_model().validate().unwrap();
    }

    #[test]
    fn ramp_topology_matches_geometry() {
        let model = segment_model();
        let on: Vec<bool> = model.cells.iter().map(|c| c.on_ramp).collect();
        let off: Vec<bool> = model.cells.iter().map(|c| c.off_ramp).collect();
        let ds: Vec<bool> = model.cells.iter().map(|c| c.diverge).collect();
        assert_eq!(on, [true, true, true, false]);
        assert_eq!(off, [true, false, false, false]);
        assert_eq!(ds, [true, false, false, false]);
    }

    #[test]
    fn boundary_input_is_deterministic() {
        let a = fog_boundary_input(240);
        let b = fog_boundary_input(240);
        assert_eq!(a, b);
        a.validate(4).unwrap();
    }

    #[test]
    fn visibility_profile_shape() {
        let vis = fog_visibility(480);
        assert_eq!(vis[0], 0.3);
        assert_eq!(vis[299], 0.3);
        assert!(vis[360] > 0.3 && vis[360] < 6.5);
        assert_eq!(vis[479], 6.5);
    }

    #[test]
    fn weather_hours_track_profile() {
        let hours = fog_weather_hours(4);
        assert_eq!(hours.len(), 5);
        assert_eq!(hours[0], 0.3);
        assert_eq!(hours[4], 6.5);
    }
}
