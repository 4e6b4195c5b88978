//! Factor evaluation and search: paired controlled/uncontrolled runs give
//! a safety/mobility fitness, and a real-coded genetic algorithm searches
//! the factor box.
//!
//! The fitness of a factor vector is `-dR / max(dT, eps)` where dR and dT
//! are the relative changes in cumulative risk and total travel time
//! against an uncontrolled companion run on identical inputs. Cutting risk
//! at little mobility cost scores high; the epsilon keeps the ratio finite
//! when control does not slow traffic at all.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch;
use crate::control::{
    map_limits_to_cells, ControlError, ControlFactors, SignLayout, TickRecord, TriggerMode,
    VslController, ADJACENT_BOUNDS_MPH, CYCLE_BOUNDS_SECONDS, DEFAULT_START_THRESHOLD,
    STEP_BOUNDS_MPH,
};
use crate::pipeline::{PipelineError, TrajectoryFeatures};
use crate::risk::{risk, RiskCoefficients, RiskMode};
use crate::sim::{simulate, BoundaryInput, LimitPolicy, SegmentModel, SimError, SimTrajectory, Uncontrolled};

/// Denominator guard for the fitness ratio when control leaves travel time
/// unchanged or reduces it.
pub const FITNESS_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),
    #[error("flow {flow} with zero speed at step {step}, cell {cell}")]
    StoppedFlow { step: usize, cell: usize, flow: f64 },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("placement comparison needs at least 2 layouts, got {0}")]
    InsufficientLayouts(usize),
}

/// Everything one factor evaluation needs: the corridor, its measured
/// boundaries, the visibility series, the sign layout, and the risk model.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: SegmentModel,
    pub input: BoundaryInput,
    /// Per-step visibility, miles.
    pub visibility_miles: Vec<f64>,
    pub layout: SignLayout,
    pub coefficients: RiskCoefficients,
    pub risk_mode: RiskMode,
    /// Steps to simulate.
    pub horizon: usize,
    /// Rolling feature window, steps.
    pub window: usize,
    /// Display quantum of the signs, mph.
    pub quantum_mph: f64,
    pub trigger: TriggerMode,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), OptError> {
        self.model.validate()?;
        self.input.validate(self.model.n_cells())?;
        self.layout.validate(self.model.n_cells())?;
        if self.horizon == 0 || self.horizon > self.input.len() {
            return Err(SimError::HorizonMismatch {
                horizon: self.horizon,
                available: self.input.len(),
            }
            .into());
        }
        if self.visibility_miles.len() < self.horizon {
            return Err(OptError::InvalidConfig(format!(
                "visibility series has {} steps, horizon needs {}",
                self.visibility_miles.len(),
                self.horizon
            )));
        }
        if self.window < 2 {
            return Err(PipelineError::WindowTooShort(self.window).into());
        }
        if self.window >= self.horizon {
            return Err(OptError::InvalidConfig(format!(
                "window {} leaves no evaluation steps in horizon {}",
                self.window, self.horizon
            )));
        }
        Ok(())
    }

    /// Free-flow initial densities consistent with the first demand sample.
    pub fn initial_densities(&self) -> Vec<f64> {
        let demand = self.input.upstream_flow_vph[0];
        self.model
            .cells
            .iter()
            .map(|c| (demand / c.free_flow_mph).min(c.jam_density_vpm))
            .collect()
    }
}

/// The evaluation record of one paired run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessComponents {
    pub r_vsl: f64,
    pub r_non: f64,
    pub ttt_vsl: f64,
    pub ttt_non: f64,
    pub delta_r: f64,
    pub delta_t: f64,
    pub fitness: f64,
}

/// Fitness from the two relative rates.
pub fn fitness_from_rates(delta_r: f64, delta_t: f64) -> f64 {
    let f = -delta_r / delta_t.max(FITNESS_EPSILON);
    if f == 0.0 {
        0.0
    } else {
        f
    }
}

/// Cumulative risk per cell over the evaluation steps `window..horizon`.
pub fn per_cell_risk(traj: &SimTrajectory, scenario: &Scenario) -> Result<Vec<f64>, OptError> {
    let features = TrajectoryFeatures::new(
        &scenario.model,
        traj,
        &scenario.input,
        &scenario.visibility_miles,
        scenario.window,
    )?;
    let n = scenario.model.n_cells();
    let mut sums = vec![0.0; n];
    for k in scenario.window..traj.horizon() {
        for (cell, sum) in sums.iter_mut().enumerate() {
            let f = features.features(cell, k)?;
            *sum += risk(&f, &scenario.coefficients, scenario.risk_mode);
        }
    }
    Ok(sums)
}

/// Segment-level cumulative risk.
pub fn total_risk(traj: &SimTrajectory, scenario: &Scenario) -> Result<f64, OptError> {
    Ok(per_cell_risk(traj, scenario)?.iter().sum())
}

/// Travel time accumulated per cell: `l q / v` summed over steps. Steps
/// with zero entering flow contribute nothing; positive flow at zero speed
/// is a contradiction and is flagged.
pub fn per_cell_travel_time(traj: &SimTrajectory) -> Result<Vec<f64>, OptError> {
    let n = traj.n_cells();
    let mut sums = vec![0.0; n];
    for k in 0..traj.horizon() {
        for i in 0..n {
            let q = traj.flows[k][i];
            if q == 0.0 {
                continue;
            }
            let v = traj.speeds[k][i];
            if v <= 0.0 {
                return Err(OptError::StoppedFlow {
                    step: k,
                    cell: i,
                    flow: q,
                });
            }
            sums[i] += traj.cell_lengths_miles[i] * q / v;
        }
    }
    Ok(sums)
}

pub fn total_travel_time(traj: &SimTrajectory) -> Result<f64, OptError> {
    Ok(per_cell_travel_time(traj)?.iter().sum())
}

/// Speed-limit policy that scores each sign cell's risk once per control
/// cycle and steps the controller.
pub struct RiskDrivenPolicy<'a> {
    scenario: &'a Scenario,
    controller: VslController,
    free_flow: Vec<f64>,
    trace: Vec<TickRecord>,
    failure: Option<PipelineError>,
}

impl<'a> RiskDrivenPolicy<'a> {
    pub fn new(scenario: &'a Scenario, factors: ControlFactors) -> Result<Self, OptError> {
        let controller = VslController::new(
            scenario.layout.clone(),
            factors,
            scenario.model.dt_seconds,
            scenario.quantum_mph,
            scenario.trigger,
        )?;
        Ok(RiskDrivenPolicy {
            scenario,
            controller,
            free_flow: scenario.model.free_flow_limits(),
            trace: Vec::new(),
            failure: None,
        })
    }

    pub fn into_trace(self) -> Vec<TickRecord> {
        self.trace
    }

    fn check(&mut self) -> Result<(), OptError> {
        match self.failure.take() {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

impl LimitPolicy for RiskDrivenPolicy<'_> {
    fn limits(&mut self, step: usize, _densities: &[f64], history: &SimTrajectory) -> Vec<f64> {
        let on_cycle = step % self.controller.cycle_steps() == 0;
        if step >= self.scenario.window && on_cycle && self.failure.is_none() {
            let features = TrajectoryFeatures {
                model: &self.scenario.model,
                trajectory: history,
                input: &self.scenario.input,
                visibility_miles: &self.scenario.visibility_miles,
                window: self.scenario.window,
            };
            let mut risks = Vec::with_capacity(self.controller.layout.sign_count());
            for sign in &self.controller.layout.signs {
                match features.features(sign.cell, step) {
                    Ok(f) => risks.push(risk(
                        &f,
                        &self.scenario.coefficients,
                        self.scenario.risk_mode,
                    )),
                    Err(e) => {
                        self.failure = Some(e);
                        break;
                    }
                }
            }
            if self.failure.is_none() {
                match self.controller.tick(step, &risks) {
                    Ok(Some(record)) => self.trace.push(record),
                    Ok(None) => {}
                    Err(_) => unreachable!("risk count matches the sign count"),
                }
            }
        }
        map_limits_to_cells(
            &self.controller.layout,
            &self.controller.state().posted_mph,
            &self.free_flow,
        )
    }
}

/// Both runs of one factor evaluation plus their summaries.
#[derive(Debug, Clone)]
pub struct PairedEvaluation {
    pub controlled: SimTrajectory,
    pub uncontrolled: SimTrajectory,
    pub trace: Vec<TickRecord>,
    pub per_cell_risk_vsl: Vec<f64>,
    pub per_cell_risk_non: Vec<f64>,
    pub per_cell_ttt_vsl: Vec<f64>,
    pub per_cell_ttt_non: Vec<f64>,
    pub components: FitnessComponents,
}

/// Runs the controlled and uncontrolled simulations on identical inputs
/// and assembles the full evaluation record.
pub fn evaluate_pair(
    scenario: &Scenario,
    factors: ControlFactors,
) -> Result<PairedEvaluation, OptError> {
    scenario.validate()?;
    factors.validate()?;
    let init = scenario.initial_densities();
    // Both runs read the same input object; the pairing can never diverge.
    let input = &scenario.input;

    let mut base_policy = Uncontrolled::new(&scenario.model);
    let uncontrolled = simulate(&scenario.model, input, &init, &mut base_policy, scenario.horizon)?;

    let mut policy = RiskDrivenPolicy::new(scenario, factors)?;
    let controlled = simulate(&scenario.model, input, &init, &mut policy, scenario.horizon)?;
    policy.check()?;

    let per_cell_risk_vsl = per_cell_risk(&controlled, scenario)?;
    let per_cell_risk_non = per_cell_risk(&uncontrolled, scenario)?;
    let per_cell_ttt_vsl = per_cell_travel_time(&controlled)?;
    let per_cell_ttt_non = per_cell_travel_time(&uncontrolled)?;

    let r_vsl: f64 = per_cell_risk_vsl.iter().sum();
    let r_non: f64 = per_cell_risk_non.iter().sum();
    let ttt_vsl: f64 = per_cell_ttt_vsl.iter().sum();
    let ttt_non: f64 = per_cell_ttt_non.iter().sum();
    if r_non == 0.0 {
        return Err(OptError::DegenerateScenario(
            "uncontrolled cumulative risk is zero".into(),
        ));
    }
    if ttt_non == 0.0 {
        return Err(OptError::DegenerateScenario(
            "uncontrolled total travel time is zero".into(),
        ));
    }
    let delta_r = (r_vsl - r_non) / r_non;
    let delta_t = (ttt_vsl - ttt_non) / ttt_non;
    let components = FitnessComponents {
        r_vsl,
        r_non,
        ttt_vsl,
        ttt_non,
        delta_r,
        delta_t,
        fitness: fitness_from_rates(delta_r, delta_t),
    };
    Ok(PairedEvaluation {
        trace: policy.into_trace(),
        controlled,
        uncontrolled,
        per_cell_risk_vsl,
        per_cell_risk_non,
        per_cell_ttt_vsl,
        per_cell_ttt_non,
        components,
    })
}

/// Fitness of one factor vector on a scenario.
pub fn fitness(scenario: &Scenario, factors: ControlFactors) -> Result<FitnessComponents, OptError> {
    Ok(evaluate_pair(scenario, factors)?.components)
}

/// Genetic-algorithm settings. The factor decision vector is
/// `{cycle, step, adjacent clamp}`; the start threshold stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Encoding resolution applied to genes before snapping.
    pub precision: f64,
    pub seed: u64,
    pub start_threshold: f64,
}

impl GaConfig {
    /// Defaults used by the factor searches: population 30 over 50
    /// generations, crossover 0.8, mutation 0.1, encoding precision 1e-7.
    pub fn standard(seed: u64) -> Self {
        GaConfig {
            population: 30,
            generations: 50,
            crossover_prob: 0.8,
            mutation_prob: 0.1,
            precision: 1e-7,
            seed,
            start_threshold: DEFAULT_START_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), OptError> {
        if self.population < 4 || self.population % 2 != 0 {
            return Err(OptError::InvalidConfig(format!(
                "population must be even and at least 4, got {}",
                self.population
            )));
        }
        if self.generations == 0 {
            return Err(OptError::InvalidConfig("generations must be positive".into()));
        }
        for (name, p) in [("crossover", self.crossover_prob), ("mutation", self.mutation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(OptError::InvalidConfig(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
        }
        if !(self.precision > 0.0) {
            return Err(OptError::InvalidConfig(format!(
                "precision must be positive, got {}",
                self.precision
            )));
        }
        if self.start_threshold.is_nan() {
            return Err(OptError::InvalidConfig("start threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Best/mean fitness of one generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

/// Outcome of a generic GA run.
#[derive(Debug, Clone, PartialEq)]
pub struct GaRun {
    pub best_genes: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
    /// Distinct objective evaluations performed.
    pub evaluations: usize,
    /// Evaluations answered from the memo table.
    pub cache_hits: usize,
}

/// Real-coded GA maximizing `objective` over the box: tournament selection
/// of size 3, arithmetic crossover, uniform-perturbation mutation with a
/// scale that anneals over the generations, elitism 1. Genes are clamped
/// to the box, put on the `precision` grid, then passed to `snap` before
/// every evaluation; evaluations are memoized on the snapped genes.
/// Deterministic for a fixed seed, with or without parallel evaluation.
pub fn ga_maximize<S, F>(
    config: &GaConfig,
    bounds: &[(f64, f64)],
    snap: S,
    objective: F,
) -> Result<GaRun, OptError>
where
    S: Fn(&mut [f64]),
    F: Fn(&[f64]) -> Result<f64, OptError> + Sync,
{
    config.validate()?;
    if bounds.is_empty() {
        return Err(OptError::InvalidConfig("bounds are empty".into()));
    }
    for (lo, hi) in bounds {
        if !(lo < hi) {
            return Err(OptError::InvalidConfig(format!("bad bound [{lo}, {hi}]")));
        }
    }
    let dim = bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let uniform_in = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + rng.gen::<f64>() * (hi - lo);

    let mut population: Vec<Vec<f64>> = (0..config.population)
        .map(|_| (0..dim).map(|d| uniform_in(&mut rng, bounds[d])).collect())
        .collect();

    let condition = |genes: &Vec<f64>| -> Vec<f64> {
        let mut g = genes.clone();
        for d in 0..dim {
            let (lo, hi) = bounds[d];
            g[d] = g[d].clamp(lo, hi);
            g[d] = lo + ((g[d] - lo) / config.precision).round() * config.precision;
            g[d] = g[d].clamp(lo, hi);
        }
        snap(&mut g);
        g
    };
    let key_of = |genes: &[f64]| -> Vec<u64> { genes.iter().map(|v| v.to_bits()).collect() };

    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut evaluations = 0usize;
    let mut cache_hits = 0usize;
    let mut history = Vec::with_capacity(config.generations);
    let mut best_genes: Vec<f64> = Vec::new();
    let mut best_fitness = f64::NEG_INFINITY;

    for generation in 0..config.generations {
        let snapped: Vec<Vec<f64>> = population.iter().map(&condition).collect();

        // Evaluate the genomes the memo table has not seen, in input order.
        let mut pending: Vec<Vec<f64>> = Vec::new();
        let mut pending_keys: Vec<Vec<u64>> = Vec::new();
        for genes in &snapped {
            let key = key_of(genes);
            if !cache.contains_key(&key) && !pending_keys.contains(&key) {
                pending.push(genes.clone());
                pending_keys.push(key);
            } else {
                cache_hits += 1;
            }
        }
        let results = batch::try_map(&pending, |genes| objective(genes))?;
        evaluations += results.len();
        for (key, value) in pending_keys.into_iter().zip(results) {
            cache.insert(key, value);
        }

        let fitnesses: Vec<f64> = snapped.iter().map(|g| cache[&key_of(g)]).collect();
        let gen_best = fitnesses
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if fitnesses[gen_best] > best_fitness {
            best_fitness = fitnesses[gen_best];
            best_genes = snapped[gen_best].clone();
        }
        history.push(GenerationStats {
            generation,
            best_fitness,
            mean_fitness: fitnesses.iter().sum::<f64>() / fitnesses.len() as f64,
        });
        if generation + 1 == config.generations {
            break;
        }

        // Mutation kicks track the population spread per gene, so they
        // shrink as the search settles and keep refining below any fixed
        // scale.
        let kick_amplitude: Vec<f64> = (0..dim)
            .map(|d| {
                let lo = population.iter().map(|g| g[d]).fold(f64::INFINITY, f64::min);
                let hi = population.iter().map(|g| g[d]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .collect();

        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let mut winner = rng.gen_range(0..config.population);
            for _ in 0..2 {
                let challenger = rng.gen_range(0..config.population);
                if fitnesses[challenger] > fitnesses[winner] {
                    winner = challenger;
                }
            }
            winner
        };

        let mut next: Vec<Vec<f64>> = Vec::with_capacity(config.population);
        next.push(snapped[gen_best].clone());
        while next.len() < config.population {
            let a = tournament(&mut rng);
            let b = tournament(&mut rng);
            let (mut c1, mut c2) = (population[a].clone(), population[b].clone());
            if rng.gen::<f64>() < config.crossover_prob {
                // Extended blend: alpha outside [0, 1] keeps the variance
                // of the mating pool from collapsing prematurely.
                let alpha: f64 = -0.25 + rng.gen::<f64>() * 1.5;
                for d in 0..dim {
                    let (lo, hi) = bounds[d];
                    let (x, y) = (c1[d], c2[d]);
                    c1[d] = (alpha * x + (1.0 - alpha) * y).clamp(lo, hi);
                    c2[d] = ((1.0 - alpha) * x + alpha * y).clamp(lo, hi);
                }
            }
            for child in [&mut c1, &mut c2] {
                for d in 0..dim {
                    if rng.gen::<f64>() < config.mutation_prob {
                        let (lo, hi) = bounds[d];
                        let kick = (rng.gen::<f64>() * 2.0 - 1.0) * kick_amplitude[d];
                        child[d] = (child[d] + kick).clamp(lo, hi);
                    }
                }
            }
            next.push(c1);
            if next.len() < config.population {
                next.push(c2);
            }
        }
        population = next;
    }

    Ok(GaRun {
        best_genes,
        best_fitness,
        history,
        evaluations,
        cache_hits,
    })
}

/// Factor search outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_factors: ControlFactors,
    pub best: FitnessComponents,
    pub history: Vec<GenerationStats>,
    pub evaluations: usize,
    pub cache_hits: usize,
}

/// Snaps a raw cycle gene to the nearest multiple of the simulation step
/// inside the cycle bounds.
fn snap_cycle(cycle_seconds: f64, dt_seconds: f64) -> f64 {
    let lo = (CYCLE_BOUNDS_SECONDS.0 / dt_seconds).ceil();
    let hi = (CYCLE_BOUNDS_SECONDS.1 / dt_seconds).floor();
    let m = (cycle_seconds / dt_seconds).round().clamp(lo, hi);
    m * dt_seconds
}

fn factors_from_genes(genes: &[f64], start_threshold: f64) -> ControlFactors {
    ControlFactors {
        start_threshold,
        cycle_seconds: genes[0],
        step_mph: genes[1],
        adjacent_clamp_mph: genes[2],
    }
}

/// Searches `{cycle, step, adjacent clamp}` for the scenario's best
/// fitness. Cycles snap to the simulation step grid, the two speed factors
/// to whole mph, and evaluations are memoized on the snapped vector.
pub fn ga_optimize(scenario: &Scenario, config: &GaConfig) -> Result<OptimResult, OptError> {
    scenario.validate()?;
    config.validate()?;
    let dt = scenario.model.dt_seconds;
    if (CYCLE_BOUNDS_SECONDS.0 / dt).ceil() > (CYCLE_BOUNDS_SECONDS.1 / dt).floor() {
        return Err(OptError::InvalidConfig(format!(
            "no multiple of the {dt}s step lies inside the cycle bounds"
        )));
    }
    let bounds = [CYCLE_BOUNDS_SECONDS, STEP_BOUNDS_MPH, ADJACENT_BOUNDS_MPH];
    let snap = move |genes: &mut [f64]| {
        genes[0] = snap_cycle(genes[0], dt);
        genes[1] = genes[1].round().clamp(STEP_BOUNDS_MPH.0, STEP_BOUNDS_MPH.1);
        genes[2] = genes[2]
            .round()
            .clamp(ADJACENT_BOUNDS_MPH.0, ADJACENT_BOUNDS_MPH.1);
    };
    let objective = |genes: &[f64]| -> Result<f64, OptError> {
        fitness(scenario, factors_from_genes(genes, config.start_threshold)).map(|c| c.fitness)
    };
    let run = ga_maximize(config, &bounds, snap, objective)?;
    let best_factors = factors_from_genes(&run.best_genes, config.start_threshold);
    let best = fitness(scenario, best_factors)?;
    Ok(OptimResult {
        best_factors,
        best,
        history: run.history,
        evaluations: run.evaluations,
        cache_hits: run.cache_hits,
    })
}

/// Fitness per installed sign.
pub fn benefit_cost(fitness_value: f64, sign_count: usize) -> Result<f64, OptError> {
    if sign_count == 0 {
        return Err(OptError::InvalidConfig(
            "benefit-cost ratio needs at least one sign".into(),
        ));
    }
    Ok(fitness_value / sign_count as f64)
}

/// One layout's optimization outcome in a placement comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub name: String,
    pub layout: SignLayout,
    pub sign_count: usize,
    pub result: OptimResult,
    pub benefit_cost: f64,
}

/// Optimizes each candidate layout on its own and ranks them by
/// benefit-cost ratio, ties broken by raw fitness then by fewer signs.
pub fn compare_placements(
    base: &Scenario,
    layouts: &[(String, SignLayout)],
    config: &GaConfig,
) -> Result<Vec<PlacementResult>, OptError> {
    if layouts.len() < 2 {
        return Err(OptError::InsufficientLayouts(layouts.len()));
    }
    let mut results = Vec::with_capacity(layouts.len());
    for (name, layout) in layouts {
        let mut scenario = base.clone();
        scenario.layout = layout.clone();
        let result = ga_optimize(&scenario, config)?;
        let ratio = benefit_cost(result.best.fitness, layout.sign_count())?;
        results.push(PlacementResult {
            name: name.clone(),
            layout: layout.clone(),
            sign_count: layout.sign_count(),
            result,
            benefit_cost: ratio,
        });
    }
    results.sort_by(|a, b| {
        b.benefit_cost
            .partial_cmp(&a.benefit_cost)
            .unwrap()
            .then(b.result.best.fitness.partial_cmp(&a.result.best.fitness).unwrap())
            .then(a.sign_count.cmp(&b.sign_count))
    });
    Ok(results)
}
