//! Rolling-horizon parking pricing on top of the macro model.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::macro_initial_state;
use crate::error::{invalid, Error, Result};
use crate::macro_model::{
    FlowHistory, MacroDemand, MacroModel, MacroParams, MacroRecord, MacroState, MacroTrajectory, PriceProfile,
};
use crate::micro::{performance_metrics, MicroSim, RunOutput, ScenarioConfig};
use crate::network::Network;

/// Slack used when checking the price constraints, $.
pub const PRICE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceBounds {
    pub min: f64,
    pub max: f64,
    /// Largest change between consecutive intervals.
    pub gap: f64,
}

impl Default for PriceBounds {
    fn default() -> Self {
        PriceBounds {
            min: 0.0,
            max: 10.0,
            gap: 3.0,
        }
    }
}

impl PriceBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(invalid(format!("price bounds [{}, {}] are empty", self.min, self.max)));
        }
        if !(self.gap >= 0.0) {
            return Err(invalid(format!("price gap must be >= 0, got {}", self.gap)));
        }
        Ok(())
    }

    /// Projects `prices` onto the bounds and the gap constraints, walking forward
    /// from `prior` (the price in force before the first interval).
    pub fn repair(&self, prices: &mut [f64], prior: Option<f64>) {
        let mut prev = prior.map(|p| p.clamp(self.min, self.max));
        for p in prices.iter_mut() {
            let mut x = p.clamp(self.min, self.max);
            if let Some(q) = prev {
                x = x.clamp((q - self.gap).max(self.min), (q + self.gap).min(self.max));
            }
            *p = x;
            prev = Some(x);
        }
    }

    pub fn is_feasible(&self, prices: &[f64], prior: Option<f64>) -> bool {
        let in_box = prices
            .iter()
            .all(|p| *p >= self.min - PRICE_TOLERANCE && *p <= self.max + PRICE_TOLERANCE);
        let mut prev = prior;
        let mut smooth = true;
        for &p in prices {
            if let Some(q) = prev {
                smooth &= (p - q).abs() <= self.gap + PRICE_TOLERANCE;
            }
            prev = Some(p);
        }
        in_box && smooth
    }
}

/// Prices per control interval for both facilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricingSchedule {
    /// Interval length, hr.
    pub interval: f64,
    pub on: Vec<f64>,
    pub off: Vec<f64>,
    pub bounds: PriceBounds,
}

impl PricingSchedule {
    pub fn constant(interval: f64, intervals: usize, on: f64, off: f64, bounds: PriceBounds) -> Self {
        PricingSchedule {
            interval,
            on: vec![on; intervals],
            off: vec![off; intervals],
            bounds,
        }
    }

    pub fn is_feasible(&self, prior: Option<(f64, f64)>) -> bool {
        self.bounds.is_feasible(&self.on, prior.map(|p| p.0)) && self.bounds.is_feasible(&self.off, prior.map(|p| p.1))
    }

    pub fn profile(&self, dt: f64) -> PriceProfile {
        PriceProfile {
            interval_steps: ((self.interval / dt).round() as usize).max(1),
            on: self.on.clone(),
            off: self.off.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// On-street cruising time plus lot-circuit time of turned-away vehicles.
    IneffectiveCruising,
    /// Time spent by all vehicles on the road.
    TotalTravelTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Control interval, hr.
    pub interval: f64,
    /// Intervals optimized at once; the prediction horizon is `intervals * interval`.
    pub intervals: usize,
    /// Macro step, s.
    pub macro_dt: f64,
    pub starts: usize,
    pub evaluations_per_start: usize,
    pub control_on: bool,
    pub control_off: bool,
    pub bounds: PriceBounds,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            interval: 0.25,
            intervals: 2,
            macro_dt: 10.0,
            starts: 8,
            evaluations_per_start: 400,
            control_on: true,
            control_off: false,
            bounds: PriceBounds::default(),
            objective: Objective::IneffectiveCruising,
            seed: 0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.interval > 0.0) || self.intervals == 0 || !(self.macro_dt > 0.0) {
            return Err(invalid(
                "control interval, interval count and macro step must be positive",
            ));
        }
        let ratio = self.interval * 3600.0 / self.macro_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(invalid("the macro step must divide the control interval"));
        }
        if self.starts == 0 || self.evaluations_per_start == 0 {
            return Err(invalid("optimizer needs at least one start and one evaluation"));
        }
        Ok(())
    }

    /// Prediction horizon, hr.
    pub fn prediction_horizon(&self) -> f64 {
        self.interval * self.intervals as f64
    }

    pub fn steps_per_interval(&self) -> usize {
        (self.interval * 3600.0 / self.macro_dt).round() as usize
    }
}

/// Cruising vehicle-hours on street plus lot-circuit deadweight of a macro run.
pub fn objective_ineffective_cruising(traj: &MacroTrajectory, params: &MacroParams) -> f64 {
    let cruising: f64 = traj.records.iter().skip(1).map(|r| r.n_c * params.dt).sum();
    let circuit: f64 = traj
        .flows
        .iter()
        .map(|f| params.lot_circuit * f.q_off_on / params.cruise_speed_off)
        .sum();
    cruising + circuit
}

/// Vehicle-hours on the road (all active families) plus lot-circuit time.
pub fn objective_total_travel_time(traj: &MacroTrajectory, params: &MacroParams) -> f64 {
    let on_road: f64 = traj.records.iter().skip(1).map(|r| r.active() * params.dt).sum();
    let circuit: f64 = traj
        .flows
        .iter()
        .map(|f| params.lot_circuit * f.q_off_on / params.cruise_speed_off)
        .sum();
    on_road + circuit
}

pub fn evaluate_objective(traj: &MacroTrajectory, params: &MacroParams, objective: Objective) -> f64 {
    match objective {
        Objective::IneffectiveCruising => objective_ineffective_cruising(traj, params),
        Objective::TotalTravelTime => objective_total_travel_time(traj, params),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSolution {
    pub schedule: PricingSchedule,
    pub objective: f64,
    pub evaluations: usize,
    /// Every evaluated schedule gave the same objective.
    pub indifferent: bool,
    /// Best objective after each evaluation of the winning start.
    pub best_trace: Vec<f64>,
}

/// The optimization problem: decision vector layout and evaluation.
struct Problem<'a> {
    model: &'a MacroModel,
    state: &'a MacroState,
    demand: MacroDemand,
    interval_steps: usize,
    intervals: usize,
    control_on: bool,
    control_off: bool,
    prior: Option<(f64, f64)>,
    fixed: (f64, f64),
    bounds: PriceBounds,
    objective: Objective,
}

impl Problem<'_> {
    fn dims(&self) -> usize {
        self.intervals * (self.control_on as usize + self.control_off as usize)
    }

    fn schedule(&self, x: &[f64], interval: f64) -> PricingSchedule {
        let mut it = x.chunks(self.intervals);
        let on = if self.control_on {
            it.next().expect("on block").to_vec()
        } else {
            vec![self.fixed.0; self.intervals]
        };
        let off = if self.control_off {
            it.next().expect("off block").to_vec()
        } else {
            vec![self.fixed.1; self.intervals]
        };
        PricingSchedule {
            interval,
            on,
            off,
            bounds: self.bounds,
        }
    }

    fn repair(&self, x: &mut [f64]) {
        let mut blocks = x.chunks_mut(self.intervals);
        if self.control_on {
            self.bounds
                .repair(blocks.next().expect("on block"), self.prior.map(|p| p.0));
        }
        if self.control_off {
            self.bounds
                .repair(blocks.next().expect("off block"), self.prior.map(|p| p.1));
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let mut it = x.chunks(self.intervals);
        let on = if self.control_on {
            it.next().expect("on").to_vec()
        } else {
            vec![self.fixed.0]
        };
        let off = if self.control_off {
            it.next().expect("off").to_vec()
        } else {
            vec![self.fixed.1]
        };
        let profile = PriceProfile {
            interval_steps: self.interval_steps,
            on,
            off,
        };
        let traj = self.model.simulate_from(self.state, &self.demand, &profile)?;
        Ok(evaluate_objective(&traj, self.model.params(), self.objective))
    }
}

struct SearchOutcome {
    x: Vec<f64>,
    f: f64,
    evaluations: usize,
    lo: f64,
    hi: f64,
    trace: Vec<f64>,
}

/// Compass search with box projection and gap repair after every move.
fn pattern_search(problem: &Problem, mut x: Vec<f64>, budget: usize) -> Result<SearchOutcome> {
    problem.repair(&mut x);
    let mut f = problem.evaluate(&x)?;
    let mut evaluations = 1;
    let (mut lo, mut hi) = (f, f);
    let mut trace = vec![f];
    let span = problem.bounds.max - problem.bounds.min;
    let mut step = if span > 0.0 { span / 4.0 } else { 0.0 };
    let min_step = 1e-3 * span.max(1e-9);
    while evaluations < budget && step >= min_step {
        let mut improved = false;
        'dims: for d in 0..x.len() {
            for dir in [1.0, -1.0] {
                if evaluations >= budget {
                    break 'dims;
                }
                let mut y = x.clone();
                y[d] += dir * step;
                problem.repair(&mut y);
                if y == x {
                    continue;
                }
                let fy = problem.evaluate(&y)?;
                evaluations += 1;
                lo = lo.min(fy);
                hi = hi.max(fy);
                if fy < f {
                    x = y;
                    f = fy;
                    improved = true;
                }
                trace.push(f);
                if improved {
                    continue 'dims;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(SearchOutcome {
        x,
        f,
        evaluations,
        lo,
        hi,
        trace,
    })
}

fn start_points(problem: &Problem, count: usize, warm: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = problem.dims();
    let b = problem.bounds;
    let mut starts: Vec<Vec<f64>> = warm.to_vec();
    let mut prior = Vec::with_capacity(n);
    if problem.control_on {
        prior.extend(std::iter::repeat_n(
            problem.prior.map_or(b.min, |p| p.0),
            problem.intervals,
        ));
    }
    if problem.control_off {
        prior.extend(std::iter::repeat_n(
            problem.prior.map_or(b.min, |p| p.1),
            problem.intervals,
        ));
    }
    starts.push(prior);
    starts.push(vec![b.min; n]);
    starts.push(vec![b.max; n]);
    // Latin hypercube fill for the rest
    let rest = count.saturating_sub(starts.len());
    if rest > 0 {
        let mut columns: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut c: Vec<f64> = (0..rest)
                    .map(|i| b.min + (b.max - b.min) * (i as f64 + rng.gen::<f64>()) / rest as f64)
                    .collect();
                c.shuffle(rng);
                c
            })
            .collect();
        for i in 0..rest {
            starts.push(columns.iter_mut().map(|c| c[i]).collect());
        }
    }
    starts.truncate(count.max(warm.len() + 1));
    starts
}

fn optimize(problem: &Problem, cfg: &MpcConfig, warm: &[Vec<f64>], interval: f64) -> Result<OpenLoopSolution> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = start_points(problem, cfg.starts, warm, &mut rng);
    let outcomes: Vec<SearchOutcome> = starts
        .into_par_iter()
        .map(|x| pattern_search(problem, x, cfg.evaluations_per_start))
        .collect::<Result<_>>()?;
    let lo = outcomes.iter().map(|o| o.lo).fold(f64::INFINITY, f64::min);
    let hi = outcomes.iter().map(|o| o.hi).fold(f64::NEG_INFINITY, f64::max);
    let evaluations = outcomes.iter().map(|o| o.evaluations).sum();
    // first start wins ties so results do not depend on scheduling
    let best = outcomes
        .into_iter()
        .reduce(|a, b| if b.f < a.f { b } else { a })
        .expect("at least one start");
    Ok(OpenLoopSolution {
        schedule: problem.schedule(&best.x, interval),
        objective: best.f,
        evaluations,
        indifferent: hi - lo <= 1e-12 * hi.abs().max(1.0),
        best_trace: best.trace,
    })
}

/// Optimizes the next `cfg.intervals` control intervals from `state`. `demand` starts
/// at the step after `state` and is zero-padded to the prediction horizon. Facilities
/// not under control keep their `prior` price.
pub fn solve_open_loop(
    state: &MacroState,
    demand: &MacroDemand,
    params: &MacroParams,
    cfg: &MpcConfig,
    prior: (f64, f64),
) -> Result<OpenLoopSolution> {
    cfg.validate()?;
    check_step(params, cfg)?;
    let model = MacroModel::new(params.clone())?;
    let steps = cfg.steps_per_interval() * cfg.intervals;
    let problem = Problem {
        model: &model,
        state,
        demand: demand.window(0, steps),
        interval_steps: cfg.steps_per_interval(),
        intervals: cfg.intervals,
        control_on: cfg.control_on,
        control_off: cfg.control_off,
        prior: Some(prior),
        fixed: prior,
        bounds: cfg.bounds,
        objective: cfg.objective,
    };
    if problem.dims() == 0 {
        let schedule = PricingSchedule::constant(cfg.interval, cfg.intervals, prior.0, prior.1, cfg.bounds);
        let objective = problem.evaluate(&[])?;
        return Ok(OpenLoopSolution {
            schedule,
            objective,
            evaluations: 1,
            indifferent: true,
            best_trace: vec![objective],
        });
    }
    optimize(&problem, cfg, &[], cfg.interval)
}

fn check_step(params: &MacroParams, cfg: &MpcConfig) -> Result<()> {
    if (params.dt * 3600.0 - cfg.macro_dt).abs() > 1e-9 {
        return Err(invalid(format!(
            "macro parameters use a {} s step but the controller expects {} s",
            params.dt * 3600.0,
            cfg.macro_dt
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullHorizonMode {
    /// One price per control interval.
    Dynamic,
    /// One price for the whole horizon.
    Static,
}

/// Optimizes prices for the whole demand horizon in one problem, starting from `state`.
/// The dynamic problem is warm-started from the static optimum, so its objective is
/// never worse.
pub fn solve_full_horizon(
    state: &MacroState,
    demand: &MacroDemand,
    params: &MacroParams,
    cfg: &MpcConfig,
    mode: FullHorizonMode,
    uncontrolled: (f64, f64),
) -> Result<OpenLoopSolution> {
    cfg.validate()?;
    check_step(params, cfg)?;
    let model = MacroModel::new(params.clone())?;
    let per = cfg.steps_per_interval();
    let intervals = demand.len().div_ceil(per).max(1);
    let make = |intervals: usize, interval_steps: usize| Problem {
        model: &model,
        state,
        demand: demand.clone(),
        interval_steps,
        intervals,
        control_on: cfg.control_on,
        control_off: cfg.control_off,
        prior: None,
        fixed: uncontrolled,
        bounds: cfg.bounds,
        objective: cfg.objective,
    };
    let fixed = make(1, usize::MAX);
    let full = cfg.interval * intervals as f64;
    if fixed.dims() == 0 {
        let objective = fixed.evaluate(&[])?;
        return Ok(OpenLoopSolution {
            schedule: PricingSchedule::constant(full, 1, uncontrolled.0, uncontrolled.1, cfg.bounds),
            objective,
            evaluations: 1,
            indifferent: true,
            best_trace: vec![objective],
        });
    }
    let stat = optimize(&fixed, cfg, &[], full)?;
    if mode == FullHorizonMode::Static {
        return Ok(stat);
    }
    let dynamic = make(intervals, per);
    let mut warm = Vec::new();
    if cfg.control_on {
        warm.extend(std::iter::repeat_n(stat.schedule.on[0], intervals));
    }
    if cfg.control_off {
        warm.extend(std::iter::repeat_n(stat.schedule.off[0], intervals));
    }
    let mut sol = optimize(&dynamic, cfg, &[warm], cfg.interval)?;
    sol.evaluations += stat.evaluations;
    Ok(sol)
}

/// Something prices can be applied to and whose state the macro model can read.
pub trait Plant {
    /// Hours since the start.
    fn time(&self) -> f64;
    /// Current state on the macro grid of `params`, with flow histories.
    fn observe(&self, params: &MacroParams) -> Result<MacroState>;
    fn set_prices(&mut self, on: f64, off: f64);
    fn advance(&mut self, hours: f64) -> Result<()>;
    /// Ineffective cruising so far, veh-hr.
    fn ineffective_cruising(&self) -> f64;
}

/// The macro model used as its own plant.
pub struct MacroPlant {
    model: MacroModel,
    state: MacroState,
    demand: MacroDemand,
    prices: (f64, f64),
    cost: f64,
}

impl MacroPlant {
    pub fn new(params: MacroParams, initial: MacroState, demand: MacroDemand) -> Result<Self> {
        Ok(MacroPlant {
            model: MacroModel::new(params)?,
            state: initial,
            demand,
            prices: (0.0, 0.0),
            cost: 0.0,
        })
    }

    pub fn state(&self) -> &MacroState {
        &self.state
    }
}

impl Plant for MacroPlant {
    fn time(&self) -> f64 {
        self.state.step as f64 * self.model.params().dt
    }

    fn observe(&self, _params: &MacroParams) -> Result<MacroState> {
        Ok(self.state.clone())
    }

    fn set_prices(&mut self, on: f64, off: f64) {
        self.prices = (on, off);
    }

    fn advance(&mut self, hours: f64) -> Result<()> {
        let steps = (hours / self.model.params().dt).round() as usize;
        let window = self.demand.window(self.state.step, steps);
        let traj = self.model.simulate_from(
            &self.state,
            &window,
            &PriceProfile::constant(self.prices.0, self.prices.1),
        )?;
        self.cost += objective_ineffective_cruising(&traj, self.model.params());
        self.state = traj.final_state;
        Ok(())
    }

    fn ineffective_cruising(&self) -> f64 {
        self.cost
    }
}

/// The simulator as plant. Its state is mapped family by family onto the macro
/// accumulations; flow histories are rebuilt from the per-step event counts.
pub struct MicroPlant {
    sim: MicroSim,
}

impl MicroPlant {
    pub fn new(net: Arc<Network>, cfg: ScenarioConfig) -> Result<Self> {
        Ok(MicroPlant {
            sim: MicroSim::new(net, cfg)?,
        })
    }

    pub fn sim(&self) -> &MicroSim {
        &self.sim
    }

    pub fn finish(mut self) -> Result<RunOutput> {
        self.sim.run_to_end()?;
        Ok(self.sim.into_output())
    }
}

impl Plant for MicroPlant {
    fn time(&self) -> f64 {
        self.sim.time() / 3600.0
    }

    fn observe(&self, params: &MacroParams) -> Result<MacroState> {
        let sim_dt = self.sim.config().dt;
        let ratio = params.dt * 3600.0 / sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(invalid("the macro step must be a multiple of the simulator step"));
        }
        let ratio = ratio.round() as usize;
        let stats = self.sim.stats();
        if stats.len() % ratio != 0 {
            return Err(invalid("plant time is not on the macro grid"));
        }
        let mut history = FlowHistory::default();
        for chunk in stats.chunks(ratio) {
            let sum = |f: fn(&crate::micro::StepStats) -> usize| chunk.iter().map(f).sum::<usize>() as f64;
            history.o_c.push(sum(|s| s.parked_on_street));
            history.o_m_off.push(sum(|s| s.entered_lot));
            history.q_off_on.push(sum(|s| s.rejected_by_lot));
            history.q_out_off.push(sum(|s| s.left_lot));
        }
        let delay = MacroModel::new(params.clone())?.delay_steps();
        let last = stats.last();
        MacroState::resumed(
            last.map_or(0.0, |s| s.n_moving_off as f64),
            last.map_or(0.0, |s| s.n_moving_on as f64),
            last.map_or(0.0, |s| s.n_transit as f64),
            last.map_or(0.0, |s| s.n_cruising as f64),
            self.sim.lot_occupancy() as f64,
            self.sim.on_street_occupancy() as f64,
            history,
            delay,
        )
    }

    fn set_prices(&mut self, on: f64, off: f64) {
        self.sim.set_prices(on, off);
    }

    fn advance(&mut self, hours: f64) -> Result<()> {
        self.sim.run_until(self.sim.time() + hours * 3600.0)
    }

    fn ineffective_cruising(&self) -> f64 {
        self.sim
            .stats()
            .iter()
            .map(|s| (s.n_cruising + s.n_in_circuit) as f64 * s.dt / 3600.0)
            .sum()
    }
}

/// Predicted and realized state at one macro step of an applied interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionPoint {
    pub iteration: usize,
    /// Seconds.
    pub t: f64,
    pub predicted_n_c: f64,
    pub realized_n_c: f64,
    pub predicted_n_on: f64,
    pub realized_n_on: f64,
    pub predicted_n_off: f64,
    pub realized_n_off: f64,
    pub predicted_active: f64,
    pub realized_active: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcIteration {
    pub iteration: usize,
    /// Start of the applied interval, hr.
    pub t: f64,
    pub applied_on: f64,
    pub applied_off: f64,
    /// Predicted objective over the whole prediction horizon.
    pub objective: f64,
    pub indifferent: bool,
    pub schedule: PricingSchedule,
    /// Plant ineffective cruising accumulated by the end of the interval.
    pub plant_ineffective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MpcRun {
    pub iterations: Vec<MpcIteration>,
    pub predictions: Vec<PredictionPoint>,
}

impl MpcRun {
    pub fn applied(&self) -> Vec<(f64, f64)> {
        self.iterations.iter().map(|i| (i.applied_on, i.applied_off)).collect()
    }

    /// Applied on- and off-street price sequences satisfy the bounds and gaps.
    pub fn is_feasible(&self, bounds: &PriceBounds, initial: (f64, f64)) -> bool {
        let on: Vec<f64> = self.iterations.iter().map(|i| i.applied_on).collect();
        let off: Vec<f64> = self.iterations.iter().map(|i| i.applied_off).collect();
        bounds.is_feasible(&on, Some(initial.0)) && bounds.is_feasible(&off, Some(initial.1))
    }

    pub fn write_log_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "t_h",
            "tau_on",
            "tau_off",
            "objective",
            "plant_ineffective_veh_h",
        ])?;
        for i in &self.iterations {
            w.write_record([
                i.iteration.to_string(),
                i.t.to_string(),
                i.applied_on.to_string(),
                i.applied_off.to_string(),
                i.objective.to_string(),
                i.plant_ineffective.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "mpc log".into(),
            source: e,
        })
    }

    pub fn write_predictions_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.predictions {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "prediction log".into(),
            source: e,
        })
    }
}

/// Closed-loop control: at every interval boundary read the plant, solve the
/// open-loop problem on the forecast demand and apply the first interval's prices.
/// `initial` is the price pair in force before the first interval. Runs until
/// `horizon` hours.
pub fn mpc_loop(
    plant: &mut dyn Plant,
    params: &MacroParams,
    cfg: &MpcConfig,
    forecast: &MacroDemand,
    initial: (f64, f64),
    horizon: f64,
) -> Result<MpcRun> {
    cfg.validate()?;
    check_step(params, cfg)?;
    let model = MacroModel::new(params.clone())?;
    let per = cfg.steps_per_interval();
    let count = (horizon / cfg.interval - 1e-9).ceil() as usize;
    let mut run = MpcRun::default();
    let mut prior = initial;
    for iteration in 0..count {
        let state = plant.observe(params)?;
        let window = forecast.window(state.step, per * cfg.intervals);
        let sol = solve_open_loop(&state, &window, params, cfg, prior)?;
        let applied = (sol.schedule.on[0], sol.schedule.off[0]);
        let prediction: Vec<MacroRecord> = model
            .simulate_from(
                &state,
                &window.window(0, per),
                &PriceProfile::constant(applied.0, applied.1),
            )?
            .records;
        let t0 = plant.time();
        plant.set_prices(applied.0, applied.1);
        for (j, predicted) in prediction.iter().enumerate().skip(1) {
            plant.advance(params.dt)?;
            let real = plant.observe(params)?;
            run.predictions.push(PredictionPoint {
                iteration,
                t: predicted.t,
                predicted_n_c: predicted.n_c,
                realized_n_c: real.n_c,
                predicted_n_on: predicted.n_on,
                realized_n_on: real.n_on,
                predicted_n_off: predicted.n_off,
                realized_n_off: real.n_off,
                predicted_active: predicted.active(),
                realized_active: real.active(),
            });
            debug_assert_eq!(real.step, state.step + j);
        }
        run.iterations.push(MpcIteration {
            iteration,
            t: t0,
            applied_on: applied.0,
            applied_off: applied.1,
            objective: sol.objective,
            indifferent: sol.indifferent,
            schedule: sol.schedule,
            plant_ineffective: plant.ineffective_cruising(),
        });
        prior = applied;
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    NoPrice,
    Mpc,
    FullHorizonDynamic,
    FullHorizonStatic,
}

impl ControlMode {
    pub const ALL: [ControlMode; 4] = [
        ControlMode::NoPrice,
        ControlMode::Mpc,
        ControlMode::FullHorizonDynamic,
        ControlMode::FullHorizonStatic,
    ];
}

/// Outcome of one control mode on one simulator replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub mode: ControlMode,
    pub seed: u64,
    /// Applied (on, off) prices per control interval.
    pub prices: Vec<(f64, f64)>,
    pub ineffective_veh_h: f64,
    pub cruising_veh_h: f64,
    pub deadweight_veh_h: f64,
    pub avg_travel_time_s: f64,
    pub completion_rate: Option<f64>,
    #[serde(skip)]
    pub mpc: Option<MpcRun>,
}

/// Runs one control mode on the simulator. The forecast is the scenario's expected
/// demand; open-loop schedules (full-horizon modes) are solved once on the macro model
/// from the scenario's initial state.
pub fn run_mode(
    net: Arc<Network>,
    scenario: &ScenarioConfig,
    params: &MacroParams,
    cfg: &MpcConfig,
    mode: ControlMode,
) -> Result<ModeOutcome> {
    let forecast = crate::calibration::macro_demand_for(scenario, params)?;
    let base = (scenario.fee_on, scenario.fee_off);
    let intervals = (scenario.horizon / cfg.interval - 1e-9).ceil() as usize;
    let mut plant = MicroPlant::new(net, scenario.clone())?;
    let (prices, mpc) = match mode {
        ControlMode::NoPrice => (vec![base; intervals], None),
        ControlMode::Mpc => {
            let run = mpc_loop(&mut plant, params, cfg, &forecast, base, scenario.horizon)?;
            (run.applied(), Some(run))
        }
        ControlMode::FullHorizonDynamic | ControlMode::FullHorizonStatic => {
            let m = if mode == ControlMode::FullHorizonDynamic {
                FullHorizonMode::Dynamic
            } else {
                FullHorizonMode::Static
            };
            let sol = solve_full_horizon(&macro_initial_state(scenario), &forecast, params, cfg, m, base)?;
            let s = &sol.schedule;
            let at = |v: &Vec<f64>, i: usize| v.get(i).or(v.last()).copied().unwrap_or(0.0);
            ((0..intervals).map(|i| (at(&s.on, i), at(&s.off, i))).collect(), None)
        }
    };
    if mpc.is_none() {
        for &(on, off) in &prices {
            plant.set_prices(on, off);
            plant.advance(cfg.interval)?;
        }
    }
    let out = plant.finish()?;
    let m = performance_metrics(&out);
    Ok(ModeOutcome {
        mode,
        seed: scenario.seed,
        prices,
        ineffective_veh_h: m.ineffective_veh_h,
        cruising_veh_h: m.cruising_veh_h,
        deadweight_veh_h: m.deadweight_veh_h,
        avg_travel_time_s: m.avg_travel_time_s,
        completion_rate: m.completion_rate,
        mpc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::DurationDistribution;
    use crate::estimators::DistanceModel;
    use crate::macro_model::{LogitParams, NfdModel, StepFlows};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> MacroParams {
        MacroParams {
            nfd: NfdModel::new(40.0, 150.0, 60.0).unwrap(),
            cruise_speed_on: 30.0,
            cruise_speed_off: 15.0,
            moving_distance_on: 0.6,
            moving_distance_off: 0.6,
            moving_distance_pass: 0.6,
            distance_to_park: DistanceModel::ExpDistance { a: 0.01, b: 5.0 },
            capacity_on: 100.0,
            capacity_off: 100.0,
            lot_circuit: 0.3,
            dt: 10.0 / 3600.0,
            horizon: 1.0,
            duration: DurationDistribution::uniform(0.0, 1.0).unwrap(),
            logit: LogitParams {
                alpha_on: 1.5,
                alpha_off: 0.0,
                beta: 0.3,
            },
        }
    }

    fn fast() -> MpcConfig {
        MpcConfig {
            starts: 4,
            evaluations_per_start: 60,
            ..Default::default()
        }
    }

    fn trajectory(n_c: f64, steps: usize, overflow: &[f64]) -> MacroTrajectory {
        let rec = |t| MacroRecord {
            t,
            n_m_on: 0.0,
            n_m_off: 0.0,
            n_m_pass: 0.0,
            n_c,
            n_on: 0.0,
            n_off: 0.0,
            v: 0.0,
            occupancy_on: 0.0,
            o_c: 0.0,
            q_off_on: 0.0,
            q_out_on: 0.0,
            q_out_off: 0.0,
        };
        let flows = (0..steps)
            .map(|k| {
                let mut f = MacroModel::new(params())
                    .unwrap()
                    .step_flows(&MacroState::default(), Default::default())
                    .unwrap();
                f.q_off_on = overflow.get(k).copied().unwrap_or(0.0);
                f
            })
            .collect::<Vec<StepFlows>>();
        MacroTrajectory {
            records: (0..=steps).map(|k| rec(k as f64 * 10.0)).collect(),
            flows,
            final_state: MacroState::default(),
        }
    }

    #[test]
    fn objective_examples() {
        let p = params();
        assert_eq!(objective_ineffective_cruising(&trajectory(0.0, 180, &[]), &p), 0.0);
        assert_relative_eq!(
            objective_ineffective_cruising(&trajectory(10.0, 180, &[]), &p),
            5.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            objective_ineffective_cruising(&trajectory(0.0, 180, &[1.0]), &p),
            0.02,
            epsilon = 1e-12
        );
    }

    #[test]
    fn repair_enforces_bounds_and_gap() {
        let b = PriceBounds::default();
        let mut x = [12.0, -4.0, 9.0, 9.5];
        b.repair(&mut x, Some(1.0));
        assert_eq!(x, [4.0, 1.0, 4.0, 7.0]);
        assert!(b.is_feasible(&x, Some(1.0)));
        assert!(!b.is_feasible(&[5.0], Some(1.0)));
        assert!(PriceBounds {
            min: 0.0,
            max: 10.0,
            gap: -1.0
        }
        .validate()
        .is_err());
        assert!(PriceBounds {
            min: 5.0,
            max: 1.0,
            gap: 3.0
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn repaired_schedules_are_feasible(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..6),
            prior in proptest::option::of(-5.0f64..15.0),
            gap in 0.0f64..5.0,
        ) {
            let b = PriceBounds { min: 0.0, max: 10.0, gap };
            let mut x = xs.clone();
            b.repair(&mut x, prior);
            prop_assert!(b.is_feasible(&x, prior.map(|p| p.clamp(0.0, 10.0))));
        }
    }

    #[test]
    fn zero_demand_is_indifferent() {
        let p = params();
        let demand = MacroDemand::new(vec![0.0; 180], vec![0.0; 180]).unwrap();
        let sol = solve_open_loop(&MacroState::default(), &demand, &p, &fast(), (0.0, 0.0)).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.indifferent);
        assert!(sol.schedule.is_feasible(Some((0.0, 0.0))));
    }

    fn scarce() -> (MacroParams, MacroState, MacroDemand) {
        let mut p = params();
        p.capacity_on = 60.0;
        let state = MacroState::with_accumulations(0.0, 0.0, 0.0, 0.0, 0.0, 50.0);
        let demand = MacroDemand::new(vec![1.2; 360], vec![0.5; 360]).unwrap();
        (p, state, demand)
    }

    #[test]
    fn pricing_pushes_parkers_off_street() {
        let (p, state, demand) = scarce();
        let cfg = fast();
        let sol = solve_open_loop(&state, &demand, &p, &cfg, (0.0, 0.0)).unwrap();
        assert!(sol.schedule.on[0] > 0.0, "{:?}", sol.schedule);
        assert!(sol.schedule.is_feasible(Some((0.0, 0.0))));
        assert_eq!(sol.schedule.off, vec![0.0, 0.0]);
        let base = solve_open_loop(
            &state,
            &demand,
            &p,
            &MpcConfig {
                control_on: false,
                ..cfg
            },
            (0.0, 0.0),
        )
        .unwrap();
        assert!(sol.objective < base.objective);
        // best-so-far never increases
        assert!(sol.best_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn full_horizon_nesting() {
        let (p, state, demand) = scarce();
        let cfg = fast();
        let stat = solve_full_horizon(&state, &demand, &p, &cfg, FullHorizonMode::Static, (0.0, 0.0)).unwrap();
        let dynamic = solve_full_horizon(&state, &demand, &p, &cfg, FullHorizonMode::Dynamic, (0.0, 0.0)).unwrap();
        assert_eq!(stat.schedule.on.len(), 1);
        assert_eq!(dynamic.schedule.on.len(), 4);
        assert!(dynamic.objective <= stat.objective);
        assert!(dynamic.schedule.is_feasible(None));
    }

    #[test]
    fn macro_plant_loop() {
        let (p, state, demand) = scarce();
        let cfg = fast();
        let mut plant = MacroPlant::new(p.clone(), state.clone(), demand.clone()).unwrap();
        let run = mpc_loop(&mut plant, &p, &cfg, &demand, (0.0, 0.0), 1.0).unwrap();
        assert_eq!(run.iterations.len(), 4);
        assert!(run.is_feasible(&cfg.bounds, (0.0, 0.0)));
        // perfect model: predictions match the plant exactly
        for pt in &run.predictions {
            assert_relative_eq!(pt.predicted_n_c, pt.realized_n_c, epsilon = 1e-9);
            assert_relative_eq!(pt.predicted_n_on, pt.realized_n_on, epsilon = 1e-9);
        }
        assert_eq!(run.predictions.len(), 360);
        // the closed loop does no worse than leaving prices at zero
        let mut idle = MacroPlant::new(p.clone(), state, demand).unwrap();
        idle.advance(1.0).unwrap();
        assert!(plant.ineffective_cruising() <= idle.ineffective_cruising() + 1e-9);
        let mut buf = Vec::new();
        run.write_log_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn step_mismatch_rejected() {
        let (p, state, demand) = scarce();
        let cfg = MpcConfig {
            macro_dt: 20.0,
            ..fast()
        };
        assert!(solve_open_loop(&state, &demand, &p, &cfg, (0.0, 0.0)).is_err());
        let bad = MpcConfig {
            bounds: PriceBounds {
                min: 0.0,
                max: 10.0,
                gap: -1.0,
            },
            ..fast()
        };
        assert!(solve_open_loop(&state, &demand, &p, &bad, (0.0, 0.0)).is_err());
    }
}
