use serde::{Deserialize, Serialize};

use crate::demand::DurationDistribution;
use crate::error::{invalid, Error, Result};
use crate::estimators::DistanceModel;

use super::nfd::{split_demand, LogitParams, NfdModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroParams {
    pub nfd: NfdModel,
    /// Desired on-street cruising speed v_on^f, km/hr.
    pub cruise_speed_on: f64,
    /// Cruising speed inside the lot v_off^f, km/hr.
    pub cruise_speed_off: f64,
    /// Average moving distance of families i, ii and iii, km.
    pub moving_distance_on: f64,
    pub moving_distance_off: f64,
    pub moving_distance_pass: f64,
    /// Expected on-street distance to park as a function of occupancy.
    pub distance_to_park: DistanceModel,
    pub capacity_on: f64,
    pub capacity_off: f64,
    /// One circuit of the lot, km.
    pub lot_circuit: f64,
    /// Step size, hr.
    pub dt: f64,
    pub horizon: f64,
    pub duration: DurationDistribution,
    pub logit: LogitParams,
}

impl MacroParams {
    pub fn validate(&self) -> Result<()> {
        self.nfd.validate()?;
        let positive = [
            ("cruise_speed_on", self.cruise_speed_on),
            ("cruise_speed_off", self.cruise_speed_off),
            ("moving_distance_on", self.moving_distance_on),
            ("moving_distance_off", self.moving_distance_off),
            ("moving_distance_pass", self.moving_distance_pass),
            ("capacity_on", self.capacity_on),
            ("capacity_off", self.capacity_off),
            ("lot_circuit", self.lot_circuit),
            ("dt", self.dt),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("macro parameter {name} must be > 0, got {v}")));
            }
        }
        if let DistanceModel::ExpDistance { a, .. } = self.distance_to_park {
            if !(a > 0.0) {
                return Err(invalid("distance-to-park scale a must be > 0"));
            }
        }
        self.duration.validate()
    }

    /// Steps needed to cruise out of a full lot, rounded half-up to the nearest integer.
    /// The small slack keeps exact halves from rounding down through float noise.
    pub fn lot_delay_steps(&self) -> usize {
        (self.lot_circuit / (self.cruise_speed_off * self.dt) + 0.5 + 1e-9).floor() as usize
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Per-step flow histories the re-departure convolution and the lot delay need.
/// Entry `i - 1` holds step `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowHistory {
    pub o_c: Vec<f64>,
    pub o_m_off: Vec<f64>,
    pub q_off_on: Vec<f64>,
    pub q_out_off: Vec<f64>,
}

impl FlowHistory {
    /// Vehicles that parked off street during step `i` (1-based).
    fn off_cohort(&self, i: usize) -> f64 {
        self.o_m_off[i - 1] - self.q_off_on[i - 1]
    }
}

/// Accumulations at the end of step `step` (veh, fractional).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub step: usize,
    pub n_m_off: f64,
    pub n_m_on: f64,
    pub n_m_pass: f64,
    pub n_c: f64,
    pub n_off: f64,
    pub n_on: f64,
    /// Cumulative vehicles that left the network.
    pub exited: f64,
    /// Cumulative arrivals since the state was created.
    pub entered: f64,
    /// Vehicles present when the state was created (including any in the lot circuit).
    pub initial_total: f64,
    pub history: FlowHistory,
}

impl MacroState {
    /// A state at step 0 with the given accumulations and empty histories.
    pub fn with_accumulations(n_m_off: f64, n_m_on: f64, n_m_pass: f64, n_c: f64, n_off: f64, n_on: f64) -> Self {
        let mut s = MacroState {
            n_m_off,
            n_m_on,
            n_m_pass,
            n_c,
            n_off,
            n_on,
            ..Default::default()
        };
        s.initial_total = s.vehicles_present(0);
        s
    }

    /// A state at `history.o_c.len()` steps with the given accumulations and flow
    /// histories, e.g. rebuilt from plant observations. Vehicles in the lot circuit
    /// are those the histories still hold there after `delay_steps`.
    #[allow(clippy::too_many_arguments)]
    pub fn resumed(
        n_m_off: f64,
        n_m_on: f64,
        n_m_pass: f64,
        n_c: f64,
        n_off: f64,
        n_on: f64,
        history: FlowHistory,
        delay_steps: usize,
    ) -> Result<Self> {
        let mut s = MacroState {
            step: history.o_c.len(),
            n_m_off,
            n_m_on,
            n_m_pass,
            n_c,
            n_off,
            n_on,
            history,
            ..Default::default()
        };
        s.check()?;
        s.initial_total = s.vehicles_present(delay_steps);
        Ok(s)
    }

    /// Active (non-parked) vehicles.
    pub fn active(&self) -> f64 {
        self.n_m_off + self.n_m_on + self.n_m_pass + self.n_c
    }

    /// Vehicles still cruising the lot circuit after being turned away.
    pub fn in_lot_circuit(&self, delay_steps: usize) -> f64 {
        let k = self.step;
        let from = (k + 1).saturating_sub(delay_steps).max(1);
        (from..=k).map(|j| self.history.q_off_on[j - 1]).sum()
    }

    pub fn vehicles_present(&self, delay_steps: usize) -> f64 {
        self.active() + self.n_on + self.n_off + self.in_lot_circuit(delay_steps)
    }

    fn check(&self) -> Result<()> {
        let fields = [
            ("n_m_off", self.n_m_off),
            ("n_m_on", self.n_m_on),
            ("n_m_pass", self.n_m_pass),
            ("n_c", self.n_c),
            ("n_off", self.n_off),
            ("n_on", self.n_on),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(Error::Invariant(format!("accumulation {name} = {v} is negative")));
            }
        }
        let h = &self.history;
        let k = self.step;
        if h.o_c.len() != k || h.o_m_off.len() != k || h.q_off_on.len() != k || h.q_out_off.len() != k {
            return Err(Error::Invariant(format!("history length does not match step {k}")));
        }
        Ok(())
    }
}

/// Arrivals during one step, veh/step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Inflows {
    pub on: f64,
    pub off: f64,
    pub pass: f64,
}

/// Everything computed for one step `k` of the dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepFlows {
    pub k: usize,
    pub n: f64,
    pub v: f64,
    pub v_on: f64,
    pub occupancy_on: f64,
    pub p_c: f64,
    pub p_m: f64,
    pub distance_to_park: f64,
    pub o_c: f64,
    pub o_m_on: f64,
    pub o_m_off: f64,
    pub o_m_pass: f64,
    pub q_out_on: f64,
    pub q_out_off: f64,
    pub q_off_on: f64,
    /// Overflow re-appearing on street this step, `q_off_on(k - k_off)`.
    pub q_off_on_delayed: f64,
    pub inflows: Inflows,
}

/// `q_out_on(k), q_out_off(k)` for a general duration distribution: every parked
/// cohort re-departs with the probability mass its parking age falls into.
pub fn redeparture_flows(history: &FlowHistory, duration: &DurationDistribution, k: usize, dt: f64) -> (f64, f64) {
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 2..=k {
        let mass = duration.cdf((k - i + 1) as f64 * dt) - duration.cdf((k - i) as f64 * dt);
        on += history.o_c[i - 2] * mass;
        off += history.off_cohort(i - 1) * mass;
    }
    (on, off)
}

/// Uniform-duration shortcut on `[0, max_duration]`: every cohort re-departs at rate
/// `dt / max_duration` per step. Matches [`redeparture_flows`] while
/// `k dt <= max_duration`.
pub fn redeparture_flows_uniform(history: &FlowHistory, k: usize, dt: f64, max_duration: f64) -> (f64, f64) {
    let rate = dt / max_duration;
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 2..=k {
        on += history.o_c[i - 2];
        off += history.off_cohort(i - 1);
    }
    (rate * on, rate * off)
}

/// A parameterized macro model with its re-departure kernel precomputed.
#[derive(Clone, Debug)]
pub struct MacroModel {
    params: MacroParams,
    masses: Vec<f64>,
    delay_steps: usize,
}

impl MacroModel {
    pub fn new(params: MacroParams) -> Result<Self> {
        params.validate()?;
        let delay_steps = params.lot_delay_steps();
        let mut m = MacroModel {
            params,
            masses: Vec::new(),
            delay_steps,
        };
        m.extend_kernel(m.params.horizon_steps() + 1);
        Ok(m)
    }

    pub fn params(&self) -> &MacroParams {
        &self.params
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    fn extend_kernel(&mut self, len: usize) {
        let dt = self.params.dt;
        let d = &self.params.duration;
        for j in self.masses.len()..len {
            self.masses.push(d.cdf((j + 1) as f64 * dt) - d.cdf(j as f64 * dt));
        }
    }

    fn mass(&self, lag: usize) -> f64 {
        match self.masses.get(lag) {
            Some(&m) => m,
            None => {
                let dt = self.params.dt;
                let d = &self.params.duration;
                d.cdf((lag + 1) as f64 * dt) - d.cdf(lag as f64 * dt)
            }
        }
    }

    /// Re-departures at step `k` from the cohorts parked during steps `first..=last`.
    fn redepartures(&self, h: &FlowHistory, k: usize, first: usize, last: usize) -> (f64, f64) {
        let mut on = 0.0;
        let mut off = 0.0;
        // cohort parked during step m re-departs at lag k - m - 1
        for m in first.max(1)..=last.min(k - 1) {
            let w = self.mass(k - m - 1);
            if w != 0.0 {
                on += h.o_c[m - 1] * w;
                off += h.off_cohort(m) * w;
            }
        }
        (on, off)
    }

    /// Production, Little's-formula outflows, re-departures and lot overflow for the
    /// step following `state`, with every outflow clamped to what is physically
    /// available.
    pub fn step_flows(&self, state: &MacroState, inflows: Inflows) -> Result<StepFlows> {
        self.step_flows_with(state, inflows, (0.0, 0.0), 1)
    }

    /// `carry` holds the re-departures of cohorts older than `first_cohort`, which
    /// a multi-step run can compute once up front.
    fn step_flows_with(
        &self,
        state: &MacroState,
        inflows: Inflows,
        carry: (f64, f64),
        first_cohort: usize,
    ) -> Result<StepFlows> {
        state.check()?;
        let p = &self.params;
        let k = state.step + 1;
        let dt = p.dt;

        let n = state.active();
        let v = p.nfd.speed(n);
        let v_on = p.cruise_speed_on.min(v);
        let p_c = state.n_c * v_on;
        let p_m = (n * v - p_c).max(0.0);
        let moving = state.n_m_on + state.n_m_off + state.n_m_pass;

        let little = |acc: f64, dist: f64| {
            if moving > 0.0 {
                p_m * acc * dt / (dist * moving)
            } else {
                0.0
            }
        };
        let o_m_off = little(state.n_m_off, p.moving_distance_off).min(state.n_m_off + inflows.off);
        let o_m_on = little(state.n_m_on, p.moving_distance_on).min(state.n_m_on + inflows.on);

        let (fresh_on, fresh_off) = self.redepartures(&state.history, k, first_cohort, k - 1);
        let (q_out_on, q_out_off) = (carry.0 + fresh_on, carry.1 + fresh_off);
        let o_m_pass =
            little(state.n_m_pass, p.moving_distance_pass).min(state.n_m_pass + inflows.pass + q_out_on + q_out_off);

        let free_off = p.capacity_off - state.n_off + q_out_off;
        let q_off_on = (o_m_off - free_off).max(0.0);

        let q_off_on_delayed = if self.delay_steps == 0 {
            q_off_on
        } else if k > self.delay_steps {
            state.history.q_off_on[k - self.delay_steps - 1]
        } else {
            0.0
        };

        let occupancy_on = (state.n_on / p.capacity_on).clamp(0.0, 1.0);
        let distance_to_park = p.distance_to_park.evaluate_saturated(occupancy_on);
        let o_c = (p_c * dt / distance_to_park)
            .min(state.n_c + q_off_on_delayed + o_m_on)
            .min(p.capacity_on - state.n_on + q_out_on)
            .max(0.0);

        Ok(StepFlows {
            k,
            n,
            v,
            v_on,
            occupancy_on,
            p_c,
            p_m,
            distance_to_park,
            o_c,
            o_m_on,
            o_m_off,
            o_m_pass,
            q_out_on,
            q_out_off,
            q_off_on,
            q_off_on_delayed,
            inflows,
        })
    }

    /// Advances `state` by one step of the mass-balance equations.
    pub fn step(&self, state: &mut MacroState, inflows: Inflows) -> Result<StepFlows> {
        self.step_with(state, inflows, (0.0, 0.0), 1)
    }

    fn step_with(
        &self,
        state: &mut MacroState,
        inflows: Inflows,
        carry: (f64, f64),
        first_cohort: usize,
    ) -> Result<StepFlows> {
        let f = self.step_flows_with(state, inflows, carry, first_cohort)?;
        let s = state;
        s.n_m_off += inflows.off - f.o_m_off;
        s.n_m_on += inflows.on - f.o_m_on;
        s.n_m_pass += inflows.pass + f.q_out_on + f.q_out_off - f.o_m_pass;
        s.n_c += f.q_off_on_delayed + f.o_m_on - f.o_c;
        s.n_off += f.o_m_off - f.q_off_on - f.q_out_off;
        s.n_on += f.o_c - f.q_out_on;
        s.exited += f.o_m_pass;
        s.entered += inflows.on + inflows.off + inflows.pass;
        s.step = f.k;
        s.history.o_c.push(f.o_c);
        s.history.o_m_off.push(f.o_m_off);
        s.history.q_off_on.push(f.q_off_on);
        s.history.q_out_off.push(f.q_out_off);

        // rounding can leave -1e-17 where a family is exactly drained
        for v in [
            &mut s.n_m_off,
            &mut s.n_m_on,
            &mut s.n_m_pass,
            &mut s.n_c,
            &mut s.n_off,
            &mut s.n_on,
        ] {
            if *v < 0.0 && *v > -1e-9 {
                *v = 0.0;
            }
        }

        let residual = self.conservation_residual(s);
        let scale = (s.initial_total + s.entered).max(1.0);
        if residual.abs() > 1e-9 * scale {
            return Err(Error::Invariant(format!(
                "conservation residual {residual:e} at step {}",
                f.k
            )));
        }
        s.check()?;
        Ok(f)
    }

    /// `initial + entered - (present + exited)`; zero up to rounding.
    pub fn conservation_residual(&self, s: &MacroState) -> f64 {
        s.initial_total + s.entered - s.vehicles_present(self.delay_steps) - s.exited
    }

    /// Runs from `state` over `demand`, whose entry 0 is the step after `state`.
    pub fn simulate_from(
        &self,
        state: &MacroState,
        demand: &MacroDemand,
        prices: &PriceProfile,
    ) -> Result<MacroTrajectory> {
        let mut s = state.clone();
        let k0 = s.step;
        let carry: Vec<(f64, f64)> = (0..demand.len())
            .map(|j| self.redepartures(&s.history, k0 + 1 + j, 1, k0))
            .collect();
        let mut records = Vec::with_capacity(demand.len());
        let mut flows = Vec::with_capacity(demand.len());
        records.push(MacroRecord::from_state(&s, None, &self.params));
        for i in 0..demand.len() {
            let (on_price, off_price) = prices.at(i);
            let (on, off) = split_demand(demand.parking[i], on_price, off_price, &self.params.logit);
            let inflows = Inflows {
                on,
                off,
                pass: demand.passing[i],
            };
            let f = self.step_with(&mut s, inflows, carry[i], k0 + 1)?;
            records.push(MacroRecord::from_state(&s, Some(&f), &self.params));
            flows.push(f);
        }
        Ok(MacroTrajectory {
            records,
            flows,
            final_state: s,
        })
    }
}

/// Exogenous arrivals per step, veh/step. Parking arrivals are split by the logit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroDemand {
    pub parking: Vec<f64>,
    pub passing: Vec<f64>,
}

impl MacroDemand {
    pub fn new(parking: Vec<f64>, passing: Vec<f64>) -> Result<Self> {
        if parking.len() != passing.len() {
            return Err(invalid("parking and passing demand must cover the same steps"));
        }
        if parking.iter().chain(&passing).any(|v| !(*v >= 0.0)) {
            return Err(invalid("demand must be non-negative"));
        }
        Ok(MacroDemand { parking, passing })
    }

    pub fn len(&self) -> usize {
        self.parking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parking.is_empty()
    }

    /// Steps `from..from + len`, zero-padded past the end.
    pub fn window(&self, from: usize, len: usize) -> MacroDemand {
        let take = |v: &Vec<f64>| (from..from + len).map(|i| v.get(i).copied().unwrap_or(0.0)).collect();
        MacroDemand {
            parking: take(&self.parking),
            passing: take(&self.passing),
        }
    }
}

/// Piecewise-constant prices, one value per pricing interval of `interval_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceProfile {
    pub interval_steps: usize,
    pub on: Vec<f64>,
    pub off: Vec<f64>,
}

impl PriceProfile {
    pub fn constant(on: f64, off: f64) -> Self {
        PriceProfile {
            interval_steps: usize::MAX,
            on: vec![on],
            off: vec![off],
        }
    }

    /// Prices in force during step `i` (0-based from the profile start); the last
    /// interval extends indefinitely.
    pub fn at(&self, i: usize) -> (f64, f64) {
        let idx = i / self.interval_steps.max(1);
        let pick = |v: &Vec<f64>| v.get(idx).or(v.last()).copied().unwrap_or(0.0);
        (pick(&self.on), pick(&self.off))
    }
}

/// One row of `macro_run.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroRecord {
    /// Seconds.
    pub t: f64,
    pub n_m_on: f64,
    pub n_m_off: f64,
    pub n_m_pass: f64,
    pub n_c: f64,
    pub n_on: f64,
    pub n_off: f64,
    pub v: f64,
    #[serde(rename = "O_on")]
    pub occupancy_on: f64,
    pub o_c: f64,
    pub q_off_on: f64,
    pub q_out_on: f64,
    pub q_out_off: f64,
}

impl MacroRecord {
    fn from_state(s: &MacroState, f: Option<&StepFlows>, p: &MacroParams) -> Self {
        MacroRecord {
            // rounded to the microsecond so a 10 s grid prints as 10, 20, ...
            t: (s.step as f64 * p.dt * 3600.0 * 1e6).round() / 1e6,
            n_m_on: s.n_m_on,
            n_m_off: s.n_m_off,
            n_m_pass: s.n_m_pass,
            n_c: s.n_c,
            n_on: s.n_on,
            n_off: s.n_off,
            v: p.nfd.speed(s.active()),
            occupancy_on: s.n_on / p.capacity_on,
            o_c: f.map_or(0.0, |f| f.o_c),
            q_off_on: f.map_or(0.0, |f| f.q_off_on),
            q_out_on: f.map_or(0.0, |f| f.q_out_on),
            q_out_off: f.map_or(0.0, |f| f.q_out_off),
        }
    }

    pub fn active(&self) -> f64 {
        self.n_m_on + self.n_m_off + self.n_m_pass + self.n_c
    }
}

#[derive(Clone, Debug)]
pub struct MacroTrajectory {
    /// Initial state followed by one record per step.
    pub records: Vec<MacroRecord>,
    pub flows: Vec<StepFlows>,
    pub final_state: MacroState,
}

/// Runs the model from an empty network.
pub fn simulate_macro(demand: &MacroDemand, prices: &PriceProfile, params: &MacroParams) -> Result<MacroTrajectory> {
    MacroModel::new(params.clone())?.simulate_from(&MacroState::default(), demand, prices)
}

/// One step of the dynamics; see [`MacroModel::step`].
pub fn macro_step(state: &MacroState, inflows: Inflows, params: &MacroParams) -> Result<MacroState> {
    let mut s = state.clone();
    MacroModel::new(params.clone())?.step(&mut s, inflows)?;
    Ok(s)
}

/// `(q_off_on(k), k_off)` for the step after `state`.
pub fn overflow(state: &MacroState, inflows: Inflows, params: &MacroParams) -> Result<(f64, usize)> {
    let m = MacroModel::new(params.clone())?;
    let f = m.step_flows(state, inflows)?;
    Ok((f.q_off_on, m.delay_steps()))
}

/// `(o_c, o_m_on, o_m_off, o_m_pass)` for the step after `state`.
pub fn productions_and_outflows(
    state: &MacroState,
    inflows: Inflows,
    params: &MacroParams,
) -> Result<(f64, f64, f64, f64)> {
    let f = MacroModel::new(params.clone())?.step_flows(state, inflows)?;
    Ok((f.o_c, f.o_m_on, f.o_m_off, f.o_m_pass))
}
