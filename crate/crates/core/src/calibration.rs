//! Estimating macro-model inputs from simulator runs and comparing the two models.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{self, bin_means, DistanceModel, ModelKind};
use crate::fitting::{goodness, levenberg_marquardt, LmOptions};
use crate::macro_model::{LogitParams, MacroDemand, MacroParams, MacroRecord, MacroState, NfdModel};
use crate::micro::{nfd_from_run, Family, ParkingEventLog, RunOutput, ScenarioConfig};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdFitOptions {
    /// Accumulation bin width for the sample weights, veh.
    pub bin_width: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NfdFitOptions {
    fn default() -> Self {
        NfdFitOptions {
            bin_width: 10.0,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdFit {
    pub model: NfdModel,
    pub rmse: f64,
    pub r_squared: f64,
    pub samples: usize,
    pub bins: usize,
}

fn logistic(n: f64, p: &[f64]) -> f64 {
    p[0] / (1.0 + ((n - p[1]) / p[2]).exp())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weighted logistic fit of speed against accumulation. Each sample is weighted by the
/// inverse of its accumulation bin's population.
pub fn fit_nfd(samples: &[(f64, f64)], opts: NfdFitOptions) -> Result<NfdFit> {
    if !(opts.bin_width > 0.0) {
        return Err(invalid("NFD bin width must be positive"));
    }
    if samples.iter().any(|(n, v)| !n.is_finite() || !v.is_finite()) {
        return Err(invalid("NFD samples must be finite"));
    }
    if samples.len() < 50 {
        return Err(Error::FitDegenerate(format!(
            "{} NFD samples, need at least 50",
            samples.len()
        )));
    }
    let bin = |n: f64| (n / opts.bin_width).floor() as i64;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &(n, _) in samples {
        *counts.entry(bin(n)).or_default() += 1;
    }
    if counts.len() < 3 {
        return Err(Error::FitDegenerate(format!(
            "NFD samples span {} accumulation bins, need at least 3",
            counts.len()
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let ws: Vec<f64> = xs.iter().map(|&n| 1.0 / counts[&bin(n)] as f64).collect();

    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let v_max = ys.iter().copied().fold(f64::MIN, f64::max).max(1e-6);
    let median = quantile(&sorted, 0.5);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)).max(opts.bin_width);
    let feasible = |p: &[f64]| p[0] > 0.0 && p[2] > 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![[v_max, median, iqr]];
    for _ in 0..opts.restarts {
        starts.push([
            v_max * rng.gen_range(0.8..1.5),
            median + iqr * rng.gen_range(-1.0..3.0),
            iqr * rng.gen_range(0.25..4.0),
        ]);
    }
    let opts_lm = LmOptions {
        max_iter: 1000,
        ftol: 1e-18,
    };
    let best = starts
        .iter()
        .map(|p0| levenberg_marquardt(logistic, feasible, &xs, &ys, &ws, p0, opts_lm))
        .min_by(|a, b| a.wsse.total_cmp(&b.wsse))
        .expect("at least one start");
    let model = NfdModel::new(best.params[0], best.params[1], best.params[2])?;
    let pred: Vec<f64> = xs.iter().map(|&n| model.speed(n)).collect();
    let (rmse, r_squared) = goodness(&pred, &ys);
    Ok(NfdFit {
        model,
        rmse,
        r_squared,
        samples: samples.len(),
        bins: counts.len(),
    })
}

/// (average accumulation, space-mean speed) per measurement window of a run.
pub fn nfd_samples(run: &RunOutput, window: f64) -> Result<Vec<(f64, f64)>> {
    Ok(nfd_from_run(run, window)?
        .into_iter()
        .map(|p| (p.accumulation(run.network_length), p.v))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStat {
    /// Mean over replications of the per-replication mean, km.
    pub mean: f64,
    /// Standard deviation of the per-replication means.
    pub std_dev: f64,
    pub per_replication: Vec<f64>,
    pub segments: usize,
}

/// Mean moving distance of families i, ii and iii. `None` when no replication has a
/// completed segment of that family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovingDistances {
    pub on: Option<DistanceStat>,
    pub off: Option<DistanceStat>,
    pub pass: Option<DistanceStat>,
}

/// Completed-segment distances per moving family. A segment is completed when the
/// vehicle leaves the family; cruising distance is a separate family and not included.
pub fn estimate_moving_distances(logs: &[&ParkingEventLog]) -> MovingDistances {
    let stat = |family: Family| -> Option<DistanceStat> {
        let mut per_replication = Vec::new();
        let mut segments = 0;
        for log in logs {
            let d: Vec<f64> = log
                .events()
                .iter()
                .filter(|e| e.from == Some(family))
                .map(|e| e.distance)
                .collect();
            if !d.is_empty() {
                segments += d.len();
                per_replication.push(d.iter().sum::<f64>() / d.len() as f64);
            }
        }
        if per_replication.is_empty() {
            return None;
        }
        let n = per_replication.len() as f64;
        let mean = per_replication.iter().sum::<f64>() / n;
        let var = per_replication.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Some(DistanceStat {
            mean,
            std_dev: var.sqrt(),
            per_replication,
            segments,
        })
    };
    MovingDistances {
        on: stat(Family::MovingOn),
        off: stat(Family::MovingOff),
        pass: stat(Family::Transit),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendFilter {
    Increasing,
    Decreasing,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyReference {
    /// Occupancy when the search started.
    Init,
    /// Mean of the occupancies at search start and at parking.
    Avg,
}

/// One on-street parking, described by the occupancies seen when the search started
/// and when the vehicle parked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub occupancy_start: f64,
    pub occupancy_end: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub distance: f64,
}

impl SearchRecord {
    pub fn increasing(&self) -> bool {
        self.occupancy_end >= self.occupancy_start
    }
}

/// Searches that ended on street. Vehicles that park straight away at their target
/// link give a zero-distance search that starts and ends at the parking event.
pub fn search_records(log: &ParkingEventLog) -> Vec<SearchRecord> {
    let mut out = Vec::new();
    for events in log.by_vehicle().values() {
        let mut start = None;
        for e in events {
            match (e.from, e.to) {
                (_, Family::Cruising) => start = Some((e.occupancy_on, e.t)),
                (Some(Family::Cruising), Family::ParkedOn) => {
                    if let Some((o, t)) = start.take() {
                        out.push(SearchRecord {
                            occupancy_start: o,
                            occupancy_end: e.occupancy_on,
                            t_start: t,
                            t_end: e.t,
                            distance: e.distance,
                        });
                    }
                }
                (Some(Family::MovingOn), Family::ParkedOn) => out.push(SearchRecord {
                    occupancy_start: e.occupancy_on,
                    occupancy_end: e.occupancy_on,
                    t_start: e.t,
                    t_end: e.t,
                    distance: 0.0,
                }),
                _ => {}
            }
        }
    }
    out
}

/// (occupancy, distance to park) observations of completed on-street searches.
pub fn extract_occupancy_distance(
    logs: &[&ParkingEventLog],
    filter: TrendFilter,
    reference: OccupancyReference,
) -> Vec<(f64, f64)> {
    logs.iter()
        .flat_map(|log| search_records(log))
        .filter(|r| match filter {
            TrendFilter::Increasing => r.increasing(),
            TrendFilter::Decreasing => !r.increasing(),
            TrendFilter::Both => true,
        })
        .map(|r| {
            let o = match reference {
                OccupancyReference::Init => r.occupancy_start,
                OccupancyReference::Avg => 0.5 * (r.occupancy_start + r.occupancy_end),
            };
            (o, r.distance)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceFit {
    pub model: DistanceModel,
    pub filter: TrendFilter,
    pub reference: OccupancyReference,
    pub bin_width: f64,
    pub observations: usize,
    /// Fit quality against the bin means.
    pub rmse: f64,
    pub r_squared: f64,
}

/// Exponential distance-to-park curve fitted to occupancy-bin means of the observations.
pub fn fit_distance_model(
    observations: &[(f64, f64)],
    filter: TrendFilter,
    reference: OccupancyReference,
    bin_width: f64,
) -> Result<DistanceFit> {
    let clipped: Vec<(f64, f64)> = observations.iter().map(|&(o, d)| (o.min(0.999), d)).collect();
    let bins = bin_means(&clipped, bin_width);
    let report = estimators::fit(&bins, ModelKind::ExpDistance)?;
    Ok(DistanceFit {
        model: report.model,
        filter,
        reference,
        bin_width,
        observations: observations.len(),
        rmse: report.rmse,
        r_squared: report.r_squared,
    })
}

/// Spread of occupancy change rates during searches, 1/hr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRateSummary {
    pub searches: usize,
    pub median_abs: f64,
    pub p90_abs: f64,
    pub max_abs: f64,
}

pub fn occupancy_change_rates(logs: &[&ParkingEventLog]) -> ChangeRateSummary {
    let mut rates: Vec<f64> = logs
        .iter()
        .flat_map(|log| search_records(log))
        .filter(|r| r.t_end > r.t_start)
        .map(|r| ((r.occupancy_end - r.occupancy_start) / ((r.t_end - r.t_start) / 3600.0)).abs())
        .collect();
    rates.sort_by(f64::total_cmp);
    if rates.is_empty() {
        return ChangeRateSummary {
            searches: 0,
            median_abs: 0.0,
            p90_abs: 0.0,
            max_abs: 0.0,
        };
    }
    ChangeRateSummary {
        searches: rates.len(),
        median_abs: quantile(&rates, 0.5),
        p90_abs: quantile(&rates, 0.9),
        max_abs: *rates.last().expect("non-empty"),
    }
}

/// Trajectories on a common time grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Seconds.
    pub t: Vec<f64>,
    pub n_on: Vec<f64>,
    pub n_off: Vec<f64>,
    pub active: Vec<f64>,
    /// Space-mean speed, NaN where undefined.
    pub v: Vec<f64>,
}

impl Trajectory {
    pub fn from_macro(records: &[MacroRecord]) -> Self {
        Trajectory {
            t: records.iter().map(|r| r.t).collect(),
            n_on: records.iter().map(|r| r.n_on).collect(),
            n_off: records.iter().map(|r| r.n_off).collect(),
            active: records.iter().map(|r| r.active()).collect(),
            v: records.iter().map(|r| r.v).collect(),
        }
    }

    /// Samples a simulator run every `dt` seconds, starting at 0. Speeds are Edie
    /// speeds over the preceding interval; the first point has none.
    pub fn from_micro(run: &RunOutput, dt: f64) -> Result<Self> {
        let step = run.config.dt;
        let ratio = dt / step;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(invalid(format!(
                "sampling interval {dt} s is not a multiple of the simulator step {step} s"
            )));
        }
        let ratio = ratio.round() as usize;
        let points = run.stats.len() / ratio;
        let mut out = Trajectory {
            t: vec![0.0],
            n_on: vec![run.initial_parked_on as f64],
            n_off: vec![0.0],
            active: vec![0.0],
            v: vec![f64::NAN],
        };
        for p in 1..=points {
            let window = &run.stats[(p - 1) * ratio..p * ratio];
            let last = window.last().expect("non-empty window");
            let km: f64 = window.iter().map(|s| s.veh_km).sum();
            let h: f64 = window.iter().map(|s| s.veh_h).sum();
            out.t.push(last.t);
            out.n_on.push(last.n_parked_on as f64);
            out.n_off.push(last.n_parked_off as f64);
            out.active.push(last.active() as f64);
            out.v.push(if h > 0.0 { km / h } else { f64::NAN });
        }
        Ok(out)
    }

    fn series(&self, q: Quantity) -> &[f64] {
        match q {
            Quantity::NOn => &self.n_on,
            Quantity::NOff => &self.n_off,
            Quantity::Active => &self.active,
            Quantity::Speed => &self.v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    NOn,
    NOff,
    Active,
    Speed,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::NOn, Quantity::NOff, Quantity::Active, Quantity::Speed];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityMetrics {
    /// `|macro - mean| / mean` at the time the replication mean peaks.
    pub peak_relative_error: f64,
    pub rmse: f64,
    /// Share of steps where the macro value lies within the replication min-max band.
    pub envelope_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub metrics: BTreeMap<Quantity, QuantityMetrics>,
    pub replications: usize,
}

/// Compares a macro trajectory with simulator replications on the same time grid.
/// Steps where a speed is undefined are skipped.
pub fn validate(macro_traj: &Trajectory, micro: &[Trajectory]) -> Result<ValidationReport> {
    if micro.is_empty() {
        return Err(invalid("validation needs at least one replication"));
    }
    for m in micro {
        if m.t.len() != macro_traj.t.len() || m.t.iter().zip(&macro_traj.t).any(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(invalid("macro and micro trajectories are on different time grids"));
        }
    }
    let mut metrics = BTreeMap::new();
    for q in Quantity::ALL {
        let mac = macro_traj.series(q);
        let mut peak: Option<(f64, f64)> = None;
        let mut sq = 0.0;
        let mut inside = 0usize;
        let mut counted = 0usize;
        for i in 0..mac.len() {
            let vals: Vec<f64> = micro.iter().map(|m| m.series(q)[i]).filter(|x| x.is_finite()).collect();
            if vals.len() != micro.len() || !mac[i].is_finite() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            counted += 1;
            sq += (mac[i] - mean).powi(2);
            let tol = 1e-9 * hi.abs().max(1.0);
            if mac[i] >= lo - tol && mac[i] <= hi + tol {
                inside += 1;
            }
            if peak.is_none_or(|(m, _)| mean > m) {
                peak = Some((mean, mac[i]));
            }
        }
        let peak_relative_error = match peak {
            Some((m, x)) if m > 0.0 => (x - m).abs() / m,
            Some((_, x)) => x.abs(),
            None => f64::NAN,
        };
        let n = counted.max(1) as f64;
        metrics.insert(
            q,
            QuantityMetrics {
                peak_relative_error,
                rmse: (sq / n).sqrt(),
                envelope_fraction: inside as f64 / n,
            },
        );
    }
    Ok(ValidationReport {
        metrics,
        replications: micro.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Edie measurement window for NFD samples, s.
    pub nfd_window: f64,
    pub nfd: NfdFitOptions,
    pub filter: TrendFilter,
    pub reference: OccupancyReference,
    pub occupancy_bin: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            nfd_window: 60.0,
            nfd: NfdFitOptions::default(),
            filter: TrendFilter::Increasing,
            reference: OccupancyReference::Init,
            occupancy_bin: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub nfd: NfdFit,
    pub moving_distances: MovingDistances,
    pub distance_to_park: DistanceFit,
    pub occupancy_change_rates: ChangeRateSummary,
    pub replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
}

impl CalibrationReport {
    /// Overrides the calibrated fields of `params`.
    pub fn apply_to(&self, params: &mut MacroParams) -> Result<()> {
        let need = |s: &Option<DistanceStat>, name: &str| {
            s.as_ref()
                .map(|s| s.mean)
                .filter(|m| *m > 0.0)
                .ok_or_else(|| invalid(format!("calibration has no moving distance for {name}")))
        };
        params.nfd = self.nfd.model;
        params.moving_distance_on = need(&self.moving_distances.on, "on-street parkers")?;
        params.moving_distance_off = need(&self.moving_distances.off, "off-street parkers")?;
        params.moving_distance_pass = need(&self.moving_distances.pass, "passing vehicles")?;
        params.distance_to_park = self.distance_to_park.model.clone();
        params.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: format!("calibration file line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

/// Fits all macro inputs from a set of replications.
pub fn calibrate(runs: &[RunOutput], opts: &CalibrationOptions) -> Result<CalibrationReport> {
    if runs.is_empty() {
        return Err(invalid("calibration needs at least one run"));
    }
    let mut samples = Vec::new();
    for r in runs {
        samples.extend(nfd_samples(r, opts.nfd_window)?);
    }
    let logs: Vec<&ParkingEventLog> = runs.iter().map(|r| &r.log).collect();
    calibrate_from_logs(&samples, &logs, opts)
}

/// [`calibrate`] from stored outputs: (accumulation, speed) NFD samples and one event
/// log per replication. `opts.nfd_window` is not used.
pub fn calibrate_from_logs(
    nfd_samples: &[(f64, f64)],
    logs: &[&ParkingEventLog],
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    if logs.is_empty() {
        return Err(invalid("calibration needs at least one event log"));
    }
    if let Some(i) = logs.iter().position(|l| l.is_empty()) {
        return Err(invalid(format!("event log {i} is empty")));
    }
    let nfd = fit_nfd(nfd_samples, opts.nfd)?;
    let moving_distances = estimate_moving_distances(logs);
    let observations = extract_occupancy_distance(logs, opts.filter, opts.reference);
    let distance_to_park = fit_distance_model(&observations, opts.filter, opts.reference, opts.occupancy_bin)?;
    Ok(CalibrationReport {
        nfd,
        moving_distances,
        distance_to_park,
        occupancy_change_rates: occupancy_change_rates(logs),
        replications: logs.len(),
        validation: None,
    })
}

/// Macro parameters for a simulator scenario; the calibrated fields come from
/// `report`, the rest from the scenario and network. `dt` in seconds.
pub fn macro_params_for(
    cfg: &ScenarioConfig,
    net: &Network,
    report: &CalibrationReport,
    dt: f64,
) -> Result<MacroParams> {
    let lot = net.lots().first();
    let mut params = MacroParams {
        nfd: report.nfd.model,
        cruise_speed_on: cfg.cruise_speed,
        cruise_speed_off: lot.map_or(15.0, |l| l.internal_cruise_speed),
        moving_distance_on: 1.0,
        moving_distance_off: 1.0,
        moving_distance_pass: 1.0,
        distance_to_park: report.distance_to_park.model.clone(),
        capacity_on: net.total_parking_capacity() as f64,
        // the macro model needs a positive lot size; a tiny one stands in for no lot
        capacity_off: lot.map_or(1e-9, |l| l.capacity as f64),
        lot_circuit: lot.map_or(0.3, |l| l.circuit_length),
        dt: dt / 3600.0,
        horizon: cfg.horizon,
        duration: cfg.duration.clone(),
        logit: LogitParams {
            alpha_on: cfg.alpha_on,
            alpha_off: cfg.alpha_off,
            beta: cfg.beta,
        },
    };
    report.apply_to(&mut params)?;
    Ok(params)
}

/// Expected scenario arrivals per macro step.
pub fn macro_demand_for(cfg: &ScenarioConfig, params: &MacroParams) -> Result<MacroDemand> {
    let (parking, passing) = cfg.expected_arrivals(params.dt);
    MacroDemand::new(parking, passing)
}

/// Macro state at time zero: captive and pre-occupied spots are already parked.
pub fn macro_initial_state(cfg: &ScenarioConfig) -> MacroState {
    MacroState::with_accumulations(
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        (cfg.captive_spots + cfg.preoccupied_spots) as f64,
    )
}
