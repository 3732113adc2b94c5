use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::events::Family;
use super::sim::{RunOutput, StepStats};

/// Travel recorded over one slice of time: total vehicle-km and vehicle-hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdieSample {
    /// Start of the slice, s.
    pub t: f64,
    pub duration: f64,
    pub distance: f64,
    pub time: f64,
}

impl From<&StepStats> for EdieSample {
    fn from(s: &StepStats) -> Self {
        EdieSample {
            t: s.t - s.dt,
            duration: s.dt,
            distance: s.veh_km,
            time: s.veh_h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdPoint {
    /// End of the window, s.
    pub t_s: f64,
    /// veh/km
    #[serde(rename = "K")]
    pub k: f64,
    /// veh/h
    #[serde(rename = "Q")]
    pub q: f64,
    /// km/h
    #[serde(rename = "V")]
    pub v: f64,
}

impl NfdPoint {
    /// Average number of vehicles on a network of length `length`.
    pub fn accumulation(&self, length: f64) -> f64 {
        self.k * length
    }
}

/// Network flow, density and speed per window of `window` seconds over a network of
/// total lane length `length` km. Windows without travel are left out.
pub fn measure_nfd(samples: &[EdieSample], length: f64, window: f64) -> Result<Vec<NfdPoint>> {
    if !(length > 0.0) {
        return Err(invalid("network length must be positive"));
    }
    if !(window > 0.0) {
        return Err(invalid("measurement window must be positive"));
    }
    let mut out = Vec::new();
    let mut start = match samples.first() {
        Some(s) => s.t,
        None => return Ok(out),
    };
    let mut dist = 0.0;
    let mut time = 0.0;
    let flush = |start: f64, dist: f64, time: f64, out: &mut Vec<NfdPoint>| {
        let tw = window / 3600.0;
        let k = time / (length * tw);
        if k > 0.0 {
            let q = dist / (length * tw);
            out.push(NfdPoint {
                t_s: start + window,
                k,
                q,
                v: q / k,
            });
        }
    };
    for s in samples {
        while s.t >= start + window - 1e-9 {
            flush(start, dist, time, &mut out);
            start += window;
            dist = 0.0;
            time = 0.0;
        }
        dist += s.distance;
        time += s.time;
    }
    if let Some(last) = samples.last() {
        if last.t + last.duration >= start + window - 1e-9 {
            flush(start, dist, time, &mut out);
        }
    }
    Ok(out)
}

pub fn nfd_from_run(run: &RunOutput, window: f64) -> Result<Vec<NfdPoint>> {
    let samples: Vec<EdieSample> = run.stats.iter().map(EdieSample::from).collect();
    measure_nfd(&samples, run.network_length, window)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    /// Averages over vehicles that entered the network.
    pub avg_travel_time_s: f64,
    pub avg_delay_s: f64,
    pub avg_speed_kmh: f64,
    pub avg_distance_km: f64,
    /// Parked parkers over scheduled parkers; absent without parking demand.
    pub completion_rate: Option<f64>,
    /// Search distance of each vehicle that parked on street, km.
    pub distance_to_park: Vec<f64>,
    pub mean_distance_to_park: Option<f64>,
    /// (t_s, on-street occupancy, lot occupancy) per step.
    pub occupancy: Vec<(f64, f64, f64)>,
    /// Vehicle-hours spent cruising on street.
    pub cruising_veh_h: f64,
    /// Vehicle-hours spent in lot circuits after a rejection.
    pub deadweight_veh_h: f64,
    pub ineffective_veh_h: f64,
    pub vehicles: usize,
    pub exited: usize,
}

pub fn performance_metrics(run: &RunOutput) -> PerformanceMetrics {
    let entered: Vec<_> = run.vehicles.iter().filter(|v| v.injected).collect();
    let n = entered.len().max(1) as f64;
    let avg_travel_time_s = entered.iter().map(|v| v.time_on_road * 3600.0).sum::<f64>() / n;
    let avg_delay_s = entered
        .iter()
        .map(|v| (v.time_on_road - v.free_flow_time) * 3600.0)
        .sum::<f64>()
        / n;
    let avg_distance_km = entered.iter().map(|v| v.distance).sum::<f64>() / n;
    let total_time: f64 = entered.iter().map(|v| v.time_on_road).sum();
    let avg_speed_kmh = if total_time > 0.0 {
        entered.iter().map(|v| v.distance).sum::<f64>() / total_time
    } else {
        0.0
    };

    let mut first_parkings = 0usize;
    let mut distance_to_park = Vec::new();
    let mut parked = std::collections::BTreeSet::new();
    for e in run.log.events() {
        let parks = matches!(e.to, Family::ParkedOn | Family::ParkedOff);
        if parks && parked.insert(e.vehicle) {
            first_parkings += 1;
        }
        match (e.from, e.to) {
            (Some(Family::MovingOn), Family::ParkedOn) => distance_to_park.push(0.0),
            (Some(Family::Cruising), Family::ParkedOn) => distance_to_park.push(e.distance),
            _ => {}
        }
    }
    let completion_rate = (run.parker_demand > 0).then(|| first_parkings as f64 / run.parker_demand as f64);
    let mean_distance_to_park =
        (!distance_to_park.is_empty()).then(|| distance_to_park.iter().sum::<f64>() / distance_to_park.len() as f64);

    let cruising_veh_h = run
        .stats
        .iter()
        .map(|s| s.n_cruising as f64 * s.dt / 3600.0)
        .sum::<f64>();
    let deadweight_veh_h = run
        .stats
        .iter()
        .map(|s| s.n_in_circuit as f64 * s.dt / 3600.0)
        .sum::<f64>();

    PerformanceMetrics {
        avg_travel_time_s,
        avg_delay_s,
        avg_speed_kmh,
        avg_distance_km,
        completion_rate,
        distance_to_park,
        mean_distance_to_park,
        occupancy: run
            .stats
            .iter()
            .map(|s| (s.t, s.occupancy_on, s.occupancy_off))
            .collect(),
        cruising_veh_h,
        deadweight_veh_h,
        ineffective_veh_h: cruising_veh_h + deadweight_veh_h,
        vehicles: entered.len(),
        exited: run.stats.last().map_or(0, |s| s.exited),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn constant(speeds: &[f64], seconds: usize) -> Vec<EdieSample> {
        (0..seconds)
            .map(|i| EdieSample {
                t: i as f64,
                duration: 1.0,
                distance: speeds.iter().sum::<f64>() / 3600.0,
                time: speeds.len() as f64 / 3600.0,
            })
            .collect()
    }

    #[test]
    fn single_vehicle_speed() {
        let pts = measure_nfd(&constant(&[50.0], 60), 1.0, 60.0).unwrap();
        assert_eq!(pts.len(), 1);
        assert_relative_eq!(pts[0].v, 50.0, epsilon = 1e-9);
        assert_relative_eq!(pts[0].k, 1.0, epsilon = 1e-9);
        assert_relative_eq!(pts[0].q, 50.0, epsilon = 1e-9);
    }

    #[test]
    fn two_vehicles_average() {
        let pts = measure_nfd(&constant(&[30.0, 50.0], 120), 1.0, 60.0).unwrap();
        assert_eq!(pts.len(), 2);
        for p in pts {
            assert_relative_eq!(p.v, 40.0, epsilon = 1e-9);
            assert_relative_eq!(p.k, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_windows_are_skipped() {
        let mut s = constant(&[], 60);
        s.extend(constant(&[50.0], 60).into_iter().map(|mut x| {
            x.t += 60.0;
            x
        }));
        let pts = measure_nfd(&s, 2.0, 60.0).unwrap();
        assert_eq!(pts.len(), 1);
        assert_relative_eq!(pts[0].t_s, 120.0);
        assert_relative_eq!(pts[0].v, 50.0, epsilon = 1e-9);
    }

    #[test]
    fn partial_window_is_dropped() {
        let pts = measure_nfd(&constant(&[50.0], 90), 1.0, 60.0).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn bad_arguments() {
        assert!(measure_nfd(&[], 0.0, 60.0).is_err());
        assert!(measure_nfd(&[], 1.0, 0.0).is_err());
        assert!(measure_nfd(&[], 1.0, 60.0).unwrap().is_empty());
    }
}
