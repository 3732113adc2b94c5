use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demand::DurationDistribution;
use crate::error::{invalid, Error, Result};
use crate::network::{build_grid, load_network, LinkId, Network, NodeId, OffStreetLot};

use super::search::GuidanceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotSpec {
    pub capacity: u32,
    /// km
    pub circuit_length: f64,
    /// km/hr
    pub cruise_speed: f64,
    /// External id of the entry link; by default a link in the upper region.
    pub entry_link: Option<u32>,
}

impl Default for LotSpec {
    fn default() -> Self {
        LotSpec {
            capacity: 50,
            circuit_length: 0.3,
            cruise_speed: 15.0,
            entry_link: None,
        }
    }
}

/// Synthetic grid with separate per-link supplies for the two regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length: f64,
    pub free_flow_speed: f64,
    pub jam_density: f64,
    pub spots_lower: u32,
    pub spots_upper: u32,
    pub lot: Option<LotSpec>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 6,
            cols: 6,
            link_length: 0.1,
            free_flow_speed: 50.0,
            jam_density: 150.0,
            spots_lower: 3,
            spots_upper: 2,
            lot: Some(LotSpec::default()),
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Network> {
        let mut net = build_grid(
            self.rows,
            self.cols,
            self.link_length,
            self.free_flow_speed,
            self.jam_density,
            0,
            0.0,
        )?;
        let ids: Vec<LinkId> = net.link_ids().collect();
        for l in ids {
            let cap = if net.link(l).region == 0 {
                self.spots_lower
            } else {
                self.spots_upper
            };
            if cap > 0 {
                net.set_parking_capacity(l, cap, self.link_length / cap as f64)?;
            }
        }
        if let Some(lot) = &self.lot {
            let entry = match lot.entry_link {
                Some(id) => net
                    .link_ids()
                    .find(|&l| net.link(l).id == id)
                    .ok_or_else(|| invalid(format!("lot entry link {id} not in grid")))?,
                None => {
                    let r = (3 * self.rows / 4).min(self.rows - 1);
                    let c = (self.cols / 2).saturating_sub(1);
                    let from = NodeId(r * self.cols + c);
                    let to = NodeId(r * self.cols + c + 1);
                    net.link_ids()
                        .find(|&l| net.link(l).from == from && net.link(l).to == to)
                        .expect("grid has horizontal links")
                }
            };
            net.add_lot(OffStreetLot {
                id: 0,
                entry_link: entry,
                capacity: lot.capacity,
                circuit_length: lot.circuit_length,
                internal_cruise_speed: lot.cruise_speed,
            })?;
        }
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    Grid(GridSpec),
    File { path: PathBuf },
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::Grid(GridSpec::default())
    }
}

impl NetworkSpec {
    pub fn build(&self) -> Result<Network> {
        match self {
            NetworkSpec::Grid(g) => g.build(),
            NetworkSpec::File { path } => load_network(path),
        }
    }
}

/// Everything a simulation run needs besides the network itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub network: NetworkSpec,
    /// Trip chains of drivers who want to park.
    pub parkers: usize,
    pub passers: usize,
    /// Relative arrival intensity over equal sub-intervals of the horizon.
    pub parker_profile: Vec<f64>,
    pub passer_profile: Vec<f64>,
    /// $ per visit
    pub fee_on: f64,
    pub fee_off: f64,
    pub alpha_on: f64,
    pub alpha_off: f64,
    /// 1/$
    pub beta: f64,
    pub duration: DurationDistribution,
    /// km/hr
    pub desired_speed: f64,
    pub speed_jitter: f64,
    pub cruise_speed: f64,
    pub cruise_jitter: f64,
    /// On-street spots occupied for the whole horizon.
    pub captive_spots: usize,
    /// Spots occupied at the start and vacated at `vacate_per_minute`.
    pub preoccupied_spots: usize,
    pub vacate_per_minute: f64,
    pub guidance: GuidanceConfig,
    /// Seconds.
    pub dt: f64,
    /// Hours.
    pub horizon: f64,
    /// Seconds between re-draws of a cruiser's next-link decision.
    pub search_reevaluation: f64,
    /// Steps without any movement before the run is flagged as gridlocked.
    pub gridlock_steps: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            network: NetworkSpec::default(),
            parkers: 400,
            passers: 600,
            parker_profile: vec![1.0],
            passer_profile: vec![1.0],
            fee_on: 0.0,
            fee_off: 0.0,
            alpha_on: 0.0,
            alpha_off: 0.0,
            beta: 0.3,
            duration: DurationDistribution::default(),
            desired_speed: 50.0,
            speed_jitter: 5.0,
            cruise_speed: 30.0,
            cruise_jitter: 5.0,
            captive_spots: 0,
            preoccupied_spots: 0,
            vacate_per_minute: 0.0,
            guidance: GuidanceConfig::default(),
            dt: 1.0,
            horizon: 1.0,
            search_reevaluation: 30.0,
            gridlock_steps: 600,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("horizon", self.horizon),
            ("desired_speed", self.desired_speed),
            ("cruise_speed", self.cruise_speed),
            ("search_reevaluation", self.search_reevaluation),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("scenario {name} must be > 0, got {v}")));
            }
        }
        if self.speed_jitter < 0.0 || self.cruise_jitter < 0.0 || self.cruise_jitter >= self.cruise_speed {
            return Err(invalid("speed jitters must be >= 0 and below the cruise speed"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("fee coefficient beta must be >= 0"));
        }
        if !(self.vacate_per_minute >= 0.0) {
            return Err(invalid("vacate rate must be >= 0"));
        }
        for (name, p) in [
            ("parker_profile", &self.parker_profile),
            ("passer_profile", &self.passer_profile),
        ] {
            if p.is_empty() || p.iter().any(|w| !(*w >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return Err(invalid(format!(
                    "{name} needs non-negative weights with a positive sum"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.guidance.compliance) {
            return Err(invalid("compliance must be in [0, 1]"));
        }
        self.duration.validate()
    }

    pub fn steps(&self) -> usize {
        (self.horizon * 3600.0 / self.dt).round() as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("scenario line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    /// Expected parking and passing arrivals per interval of `dt_hours` (the macro
    /// model's demand).
    pub fn expected_arrivals(&self, dt_hours: f64) -> (Vec<f64>, Vec<f64>) {
        let steps = (self.horizon / dt_hours).round() as usize;
        let spread = |total: usize, profile: &[f64]| -> Vec<f64> {
            let sum: f64 = profile.iter().sum();
            (0..steps)
                .map(|k| {
                    // integrate the piecewise-constant intensity over the step
                    let (a, b) = (k as f64 / steps as f64, (k + 1) as f64 / steps as f64);
                    let m = profile.len() as f64;
                    let mut mass = 0.0;
                    for (j, w) in profile.iter().enumerate() {
                        let (lo, hi) = (j as f64 / m, (j + 1) as f64 / m);
                        let overlap = (b.min(hi) - a.max(lo)).max(0.0);
                        mass += w / sum * overlap * m;
                    }
                    total as f64 * mass
                })
                .collect()
        };
        (
            spread(self.parkers, &self.parker_profile),
            spread(self.passers, &self.passer_profile),
        )
    }
}

/// Arrival time in seconds drawn from a piecewise-constant intensity over the horizon.
pub(crate) fn sample_arrival<R: Rng + ?Sized>(profile: &[f64], horizon_s: f64, rng: &mut R) -> f64 {
    let total: f64 = profile.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut idx = profile.len() - 1;
    for (i, w) in profile.iter().enumerate() {
        if u < *w {
            idx = i;
            break;
        }
        u -= w;
    }
    let width = horizon_s / profile.len() as f64;
    (idx as f64 + rng.gen::<f64>()) * width
}

pub(crate) fn jittered<R: Rng + ?Sized>(centre: f64, jitter: f64, rng: &mut R) -> f64 {
    if jitter > 0.0 {
        rng.gen_range(centre - jitter..=centre + jitter)
    } else {
        centre
    }
}

pub(crate) fn pick_other<R: Rng + ?Sized>(nodes: &[NodeId], not: NodeId, rng: &mut R) -> NodeId {
    let others: Vec<NodeId> = nodes.iter().copied().filter(|&n| n != not).collect();
    *others.choose(rng).unwrap_or(&not)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_scenario() {
        let net = GridSpec::default().build().unwrap();
        // 6x6 grid: 120 directed links split evenly between the regions
        assert_eq!(net.links().len(), 120);
        assert_eq!(net.total_parking_capacity(), 60 * 3 + 60 * 2);
        let lot = &net.lots()[0];
        assert_eq!(net.link(lot.entry_link).region, 1);
    }

    #[test]
    fn config_json_defaults_and_errors() {
        let cfg = ScenarioConfig::from_json(r#"{"parkers": 10, "seed": 4}"#).unwrap();
        assert_eq!(cfg.parkers, 10);
        assert_eq!(cfg.dt, 1.0);
        assert!(ScenarioConfig::from_json(r#"{"dt": 0}"#).is_err());
        let err = ScenarioConfig::from_json("{\n\"parkers\": \"x\"}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn expected_arrivals_sum() {
        let cfg = ScenarioConfig {
            parkers: 360,
            passers: 720,
            parker_profile: vec![1.0, 3.0],
            ..Default::default()
        };
        let (p, q) = cfg.expected_arrivals(10.0 / 3600.0);
        assert_eq!(p.len(), 360);
        assert!((p.iter().sum::<f64>() - 360.0).abs() < 1e-9);
        assert!((q.iter().sum::<f64>() - 720.0).abs() < 1e-9);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[359] - 1.5).abs() < 1e-12);
    }
}
