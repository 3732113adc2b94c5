//! Trip chains and the parking-duration distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::NodeId;

/// Parking duration distribution in hours.
///
/// `Table` is a piecewise-linear CDF through `(x, F(x))` points; it must start at
/// `F = 0` and end at `F = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationDistribution {
    Uniform { lo: f64, hi: f64 },
    Table { points: Vec<(f64, f64)> },
}

impl Default for DurationDistribution {
    fn default() -> Self {
        DurationDistribution::Uniform { lo: 0.0, hi: 1.0 }
    }
}

impl DurationDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let d = DurationDistribution::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn table(points: Vec<(f64, f64)>) -> Result<Self> {
        let d = DurationDistribution::Table { points };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DurationDistribution::Uniform { lo, hi } => {
                if !(*lo >= 0.0 && hi > lo) {
                    return Err(invalid(format!(
                        "uniform duration needs 0 <= lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            DurationDistribution::Table { points } => {
                if points.len() < 2 {
                    return Err(invalid("duration table needs at least two points"));
                }
                if points[0].0 < 0.0 || points[0].1 != 0.0 {
                    return Err(invalid("duration table must start at F = 0 with x >= 0"));
                }
                if (points[points.len() - 1].1 - 1.0).abs() > 1e-12 {
                    return Err(invalid("duration table must end at F = 1"));
                }
                for w in points.windows(2) {
                    if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                        return Err(invalid(
                            "duration table must be strictly increasing in x and monotone in F",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            DurationDistribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            DurationDistribution::Table { points } => {
                if x <= points[0].0 {
                    return 0.0;
                }
                for w in points.windows(2) {
                    let ((x0, f0), (x1, f1)) = (w[0], w[1]);
                    if x <= x1 {
                        return f0 + (f1 - f0) * (x - x0) / (x1 - x0);
                    }
                }
                1.0
            }
        }
    }

    /// Inverse CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            DurationDistribution::Uniform { lo, hi } => lo + u * (hi - lo),
            DurationDistribution::Table { points } => {
                for w in points.windows(2) {
                    let ((x0, f0), (x1, f1)) = (w[0], w[1]);
                    if u <= f1 && f1 > f0 {
                        return x0 + (x1 - x0) * (u - f0) / (f1 - f0);
                    }
                }
                points[points.len() - 1].0
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.gen::<f64>())
    }

    pub fn mean(&self) -> f64 {
        match self {
            DurationDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            DurationDistribution::Table { points } => points
                .windows(2)
                .map(|w| (w[1].1 - w[0].1) * 0.5 * (w[0].0 + w[1].0))
                .sum(),
        }
    }

    /// Probability mass of each step `[j dt, (j+1) dt)` for `j < steps`.
    pub fn step_masses(&self, dt: f64, steps: usize) -> Vec<f64> {
        (0..steps)
            .map(|j| self.cdf((j + 1) as f64 * dt) - self.cdf(j as f64 * dt))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    ParkOn,
    ParkOff,
    Pass,
}

/// One scheduled trip entering the network.
#[derive(Clone, Debug, PartialEq)]
pub struct TripChain {
    pub vehicle: u32,
    /// Seconds from the start of the horizon.
    pub entry_time: f64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub purpose: Purpose,
    /// Hours; unused for passers.
    pub parking_duration: f64,
    pub desired_speed: f64,
    pub desired_cruise_speed: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_cdf_endpoints() {
        let d = DurationDistribution::uniform(0.0, 1.0).unwrap();
        assert_eq!(d.cdf(0.0), 0.0);
        assert_eq!(d.cdf(0.25), 0.25);
        assert_eq!(d.cdf(5.0), 1.0);
        assert_eq!(d.mean(), 0.5);
    }

    #[test]
    fn table_matches_uniform() {
        let u = DurationDistribution::uniform(0.0, 2.0).unwrap();
        let t = DurationDistribution::table(vec![(0.0, 0.0), (2.0, 1.0)]).unwrap();
        for x in [0.0, 0.3, 1.0, 1.7, 2.5] {
            assert!((u.cdf(x) - t.cdf(x)).abs() < 1e-15);
        }
        assert!((t.mean() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_distributions() {
        assert!(DurationDistribution::uniform(1.0, 1.0).is_err());
        assert!(DurationDistribution::uniform(-1.0, 1.0).is_err());
        assert!(DurationDistribution::table(vec![(0.0, 0.1), (1.0, 1.0)]).is_err());
        assert!(DurationDistribution::table(vec![(0.0, 0.0), (1.0, 0.9)]).is_err());
        assert!(DurationDistribution::table(vec![(0.0, 0.0), (1.0, 0.6), (2.0, 0.5), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        let t = DurationDistribution::table(vec![(0.0, 0.0), (0.5, 0.2), (1.0, 1.0)]).unwrap();
        for u in [0.0, 0.1, 0.2, 0.6, 1.0] {
            assert!((t.cdf(t.quantile(u)) - u).abs() < 1e-12);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mean = (0..20000).map(|_| t.sample(&mut rng)).sum::<f64>() / 20000.0;
        assert!((mean - t.mean()).abs() < 0.01);
    }

    #[test]
    fn step_masses_sum_to_one() {
        let d = DurationDistribution::default();
        let m = d.step_masses(10.0 / 3600.0, 400);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((m[0] - 1.0 / 360.0).abs() < 1e-15);
    }
}
