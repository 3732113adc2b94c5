//! Time-to-park and distance-to-park as functions of on-street occupancy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitting::{goodness, levenberg_marquardt, weighted_line, LmOptions};

/// Occupancy used in place of anything above it for the `1/(1-O)` kinds when a
/// caller needs a finite value (the macro model can touch full occupancy).
pub const SATURATION_OCCUPANCY: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceModel {
    /// `T = a exp(b O)`, minutes.
    ExpTime { a: f64, b: f64 },
    /// `T = c / (1 - O)`, minutes.
    HyperbolicTime { c: f64 },
    /// `L = d_p / (1 - O)`, km: expected spots screened times spot spacing.
    Geometric { spot_spacing: f64 },
    /// `L = d_np / (1 - O^m) + d / (1 - O)`, km.
    ModifiedGeometric {
        no_parking_distance: f64,
        spacing: f64,
        spots_per_link: f64,
    },
    /// `L = a exp(b O)`, km.
    ExpDistance { a: f64, b: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ExpTime,
    HyperbolicTime,
    Geometric,
    ModifiedGeometric,
    ExpDistance,
}

impl ModelKind {
    pub fn parameter_count(self) -> usize {
        match self {
            ModelKind::HyperbolicTime | ModelKind::Geometric => 1,
            ModelKind::ExpTime | ModelKind::ExpDistance => 2,
            ModelKind::ModifiedGeometric => 3,
        }
    }

    pub fn is_singular_at_full(self) -> bool {
        matches!(
            self,
            ModelKind::HyperbolicTime | ModelKind::Geometric | ModelKind::ModifiedGeometric
        )
    }
}

impl DistanceModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            DistanceModel::ExpTime { .. } => ModelKind::ExpTime,
            DistanceModel::HyperbolicTime { .. } => ModelKind::HyperbolicTime,
            DistanceModel::Geometric { .. } => ModelKind::Geometric,
            DistanceModel::ModifiedGeometric { .. } => ModelKind::ModifiedGeometric,
            DistanceModel::ExpDistance { .. } => ModelKind::ExpDistance,
        }
    }

    pub fn evaluate(&self, occupancy: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&occupancy) {
            return Err(invalid(format!("occupancy {occupancy} outside [0, 1]")));
        }
        if occupancy >= 1.0 && self.kind().is_singular_at_full() {
            return Err(Error::Singular { occupancy });
        }
        let o = occupancy;
        Ok(match *self {
            DistanceModel::ExpTime { a, b } | DistanceModel::ExpDistance { a, b } => a * (b * o).exp(),
            DistanceModel::HyperbolicTime { c } => c / (1.0 - o),
            DistanceModel::Geometric { spot_spacing } => spot_spacing / (1.0 - o),
            DistanceModel::ModifiedGeometric {
                no_parking_distance,
                spacing,
                spots_per_link,
            } => {
                let first = if o == 0.0 {
                    no_parking_distance
                } else {
                    no_parking_distance / (1.0 - o.powf(spots_per_link))
                };
                first + spacing / (1.0 - o)
            }
        })
    }

    /// [`evaluate`](Self::evaluate) with occupancy clamped to
    /// [`SATURATION_OCCUPANCY`] for the singular kinds.
    pub fn evaluate_saturated(&self, occupancy: f64) -> f64 {
        let o = occupancy.clamp(0.0, 1.0);
        let o = if self.kind().is_singular_at_full() {
            o.min(SATURATION_OCCUPANCY)
        } else {
            o
        };
        self.evaluate(o).expect("clamped occupancy is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: DistanceModel,
    pub rmse: f64,
    pub r_squared: f64,
    pub observations: usize,
}

/// Least-squares fit of `kind` to `(occupancy, value)` observations.
///
/// Exponential kinds are fitted log-linearly (non-positive values are dropped), the
/// one-parameter `1/(1-O)` kinds in closed form through the origin, and the
/// modified geometric form by Levenberg-Marquardt.
pub fn fit(observations: &[(f64, f64)], kind: ModelKind) -> Result<FitReport> {
    if observations.len() < kind.parameter_count() {
        return Err(Error::FitDegenerate(format!(
            "{} observations for {} parameters",
            observations.len(),
            kind.parameter_count()
        )));
    }
    if let Some(&(o, _)) = observations.iter().find(|(o, _)| !(0.0..1.0).contains(o)) {
        return Err(invalid(format!("occupancy {o} outside [0, 1)")));
    }
    let first = observations[0].0;
    if observations.iter().all(|(o, _)| (o - first).abs() < 1e-12) {
        return Err(Error::FitDegenerate("all occupancies are equal".into()));
    }

    let model = match kind {
        ModelKind::ExpTime | ModelKind::ExpDistance => {
            let (xs, ys): (Vec<f64>, Vec<f64>) = observations
                .iter()
                .filter(|(_, v)| *v > 0.0)
                .map(|&(o, v)| (o, v.ln()))
                .unzip();
            let (ln_a, b) = weighted_line(&xs, &ys, &vec![1.0; xs.len()])
                .ok_or_else(|| Error::FitDegenerate("fewer than two distinct positive observations".into()))?;
            if kind == ModelKind::ExpTime {
                DistanceModel::ExpTime { a: ln_a.exp(), b }
            } else {
                DistanceModel::ExpDistance { a: ln_a.exp(), b }
            }
        }
        ModelKind::HyperbolicTime | ModelKind::Geometric => {
            let (sxy, sxx) = observations.iter().fold((0.0, 0.0), |(sxy, sxx), &(o, v)| {
                let x = 1.0 / (1.0 - o);
                (sxy + x * v, sxx + x * x)
            });
            let c = sxy / sxx;
            if kind == ModelKind::Geometric {
                DistanceModel::Geometric { spot_spacing: c }
            } else {
                DistanceModel::HyperbolicTime { c }
            }
        }
        ModelKind::ModifiedGeometric => {
            let xs: Vec<f64> = observations.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = observations.iter().map(|p| p.1).collect();
            let model = |o: f64, p: &[f64]| {
                DistanceModel::ModifiedGeometric {
                    no_parking_distance: p[0],
                    spacing: p[1],
                    spots_per_link: p[2],
                }
                .evaluate(o)
                .unwrap_or(f64::INFINITY)
            };
            let feasible = |p: &[f64]| p[0] >= 0.0 && p[1] >= 0.0 && p[2] > 0.0;
            let geo = fit(observations, ModelKind::Geometric)?;
            let DistanceModel::Geometric { spot_spacing } = geo.model else {
                unreachable!()
            };
            let ws = vec![1.0; xs.len()];
            let best = [1.0, 3.0, 10.0]
                .into_iter()
                .map(|m| {
                    let p0 = [0.1 * spot_spacing.max(1e-6), 0.9 * spot_spacing.max(1e-6), m];
                    levenberg_marquardt(model, feasible, &xs, &ys, &ws, &p0, LmOptions::default())
                })
                .min_by(|a, b| a.wsse.total_cmp(&b.wsse))
                .expect("at least one start");
            DistanceModel::ModifiedGeometric {
                no_parking_distance: best.params[0],
                spacing: best.params[1],
                spots_per_link: best.params[2],
            }
        }
    };

    let obs: Vec<f64> = observations.iter().map(|p| p.1).collect();
    let pred: Vec<f64> = observations
        .iter()
        .map(|&(o, _)| model.evaluate(o))
        .collect::<Result<_>>()?;
    let (rmse, r_squared) = goodness(&pred, &obs);
    Ok(FitReport {
        model,
        rmse,
        r_squared,
        observations: observations.len(),
    })
}

/// Mean occupancy and mean value per occupancy bin of width `width`, in bin order.
pub fn bin_means(observations: &[(f64, f64)], width: f64) -> Vec<(f64, f64)> {
    let mut bins: std::collections::BTreeMap<i64, (f64, f64, usize)> = Default::default();
    for &(o, v) in observations {
        let e = bins.entry((o / width).floor() as i64).or_insert((0.0, 0.0, 0));
        e.0 += o;
        e.1 += v;
        e.2 += 1;
    }
    bins.into_values()
        .map(|(so, sv, n)| (so / n as f64, sv / n as f64))
        .collect()
}

/// Mean number of spots screened until a free one, each spot independently free with
/// probability `1 - occupancy`.
pub fn monte_carlo_screening<R: Rng + ?Sized>(occupancy: f64, trials: usize, rng: &mut R) -> Result<f64> {
    if !(occupancy > 0.0 && occupancy < 1.0) {
        return Err(invalid(format!("screening needs occupancy in (0, 1), got {occupancy}")));
    }
    if trials == 0 {
        return Err(invalid("screening needs at least one trial"));
    }
    let mut total: u64 = 0;
    for _ in 0..trials {
        let mut screened = 1u64;
        while rng.gen::<f64>() < occupancy {
            screened += 1;
        }
        total += screened;
    }
    Ok(total as f64 / trials as f64)
}

/// Standard error of [`monte_carlo_screening`]'s mean (geometric variance `O / (1-O)^2`).
pub fn screening_standard_error(occupancy: f64, trials: usize) -> f64 {
    occupancy.sqrt() / (1.0 - occupancy) / (trials as f64).sqrt()
}
