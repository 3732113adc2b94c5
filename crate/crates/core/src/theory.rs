//! Two-bin speed envelopes with and without cruising-for-parking.
//!
//! The network is idealized as two equal-length bins with Greenshields link
//! dynamics. **`K` is the network-average density**, so a split satisfies
//! `k_1 + k_2 = 2K`; it is not the sum of the bin densities.
//!
//! With cruising, every vehicle in bin 2 is assumed to search for parking at the
//! desired cruising speed `v_c`, which is the worst case for that bin:
//! `v_2 = min(v_c, greenshields(k_2))`.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::network::greenshields_speed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinParams {
    pub free_flow_speed: f64,
    pub cruise_speed: f64,
    pub jam_density: f64,
}

impl BinParams {
    pub fn new(free_flow_speed: f64, cruise_speed: f64, jam_density: f64) -> Result<Self> {
        if !(cruise_speed > 0.0 && cruise_speed <= free_flow_speed) {
            return Err(invalid(format!(
                "cruise speed must lie in (0, v_f]; got v_c={cruise_speed}, v_f={free_flow_speed}"
            )));
        }
        if !(jam_density > 0.0) {
            return Err(invalid("jam density must be > 0"));
        }
        Ok(BinParams {
            free_flow_speed,
            cruise_speed,
            jam_density,
        })
    }

    fn check_density(&self, k: f64) -> Result<()> {
        if !(0.0..=self.jam_density).contains(&k) {
            return Err(invalid(format!("density {k} outside [0, {}]", self.jam_density)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Envelope {
    pub v_max: f64,
    pub v_min: f64,
}

/// Density below which the cruising speed is attainable: `(v_f - v_c) k_j / v_f`.
pub fn critical_density(p: &BinParams) -> f64 {
    (p.free_flow_speed - p.cruise_speed) * p.jam_density / p.free_flow_speed
}

fn bin2_speed(k2: f64, p: &BinParams, cruising: bool) -> f64 {
    let v = greenshields_speed(k2, p.free_flow_speed, p.jam_density);
    if cruising {
        v.min(p.cruise_speed)
    } else {
        v
    }
}

/// Space-mean speed of the two-bin system, `(k_1 v_1 + k_2 v_2) / (k_1 + k_2)`.
/// An empty system reports the free-flow speed.
pub fn two_bin_speed(k1: f64, k2: f64, p: &BinParams, cruising_in_bin2: bool) -> Result<f64> {
    p.check_density(k1)?;
    p.check_density(k2)?;
    if k1 + k2 == 0.0 {
        return Ok(p.free_flow_speed);
    }
    let v1 = greenshields_speed(k1, p.free_flow_speed, p.jam_density);
    let v2 = bin2_speed(k2, p, cruising_in_bin2);
    Ok((k1 * v1 + k2 * v2) / (k1 + k2))
}

pub fn envelope_no_cruising(k: f64, p: &BinParams) -> Result<Envelope> {
    p.check_density(k)?;
    let (vf, kj) = (p.free_flow_speed, p.jam_density);
    let v_max = vf - vf * k / kj;
    let v_min = if k <= kj / 2.0 {
        vf - 2.0 * vf * k / kj
    } else {
        vf * (3.0 - 2.0 * k / kj - kj / k)
    };
    Ok(Envelope { v_max, v_min })
}

/// Envelopes when every bin-2 vehicle cruises. Branch intervals are half-open on the
/// left, matching the closed-form derivation.
pub fn envelope_with_cruising(k: f64, p: &BinParams) -> Result<Envelope> {
    p.check_density(k)?;
    let (vf, vc, kj) = (p.free_flow_speed, p.cruise_speed, p.jam_density);
    let kc = critical_density(p);

    let v_max = if k <= kc / 4.0 {
        vf - 2.0 * vf * k / kj
    } else if k <= 3.0 * kc / 4.0 {
        vc + (vf - vc) * kc / (8.0 * k)
    } else if k <= kc {
        vc + (vf - vc) * (2.0 - kc / k) * (1.0 - k / kc)
    } else {
        vf - vf * k / kj
    };

    let v_min = if k <= kc / 2.0 {
        vc
    } else if k <= kj / 2.0 {
        vf - 2.0 * vf * k / kj
    } else if k <= (kc + kj) / 2.0 {
        vc - vc * kj / (2.0 * k)
    } else {
        vf * (3.0 - 2.0 * k / kj - kj / k)
    };

    Ok(Envelope { v_max, v_min })
}

/// Extremes of [`two_bin_speed`] over every split `k_1 + k_2 = 2K` on a `grid_step`
/// lattice of `k_1` (both feasible endpoints included).
///
/// At `K = 0` the speed depends only on how the vanishing mass is shared, so the
/// lattice runs over the bin-1 share in `[0, 1]` instead.
pub fn brute_force_envelope(k: f64, p: &BinParams, cruising: bool, grid_step: f64) -> Result<Envelope> {
    if !(grid_step > 0.0) {
        return Err(invalid("grid step must be > 0"));
    }
    if !(0.0..=p.jam_density).contains(&k) {
        return Err(invalid(format!("no feasible split for K={k}")));
    }
    let mut v_max = f64::NEG_INFINITY;
    let mut v_min = f64::INFINITY;
    let mut visit = |v: f64| {
        v_max = v_max.max(v);
        v_min = v_min.min(v);
    };

    if k == 0.0 {
        let v1 = p.free_flow_speed;
        let v2 = bin2_speed(0.0, p, cruising);
        let n = (1.0 / grid_step).ceil() as usize;
        for i in 0..=n {
            let share = (i as f64 * grid_step).min(1.0);
            visit(v2 + share * (v1 - v2));
        }
        return Ok(Envelope { v_max, v_min });
    }

    let lo = (2.0 * k - p.jam_density).max(0.0);
    let hi = (2.0 * k).min(p.jam_density);
    let n = ((hi - lo) / grid_step).floor() as usize;
    for i in 0..=n {
        let k1 = (lo + i as f64 * grid_step).min(hi);
        let k2 = (2.0 * k - k1).clamp(0.0, p.jam_density);
        visit(two_bin_speed(k1, k2, p, cruising)?);
    }
    let k2 = (2.0 * k - hi).clamp(0.0, p.jam_density);
    visit(two_bin_speed(hi, k2, p, cruising)?);
    Ok(Envelope { v_max, v_min })
}

/// Densities where an envelope formula switches branch.
pub fn branch_points(p: &BinParams, cruising: bool) -> Vec<f64> {
    let kj = p.jam_density;
    if !cruising {
        return vec![kj / 2.0];
    }
    let kc = critical_density(p);
    vec![kc / 4.0, 3.0 * kc / 4.0, kc, kc / 2.0, kj / 2.0, (kc + kj) / 2.0]
}

/// Largest jump of either envelope across each branch point, as `(K, gap)`.
pub fn continuity_gaps(p: &BinParams, cruising: bool) -> Vec<(f64, f64)> {
    let env = |k: f64| {
        if cruising {
            envelope_with_cruising(k, p)
        } else {
            envelope_no_cruising(k, p)
        }
    };
    branch_points(p, cruising)
        .into_iter()
        .filter(|&b| b > 0.0 && b < p.jam_density)
        .map(|b| {
            // approach from both sides; the formulas are smooth on each piece
            let h = 1e-12 * p.jam_density;
            let at = env(b).unwrap();
            let right = env((b + h).min(p.jam_density)).unwrap();
            let left = env(b - h).unwrap();
            let gap = [
                (at.v_max - right.v_max).abs(),
                (at.v_min - right.v_min).abs(),
                (at.v_max - left.v_max).abs(),
                (at.v_min - left.v_min).abs(),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            (b, gap)
        })
        .collect()
}

/// Area between the upper and lower envelopes over `K ∈ [0, k_j]`
/// (km/hr·veh/km). With `cruising`, both envelopes are the all-cruising ones.
pub fn unstable_area(p: &BinParams, cruising: bool) -> f64 {
    let mut cuts = branch_points(p, cruising);
    cuts.push(0.0);
    cuts.push(p.jam_density);
    cuts.retain(|&c| (0.0..=p.jam_density).contains(&c));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let width = |k: f64| {
        let e = if cruising {
            envelope_with_cruising(k, p)
        } else {
            envelope_no_cruising(k, p)
        }
        .unwrap();
        e.v_max - e.v_min
    };

    // composite Simpson on each smooth piece, evaluated strictly inside the piece
    const N: usize = 512;
    cuts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let h = (b - a) / N as f64;
            let eps = 1e-12 * (b - a);
            let f = |i: usize| width((a + i as f64 * h).clamp(a + eps, b - eps));
            let mut s = f(0) + f(N);
            for i in 1..N {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i);
            }
            s * h / 3.0
        })
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeRow {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "Vmax_formula")]
    pub vmax_formula: f64,
    #[serde(rename = "Vmin_formula")]
    pub vmin_formula: f64,
    #[serde(rename = "Vmax_brute")]
    pub vmax_brute: f64,
    #[serde(rename = "Vmin_brute")]
    pub vmin_brute: f64,
}

impl EnvelopeRow {
    pub fn max_abs_diff(&self) -> f64 {
        (self.vmax_formula - self.vmax_brute)
            .abs()
            .max((self.vmin_formula - self.vmin_brute).abs())
    }
}

/// Formula and brute-force envelopes side by side on a density grid.
pub fn sweep(p: &BinParams, cruising: bool, densities: &[f64], grid_step: f64) -> Result<Vec<EnvelopeRow>> {
    densities
        .iter()
        .map(|&k| {
            let f = if cruising {
                envelope_with_cruising(k, p)?
            } else {
                envelope_no_cruising(k, p)?
            };
            let b = brute_force_envelope(k, p, cruising, grid_step)?;
            Ok(EnvelopeRow {
                k,
                vmax_formula: f.v_max,
                vmin_formula: f.v_min,
                vmax_brute: b.v_max,
                vmin_brute: b.v_min,
            })
        })
        .collect()
}

/// `0, step, 2 step, ..., k_j` without accumulated rounding.
pub fn density_grid(jam_density: f64, step: f64) -> Vec<f64> {
    let n = (jam_density / step).round() as usize;
    (0..=n).map(|i| (i as f64 * step).min(jam_density)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(vc: f64) -> BinParams {
        BinParams::new(50.0, vc, 100.0).unwrap()
    }

    #[test]
    fn critical_density_values() {
        assert_eq!(critical_density(&params(50.0)), 0.0);
        assert_abs_diff_eq!(critical_density(&params(10.0)), 80.0, epsilon = 1e-12);
        assert_abs_diff_eq!(critical_density(&params(25.0)), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn two_bin_examples() {
        let p = params(10.0);
        assert_abs_diff_eq!(two_bin_speed(30.0, 30.0, &p, false).unwrap(), 35.0, epsilon = 1e-12);
        // v1 = 40, v2 = 30 -> (800 + 1200) / 60
        assert_abs_diff_eq!(
            two_bin_speed(20.0, 40.0, &p, false).unwrap(),
            100.0 / 3.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(two_bin_speed(0.0, 30.0, &p, true).unwrap(), 10.0, epsilon = 1e-12);
        assert_eq!(two_bin_speed(0.0, 0.0, &p, true).unwrap(), 50.0);
        assert!(two_bin_speed(101.0, 0.0, &p, false).is_err());
        assert!(two_bin_speed(-1.0, 0.0, &p, false).is_err());
    }

    #[test]
    fn closed_form_two_bin_speed() {
        // V = v_f - (v_f / k_j)(2K - k1 k2 / K)
        let p = params(10.0);
        for (k1, k2) in [(20.0, 40.0), (5.0, 90.0), (70.0, 10.0)] {
            let kk = 0.5 * (k1 + k2);
            let closed = 50.0 - 0.5 * (2.0 * kk - k1 * k2 / kk);
            assert_abs_diff_eq!(two_bin_speed(k1, k2, &p, false).unwrap(), closed, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_cruising_examples() {
        let p = params(10.0);
        assert_abs_diff_eq!(envelope_no_cruising(50.0, &p).unwrap().v_min, 0.0, epsilon = 1e-12);
        let jam = envelope_no_cruising(100.0, &p).unwrap();
        assert_abs_diff_eq!(jam.v_max, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(jam.v_min, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            envelope_no_cruising(75.0, &p).unwrap().v_min,
            25.0 / 3.0,
            epsilon = 1e-12
        );
        assert!(envelope_no_cruising(100.5, &p).is_err());
    }

    #[test]
    fn cruising_examples() {
        let p = params(10.0);
        assert_abs_diff_eq!(envelope_with_cruising(30.0, &p).unwrap().v_min, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(envelope_with_cruising(40.0, &p).unwrap().v_max, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(envelope_with_cruising(90.0, &p).unwrap().v_max, 5.0, epsilon = 1e-12);
        assert!(envelope_with_cruising(-0.1, &p).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let p = params(10.0);
        let b = brute_force_envelope(0.0, &p, false, 0.01).unwrap();
        assert_eq!((b.v_max, b.v_min), (50.0, 50.0));
        let coarse = brute_force_envelope(50.0, &p, false, 1.0).unwrap().v_min;
        let fine = brute_force_envelope(50.0, &p, false, 0.01).unwrap().v_min;
        assert!(fine <= coarse + 1e-12 && fine.abs() < 1e-9);
        assert!(brute_force_envelope(120.0, &p, false, 0.01).is_err());
        assert!(brute_force_envelope(10.0, &p, false, 0.0).is_err());
    }

    #[test]
    fn brute_force_matches_formulas() {
        for vc in [10.0, 20.0, 30.0, 40.0] {
            let p = params(vc);
            for k in density_grid(100.0, 2.5) {
                let f = envelope_with_cruising(k, &p).unwrap();
                let b = brute_force_envelope(k, &p, true, 0.01).unwrap();
                assert!(
                    (f.v_max - b.v_max).abs() < 0.05 && (f.v_min - b.v_min).abs() < 0.05,
                    "vc={vc} K={k}: {f:?} vs {b:?}"
                );
                let f = envelope_no_cruising(k, &p).unwrap();
                let b = brute_force_envelope(k, &p, false, 0.01).unwrap();
                assert!((f.v_max - b.v_max).abs() < 0.05 && (f.v_min - b.v_min).abs() < 0.05);
            }
        }
    }

    #[test]
    fn envelopes_continuous() {
        for vc in [10.0, 20.0, 30.0, 40.0, 50.0] {
            for (k, gap) in continuity_gaps(&params(vc), true) {
                assert!(gap <= 1e-9, "vc={vc} K={k} gap={gap}");
            }
        }
        for (_, gap) in continuity_gaps(&params(10.0), false) {
            assert!(gap <= 1e-9);
        }
    }

    #[test]
    fn area_converges_without_cruising() {
        let p = params(50.0);
        assert_abs_diff_eq!(unstable_area(&p, true), unstable_area(&p, false), epsilon = 1e-9);
    }

    #[test]
    fn area_grows_as_cruising_slows() {
        let a10 = unstable_area(&params(10.0), true);
        let a30 = unstable_area(&params(30.0), true);
        let a45 = unstable_area(&params(45.0), true);
        assert!(a10 > a30 && a30 > a45);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(BinParams::new(50.0, 60.0, 100.0).is_err());
        assert!(BinParams::new(50.0, 0.0, 100.0).is_err());
        assert!(BinParams::new(50.0, 10.0, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn every_split_within_envelopes(vc in 5.0f64..50.0, k in 0.5f64..99.5, frac in 0.0f64..1.0) {
                let p = params(vc);
                let lo = (2.0 * k - 100.0).max(0.0);
                let hi = (2.0 * k).min(100.0);
                let k1 = lo + frac * (hi - lo);
                let k2 = (2.0 * k - k1).clamp(0.0, 100.0);
                for cruising in [false, true] {
                    let v = two_bin_speed(k1, k2, &p, cruising).unwrap();
                    let e = if cruising { envelope_with_cruising(k, &p) } else { envelope_no_cruising(k, &p) }.unwrap();
                    prop_assert!(v <= e.v_max + 1e-9 && v >= e.v_min - 1e-9,
                                 "cruising={} v={} env={:?}", cruising, v, e);
                }
            }
        }
    }
}
