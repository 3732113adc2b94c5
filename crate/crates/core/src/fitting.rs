//! Small dense least-squares routines used by the estimator and NFD fits.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct LmFit {
    pub params: Vec<f64>,
    /// Weighted sum of squared residuals at `params`.
    pub wsse: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative decrease of the objective falls below this.
    pub ftol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 500,
            ftol: 1e-15,
        }
    }
}

fn wsse(model: &impl Fn(f64, &[f64]) -> f64, xs: &[f64], ys: &[f64], ws: &[f64], p: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .zip(ws)
        .map(|((&x, &y), &w)| w * (model(x, p) - y).powi(2))
        .sum()
}

/// Weighted Levenberg-Marquardt on `y ≈ model(x, p)` with a central-difference
/// Jacobian. `feasible` rejects trial points outside the parameter domain.
pub fn levenberg_marquardt(
    model: impl Fn(f64, &[f64]) -> f64,
    feasible: impl Fn(&[f64]) -> bool,
    xs: &[f64],
    ys: &[f64],
    ws: &[f64],
    p0: &[f64],
    opts: LmOptions,
) -> LmFit {
    let m = xs.len();
    let n = p0.len();
    let mut p = p0.to_vec();
    let mut f = wsse(&model, xs, ys, ws, &p);
    let mut lambda = 1e-3;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let mut jac = DMatrix::<f64>::zeros(m, n);
        let mut r = DVector::<f64>::zeros(m);
        for i in 0..m {
            let sw = ws[i].sqrt();
            r[i] = sw * (ys[i] - model(xs[i], &p));
        }
        for j in 0..n {
            let h = 1e-6 * p[j].abs().max(1e-8);
            let mut up = p.clone();
            let mut dn = p.clone();
            up[j] += h;
            dn[j] -= h;
            for i in 0..m {
                jac[(i, j)] = ws[i].sqrt() * (model(xs[i], &up) - model(xs[i], &dn)) / (2.0 * h);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;

        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if trial.iter().all(|v| v.is_finite()) && feasible(&trial) {
                let ft = wsse(&model, xs, ys, ws, &trial);
                if ft.is_finite() && ft <= f {
                    let rel = (f - ft) / f.max(1e-300);
                    p = trial;
                    f = ft;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    if rel < opts.ftol {
                        return LmFit {
                            params: p,
                            wsse: f,
                            iterations,
                        };
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved || f == 0.0 {
            break;
        }
    }
    LmFit {
        params: p,
        wsse: f,
        iterations,
    }
}

/// Weighted straight-line fit `y = intercept + slope x`. `None` when `x` has no spread.
pub fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = ws.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let mx = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - mx).powi(2)).sum();
    if sxx <= 1e-14 * sw * mx.abs().max(1.0).powi(2) {
        return None;
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Root-mean-square error and coefficient of determination.
pub fn goodness(pred: &[f64], obs: &[f64]) -> (f64, f64) {
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    ((ss_res / n).sqrt(), r2)
}
