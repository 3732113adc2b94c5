use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Three-parameter logistic speed-accumulation NFD,
/// `v(n) = v0 / (1 + exp((n - n0) / w))` km/hr.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfdModel {
    pub v0: f64,
    pub n0: f64,
    pub w: f64,
}

impl NfdModel {
    pub fn new(v0: f64, n0: f64, w: f64) -> Result<Self> {
        let m = NfdModel { v0, n0, w };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0 > 0.0 && self.w > 0.0 && self.n0.is_finite()) {
            return Err(invalid(format!("logistic NFD needs v0 > 0 and w > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn speed(&self, n: f64) -> f64 {
        self.v0 / (1.0 + ((n - self.n0) / self.w).exp())
    }
}

pub fn nfd_speed(model: &NfdModel, n: f64) -> f64 {
    model.speed(n)
}

/// Binary logit between on- and off-street parking with utilities `α_x - β τ_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitParams {
    pub alpha_on: f64,
    pub alpha_off: f64,
    /// Fee coefficient, 1/$.
    pub beta: f64,
}

impl Default for LogitParams {
    fn default() -> Self {
        LogitParams {
            alpha_on: 0.0,
            alpha_off: 0.0,
            beta: 0.3,
        }
    }
}

impl LogitParams {
    /// Probability of choosing on-street parking.
    pub fn on_share(&self, price_on: f64, price_off: f64) -> f64 {
        let diff = (self.alpha_off - self.beta * price_off) - (self.alpha_on - self.beta * price_on);
        1.0 / (1.0 + diff.exp())
    }
}

/// Expected on/off-street arrivals from a total parking inflow.
pub fn split_demand(total: f64, price_on: f64, price_off: f64, logit: &LogitParams) -> (f64, f64) {
    let share = logit.on_share(price_on, price_off);
    let on = total * share;
    (on, total - on)
}
