//! Macro-micro parking dynamics.
//!
//! The crate couples four pieces:
//!
//! * [`micro`]: a mesoscopic cruising-for-parking simulator on a road network with
//!   on-street spots and an off-street lot. It produces a per-vehicle event log and is
//!   used both as a data source and as the control plant.
//! * [`theory`]: closed-form speed envelopes of a two-bin network with slow cruisers,
//!   with a brute-force split enumeration to check them.
//! * [`macro_model`]: the six-family accumulation model (moving, cruising, parked) with
//!   NFD speeds, Little's-formula outflows, probabilistic re-departures and delayed lot
//!   overflow.
//! * [`mpc`]: rolling-horizon pricing of on/off-street parking on top of the macro model.
//!
//! [`calibration`] and [`estimators`] connect the simulator output to macro parameters.

pub mod calibration;
pub mod demand;
pub mod error;
pub mod estimators;
pub mod fitting;
pub mod macro_model;
pub mod micro;
pub mod mpc;
pub mod network;
pub mod theory;

pub use error::{Error, Result};
