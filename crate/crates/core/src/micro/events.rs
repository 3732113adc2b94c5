use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parking-related state of a vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Moving towards an on-street target.
    MovingOn,
    /// Moving towards the off-street lot.
    MovingOff,
    /// Passing through, or driving out after parking.
    Transit,
    Cruising,
    ParkedOn,
    ParkedOff,
    Exited,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::MovingOn,
        Family::MovingOff,
        Family::Transit,
        Family::Cruising,
        Family::ParkedOn,
        Family::ParkedOff,
        Family::Exited,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::MovingOn => "i",
            Family::MovingOff => "ii",
            Family::Transit => "iii",
            Family::Cruising => "iv",
            Family::ParkedOn => "v",
            Family::ParkedOff => "vi",
            Family::Exited => "exited",
        }
    }

    pub fn from_label(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.label() == s)
    }

    /// Whether the vehicle is driving on the network in this state.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            Family::MovingOn | Family::MovingOff | Family::Transit | Family::Cruising
        )
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Allowed family changes. `None` as origin is the vehicle entering the network.
pub fn is_allowed_transition(from: Option<Family>, to: Family) -> bool {
    use Family::*;
    match from {
        None => matches!(to, MovingOn | MovingOff | Transit),
        Some(MovingOn) => matches!(to, Cruising | ParkedOn),
        Some(MovingOff) => matches!(to, ParkedOff | Cruising),
        Some(Cruising) => to == ParkedOn,
        Some(ParkedOn) | Some(ParkedOff) => to == Transit,
        Some(Transit) => to == Exited,
        Some(Exited) => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Link(u32),
    Lot(u32),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Link(id) => write!(f, "{id}"),
            Location::Lot(id) => write!(f, "lot{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParkingEvent {
    pub vehicle: u32,
    /// Seconds since the start of the run.
    pub t: f64,
    pub from: Option<Family>,
    pub to: Family,
    pub location: Location,
    /// Distance driven in the departing state, km.
    pub distance: f64,
    pub occupancy_on: f64,
    pub occupancy_off: f64,
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    vehicle_id: u32,
    t_s: f64,
    from_family: String,
    to_family: String,
    link_id: String,
    dist_km: f64,
    occ_on: f64,
    occ_off: f64,
}

/// Append-only transition log of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParkingEventLog {
    events: Vec<ParkingEvent>,
}

impl ParkingEventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: ParkingEvent) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[ParkingEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events grouped per vehicle, each group in log order.
    pub fn by_vehicle(&self) -> std::collections::BTreeMap<u32, Vec<&ParkingEvent>> {
        let mut out: std::collections::BTreeMap<u32, Vec<&ParkingEvent>> = Default::default();
        for e in &self.events {
            out.entry(e.vehicle).or_default().push(e);
        }
        out
    }

    /// Checks per-vehicle ordering, distances and transition arcs.
    pub fn validate(&self) -> Result<()> {
        for (v, evs) in self.by_vehicle() {
            let mut state: Option<Family> = None;
            let mut last_t = f64::NEG_INFINITY;
            for e in evs {
                if !(e.t > last_t) {
                    return Err(Error::Invariant(format!(
                        "vehicle {v}: event times not increasing at t={}",
                        e.t
                    )));
                }
                if !(e.distance >= 0.0) {
                    return Err(Error::Invariant(format!(
                        "vehicle {v}: negative distance {}",
                        e.distance
                    )));
                }
                if e.from != state || !is_allowed_transition(e.from, e.to) {
                    return Err(Error::Invariant(format!(
                        "vehicle {v}: transition {:?} -> {} not allowed from state {:?}",
                        e.from, e.to, state
                    )));
                }
                state = Some(e.to);
                last_t = e.t;
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.events {
            w.serialize(EventRow {
                vehicle_id: e.vehicle,
                t_s: e.t,
                from_family: e.from.map_or("none".to_string(), |f| f.label().to_string()),
                to_family: e.to.label().to_string(),
                link_id: e.location.to_string(),
                dist_km: e.distance,
                occ_on: e.occupancy_on,
                occ_off: e.occupancy_off,
            })?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<events>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut log = ParkingEventLog::new();
        for (i, row) in r.deserialize::<EventRow>().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Parse {
                context: format!("events row {}", i + 1),
                message: what.to_string(),
            };
            let from = match row.from_family.as_str() {
                "none" => None,
                s => Some(Family::from_label(s).ok_or_else(|| bad("unknown from_family"))?),
            };
            let to = Family::from_label(&row.to_family).ok_or_else(|| bad("unknown to_family"))?;
            let location = if let Some(rest) = row.link_id.strip_prefix("lot") {
                Location::Lot(rest.parse().map_err(|_| bad("bad lot id"))?)
            } else {
                Location::Link(row.link_id.parse().map_err(|_| bad("bad link id"))?)
            };
            log.push(ParkingEvent {
                vehicle: row.vehicle_id,
                t: row.t_s,
                from,
                to,
                location,
                distance: row.dist_km,
                occupancy_on: row.occ_on,
                occupancy_off: row.occ_off,
            });
        }
        Ok(log)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(vehicle: u32, t: f64, from: Option<Family>, to: Family) -> ParkingEvent {
        ParkingEvent {
            vehicle,
            t,
            from,
            to,
            location: Location::Link(3),
            distance: 0.5,
            occupancy_on: 0.4,
            occupancy_off: 1.0,
        }
    }

    #[test]
    fn arcs() {
        use Family::*;
        assert!(is_allowed_transition(Some(MovingOn), ParkedOn));
        assert!(is_allowed_transition(Some(MovingOff), Cruising));
        assert!(!is_allowed_transition(Some(Cruising), ParkedOff));
        assert!(!is_allowed_transition(Some(ParkedOn), Exited));
        assert!(!is_allowed_transition(None, Cruising));
    }

    #[test]
    fn validate_catches_bad_sequences() {
        use Family::*;
        let mut log = ParkingEventLog::new();
        log.push(ev(1, 0.0, None, MovingOn));
        log.push(ev(1, 5.0, Some(MovingOn), Cruising));
        log.push(ev(1, 9.0, Some(Cruising), ParkedOn));
        assert!(log.validate().is_ok());
        log.push(ev(1, 9.0, Some(ParkedOn), Transit));
        assert!(log.validate().is_err());

        let mut skip = ParkingEventLog::new();
        skip.push(ev(2, 0.0, None, MovingOff));
        skip.push(ev(2, 1.0, Some(Cruising), ParkedOn));
        assert!(skip.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        use Family::*;
        let mut log = ParkingEventLog::new();
        log.push(ev(1, 0.0, None, MovingOff));
        let mut lot = ev(1, 30.0, Some(MovingOff), ParkedOff);
        lot.location = Location::Lot(0);
        log.push(lot);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("vehicle_id,t_s,from_family,to_family,link_id,dist_km,occ_on,occ_off"));
        assert!(text.contains("none,ii,3"));
        assert_eq!(ParkingEventLog::read_csv(&buf[..]).unwrap(), log);
    }
}
