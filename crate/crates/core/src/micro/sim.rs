use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{Purpose, TripChain};
use crate::error::{invalid, Error, Result};
use crate::network::{greenshields_speed, LinkId, Network, NodeId, ShortestPaths};

use super::choice::logit_probabilities;
use super::config::{jittered, pick_other, sample_arrival, ScenarioConfig};
use super::events::{Family, Location, ParkingEvent, ParkingEventLog};
use super::search::{local_search_step, regional_decision, RegionalDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Scheduled,
    Queued,
    OnLink,
    Parked,
    InLot,
    InCircuit,
    Gone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Spot {
    Free,
    Vehicle(usize),
    Captive,
    Preoccupied,
}

#[derive(Clone, Debug)]
struct Vehicle {
    chain: TripChain,
    is_parker: bool,
    family: Option<Family>,
    status: Status,
    link: LinkId,
    pos: f64,
    route: VecDeque<LinkId>,
    target: Option<LinkId>,
    cruise_speed: f64,
    choice_u: f64,
    target_u: f64,
    comply_u: f64,
    pending: Option<LinkId>,
    next_eval: f64,
    /// Distance in the current family, km.
    seg_dist: f64,
    dist: f64,
    time_h: f64,
    free_flow_h: f64,
    spot: Option<(LinkId, usize)>,
    /// Seconds; end of the parking stay or of the lot circuit.
    release_at: f64,
    last_transition_step: Option<usize>,
    /// Own stream for search decisions, so runs under different policies stay paired.
    rng: ChaCha8Rng,
}

/// Per-step aggregates of a run. Flow counts are events during the step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// End of the step, s.
    pub t: f64,
    pub dt: f64,
    /// Vehicle-km and vehicle-hours driven on network links during the step.
    pub veh_km: f64,
    pub veh_h: f64,
    pub n_moving_on: usize,
    pub n_moving_off: usize,
    pub n_transit: usize,
    pub n_cruising: usize,
    /// Occupied on-street spots, including captive and pre-occupied ones.
    pub n_parked_on: usize,
    pub n_parked_off: usize,
    pub n_in_circuit: usize,
    pub n_queued: usize,
    pub injected: usize,
    pub exited: usize,
    pub occupancy_on: f64,
    pub occupancy_off: f64,
    pub parked_on_street: usize,
    pub entered_lot: usize,
    pub rejected_by_lot: usize,
    pub left_street: usize,
    pub left_lot: usize,
    pub arrived_parkers_on: usize,
    pub arrived_parkers_off: usize,
    pub arrived_passers: usize,
}

impl StepStats {
    pub fn active(&self) -> usize {
        self.n_moving_on + self.n_moving_off + self.n_transit + self.n_cruising
    }
}

/// Totals kept per vehicle for the performance metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub vehicle: u32,
    pub is_parker: bool,
    pub injected: bool,
    /// Hours on network links.
    pub time_on_road: f64,
    pub distance: f64,
    pub free_flow_time: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub log: ParkingEventLog,
    pub stats: Vec<StepStats>,
    pub vehicles: Vec<VehicleSummary>,
    pub network_length: f64,
    pub parker_demand: usize,
    pub circuit_time_h: f64,
    /// Captive and pre-occupied spots at time zero.
    pub initial_parked_on: usize,
    pub gridlocked: bool,
}

/// Discrete-time mesoscopic parking simulator.
pub struct MicroSim {
    net: Arc<Network>,
    cfg: ScenarioConfig,
    step: usize,
    vehicles: Vec<Vehicle>,
    next_arrival: usize,
    queue: VecDeque<usize>,
    spots: Vec<Vec<Spot>>,
    spot_pos: Vec<Vec<f64>>,
    occupied: Vec<u32>,
    moving: Vec<u32>,
    region_cap: Vec<u32>,
    region_occ: Vec<u32>,
    total_cap: u32,
    total_occ: u32,
    lot_occ: u32,
    preoccupied: Vec<(LinkId, usize)>,
    vacated: usize,
    trees: Vec<ShortestPaths>,
    supply_links: Vec<LinkId>,
    unguided_supply: Vec<LinkId>,
    fee_on: f64,
    fee_off: f64,
    log: ParkingEventLog,
    stats: Vec<StepStats>,
    injected: usize,
    exited: usize,
    still_steps: usize,
    gridlocked: bool,
    current: StepStats,
}

impl MicroSim {
    pub fn new(net: Arc<Network>, cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        if net.lots().len() > 1 {
            return Err(invalid("the simulator supports at most one off-street lot"));
        }
        let gateways = net.gateways();
        if gateways.len() < 2 {
            return Err(invalid("network needs at least two gateway nodes"));
        }
        let supply_links: Vec<LinkId> = net.link_ids().filter(|&l| net.link(l).parking_capacity > 0).collect();
        if cfg.parkers > 0 && supply_links.is_empty() && net.lots().is_empty() {
            return Err(invalid("parkers need on-street supply or a lot"));
        }
        let guided = cfg.guidance.guided_region;
        let unguided_supply = supply_links
            .iter()
            .copied()
            .filter(|&l| net.link(l).region != guided)
            .collect();
        let trees: Vec<ShortestPaths> = (0..net.nodes().len())
            .map(|n| net.shortest_path_tree(NodeId(n)))
            .collect();

        let regions = net.region_count().max(guided + 1) as usize;
        let mut region_cap = vec![0u32; regions];
        let mut spots = Vec::with_capacity(net.links().len());
        let mut spot_pos = Vec::with_capacity(net.links().len());
        for l in net.links() {
            region_cap[l.region as usize] += l.parking_capacity;
            spots.push(vec![Spot::Free; l.parking_capacity as usize]);
            spot_pos.push(l.spot_positions());
        }
        let total_cap = net.total_parking_capacity();

        // chains are drawn from their own stream so behaviour changes do not shift them
        let mut chain_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let horizon_s = cfg.horizon * 3600.0;
        let mut vehicles = Vec::with_capacity(cfg.parkers + cfg.passers);
        for k in 0..cfg.parkers + cfg.passers {
            let is_parker = k < cfg.parkers;
            let profile = if is_parker {
                &cfg.parker_profile
            } else {
                &cfg.passer_profile
            };
            let entry_time = sample_arrival(profile, horizon_s, &mut chain_rng);
            let origin = *gateways.choose(&mut chain_rng).expect("gateways");
            let destination = pick_other(&gateways, origin, &mut chain_rng);
            let parking_duration = cfg.duration.sample(&mut chain_rng);
            let desired_speed = jittered(cfg.desired_speed, cfg.speed_jitter, &mut chain_rng);
            let desired_cruise_speed = jittered(cfg.cruise_speed, cfg.cruise_jitter, &mut chain_rng);
            let choice_u: f64 = chain_rng.gen();
            let target_u: f64 = chain_rng.gen();
            let comply_u: f64 = chain_rng.gen();
            vehicles.push(Vehicle {
                chain: TripChain {
                    vehicle: 0,
                    entry_time,
                    origin,
                    destination,
                    purpose: if is_parker { Purpose::ParkOn } else { Purpose::Pass },
                    parking_duration,
                    desired_speed,
                    desired_cruise_speed,
                },
                is_parker,
                family: None,
                status: Status::Scheduled,
                link: LinkId(0),
                pos: 0.0,
                route: VecDeque::new(),
                target: None,
                cruise_speed: desired_cruise_speed,
                choice_u,
                target_u,
                comply_u,
                pending: None,
                next_eval: 0.0,
                seg_dist: 0.0,
                dist: 0.0,
                time_h: 0.0,
                free_flow_h: 0.0,
                spot: None,
                release_at: f64::INFINITY,
                last_transition_step: None,
                rng: {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0dd_5eed);
                    r.set_stream(k as u64);
                    r
                },
            });
        }
        vehicles.sort_by(|a, b| a.chain.entry_time.total_cmp(&b.chain.entry_time));
        for (i, v) in vehicles.iter_mut().enumerate() {
            v.chain.vehicle = i as u32;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5eed);
        let mut all_spots: Vec<(LinkId, usize)> = supply_links
            .iter()
            .flat_map(|&l| (0..net.link(l).parking_capacity as usize).map(move |j| (l, j)))
            .collect();
        if cfg.captive_spots + cfg.preoccupied_spots > all_spots.len() {
            return Err(invalid(format!(
                "{} captive and {} pre-occupied spots exceed the {} on-street spots",
                cfg.captive_spots,
                cfg.preoccupied_spots,
                all_spots.len()
            )));
        }
        all_spots.shuffle(&mut rng);
        let mut occupied = vec![0u32; net.links().len()];
        let mut region_occ = vec![0u32; regions];
        let mut preoccupied = Vec::new();
        for (i, &(l, j)) in all_spots
            .iter()
            .take(cfg.captive_spots + cfg.preoccupied_spots)
            .enumerate()
        {
            spots[l.0][j] = if i < cfg.captive_spots {
                Spot::Captive
            } else {
                preoccupied.push((l, j));
                Spot::Preoccupied
            };
            occupied[l.0] += 1;
            region_occ[net.link(l).region as usize] += 1;
        }
        let total_occ = (cfg.captive_spots + cfg.preoccupied_spots) as u32;

        let (fee_on, fee_off) = (cfg.fee_on, cfg.fee_off);
        let n_links = net.links().len();
        Ok(MicroSim {
            net,
            cfg,
            step: 0,
            vehicles,
            next_arrival: 0,
            queue: VecDeque::new(),
            spots,
            spot_pos,
            occupied,
            moving: vec![0; n_links],
            region_cap,
            region_occ,
            total_cap,
            total_occ,
            lot_occ: 0,
            preoccupied,
            vacated: 0,
            trees,
            supply_links,
            unguided_supply,
            fee_on,
            fee_off,
            log: ParkingEventLog::new(),
            stats: Vec::new(),
            injected: 0,
            exited: 0,
            still_steps: 0,
            gridlocked: false,
            current: StepStats::default(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Seconds simulated so far.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.steps()
    }

    pub fn set_prices(&mut self, fee_on: f64, fee_off: f64) {
        self.fee_on = fee_on;
        self.fee_off = fee_off;
    }

    pub fn prices(&self) -> (f64, f64) {
        (self.fee_on, self.fee_off)
    }

    pub fn log(&self) -> &ParkingEventLog {
        &self.log
    }

    pub fn stats(&self) -> &[StepStats] {
        &self.stats
    }

    pub fn occupancy_on(&self) -> f64 {
        if self.total_cap == 0 {
            0.0
        } else {
            self.total_occ as f64 / self.total_cap as f64
        }
    }

    pub fn occupancy_off(&self) -> f64 {
        match self.net.lots().first() {
            Some(lot) if lot.capacity > 0 => self.lot_occ as f64 / lot.capacity as f64,
            _ => 0.0,
        }
    }

    pub fn lot_occupancy(&self) -> u32 {
        self.lot_occ
    }

    pub fn on_street_occupancy(&self) -> u32 {
        self.total_occ
    }

    pub fn gridlocked(&self) -> bool {
        self.gridlocked
    }

    /// `injected - (on links + parked + in lot + in circuit + exited)`; zero unless the
    /// bookkeeping is broken.
    pub fn conservation_gap(&self) -> i64 {
        let present = self
            .vehicles
            .iter()
            .filter(|v| {
                matches!(
                    v.status,
                    Status::OnLink | Status::Parked | Status::InLot | Status::InCircuit
                )
            })
            .count();
        self.injected as i64 - (present + self.exited) as i64
    }

    /// Checks per-link spot counts and lot occupancy against capacities.
    pub fn check_capacities(&self) -> Result<()> {
        for (i, l) in self.net.links().iter().enumerate() {
            let used = self.spots[i].iter().filter(|s| **s != Spot::Free).count() as u32;
            if used != self.occupied[i] || used > l.parking_capacity {
                return Err(Error::Invariant(format!(
                    "link {} spot count {used} inconsistent",
                    l.id
                )));
            }
        }
        if let Some(lot) = self.net.lots().first() {
            if self.lot_occ > lot.capacity {
                return Err(Error::Invariant("lot over capacity".into()));
            }
        }
        Ok(())
    }

    fn path(&self, from: NodeId, to: NodeId) -> Result<VecDeque<LinkId>> {
        if from == to {
            return Ok(VecDeque::new());
        }
        self.trees[from.0]
            .path_to(&self.net, to)
            .map(VecDeque::from)
            .ok_or_else(|| Error::Topology(format!("no path between nodes {} and {}", from.0, to.0)))
    }

    fn route_to_link(&self, from: NodeId, target: LinkId) -> Result<VecDeque<LinkId>> {
        let mut r = self.path(from, self.net.link(target).from)?;
        r.push_back(target);
        Ok(r)
    }

    fn has_room(&self, link: LinkId) -> bool {
        (self.moving[link.0] as f64) + 1.0 <= self.net.link(link).storage() + 1e-9
    }

    fn record(&mut self, idx: usize, t: f64, to: Family, location: Location) {
        let occupancy_on = self.occupancy_on();
        let occupancy_off = self.occupancy_off();
        let v = &mut self.vehicles[idx];
        self.log.push(ParkingEvent {
            vehicle: v.chain.vehicle,
            t,
            from: v.family,
            to,
            location,
            distance: v.seg_dist,
            occupancy_on,
            occupancy_off,
        });
        v.family = Some(to);
        v.seg_dist = 0.0;
        v.last_transition_step = Some(self.step);
    }

    fn transitioned_now(&self, idx: usize) -> bool {
        self.vehicles[idx].last_transition_step == Some(self.step)
    }

    fn region_occupancy(&self, region: u32) -> f64 {
        let r = region as usize;
        if self.region_cap[r] == 0 {
            0.0
        } else {
            self.region_occ[r] as f64 / self.region_cap[r] as f64
        }
    }

    /// Whether a guided driver at the end of `link` is currently kept out of the guided region.
    fn diverted(&self, idx: usize, link: LinkId) -> bool {
        let g = &self.cfg.guidance;
        if !g.regional_guidance || self.net.link(link).region == g.guided_region {
            return false;
        }
        regional_decision(self.region_occupancy(g.guided_region), g, self.vehicles[idx].comply_u)
            == RegionalDecision::Divert
    }

    fn search_choice(&mut self, idx: usize, node: NodeId, incoming: Option<LinkId>) -> Result<LinkId> {
        let guided = self.cfg.guidance.guided_region;
        let avoid = incoming.is_some_and(|l| self.diverted(idx, l));
        let net = Arc::clone(&self.net);
        let allowed = move |l: LinkId| !avoid || net.link(l).region != guided;
        local_search_step(
            &self.net,
            node,
            incoming,
            &self.occupied,
            &self.cfg.guidance,
            &allowed,
            &mut self.vehicles[idx].rng,
        )
    }

    fn enter_link(&mut self, idx: usize, link: LinkId) -> Result<()> {
        self.moving[link.0] += 1;
        let cruising = self.vehicles[idx].family == Some(Family::Cruising);
        let cruise_speed = if cruising {
            jittered(
                self.cfg.cruise_speed,
                self.cfg.cruise_jitter,
                &mut self.vehicles[idx].rng,
            )
        } else {
            self.vehicles[idx].cruise_speed
        };
        let v = &mut self.vehicles[idx];
        v.status = Status::OnLink;
        v.link = link;
        v.pos = 0.0;
        v.pending = None;
        v.cruise_speed = cruise_speed;
        if cruising && !self.cfg.guidance.local_guidance {
            let node = self.net.link(link).to;
            let next = self.search_choice(idx, node, Some(link))?;
            let t = self.time();
            let v = &mut self.vehicles[idx];
            v.pending = Some(next);
            v.next_eval = t + self.cfg.search_reevaluation;
        }
        Ok(())
    }

    fn leave_link(&mut self, idx: usize) {
        let l = self.vehicles[idx].link;
        self.moving[l.0] -= 1;
    }

    fn inject(&mut self, t_start: f64) -> Result<()> {
        let dt = self.cfg.dt;
        while self.next_arrival < self.vehicles.len()
            && self.vehicles[self.next_arrival].chain.entry_time < t_start + dt
        {
            let i = self.next_arrival;
            self.vehicles[i].status = Status::Queued;
            self.queue.push_back(i);
            self.next_arrival += 1;
        }
        let mut waiting = VecDeque::new();
        while let Some(i) = self.queue.pop_front() {
            let (family, route, target) = self.plan_entry(i)?;
            let first = route[0];
            if !self.has_room(first) {
                waiting.push_back(i);
                continue;
            }
            let mut route = route;
            route.pop_front();
            {
                let v = &mut self.vehicles[i];
                v.route = route;
                v.target = target;
                v.chain.purpose = match family {
                    Family::MovingOn => Purpose::ParkOn,
                    Family::MovingOff => Purpose::ParkOff,
                    _ => Purpose::Pass,
                };
            }
            self.record(i, t_start, family, Location::Link(self.net.link(first).id));
            self.enter_link(i, first)?;
            self.injected += 1;
            match family {
                Family::MovingOn => self.current.arrived_parkers_on += 1,
                Family::MovingOff => self.current.arrived_parkers_off += 1,
                _ => self.current.arrived_passers += 1,
            }
        }
        self.queue = waiting;
        Ok(())
    }

    fn plan_entry(&self, i: usize) -> Result<(Family, VecDeque<LinkId>, Option<LinkId>)> {
        let v = &self.vehicles[i];
        let origin = v.chain.origin;
        if !v.is_parker {
            return Ok((Family::Transit, self.path(origin, v.chain.destination)?, None));
        }
        let lot = self.net.lots().first();
        let p_on = match (lot, self.supply_links.is_empty()) {
            (None, _) => 1.0,
            (Some(_), true) => 0.0,
            (Some(_), false) => logit_probabilities(
                &[self.fee_on, self.fee_off],
                &[self.cfg.alpha_on, self.cfg.alpha_off],
                self.cfg.beta,
            )?[0],
        };
        if v.choice_u < p_on {
            let n = self.supply_links.len();
            let target = self.supply_links[((v.target_u * n as f64) as usize).min(n - 1)];
            Ok((Family::MovingOn, self.route_to_link(origin, target)?, Some(target)))
        } else {
            let entry = lot.expect("lot").entry_link;
            Ok((Family::MovingOff, self.route_to_link(origin, entry)?, None))
        }
    }

    /// Releases lot-circuit vehicles back onto the street as cruisers.
    fn end_circuits(&mut self, t_start: f64) -> Result<()> {
        let Some(lot) = self.net.lots().first().cloned() else {
            return Ok(());
        };
        let node = self.net.link(lot.entry_link).to;
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i];
            if v.status != Status::InCircuit || v.release_at > t_start + 1e-9 {
                continue;
            }
            let next = self.search_choice(i, node, Some(lot.entry_link))?;
            if self.has_room(next) {
                self.enter_link(i, next)?;
            }
        }
        Ok(())
    }

    fn reevaluate(&mut self, t_start: f64) -> Result<()> {
        if self.cfg.guidance.local_guidance {
            return Ok(());
        }
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i];
            if v.status == Status::OnLink && v.family == Some(Family::Cruising) && v.next_eval <= t_start {
                let link = v.link;
                let next = self.search_choice(i, self.net.link(link).to, Some(link))?;
                let v = &mut self.vehicles[i];
                v.pending = Some(next);
                v.next_eval = t_start + self.cfg.search_reevaluation;
            }
        }
        Ok(())
    }

    fn link_speeds(&self) -> Vec<f64> {
        let mut slowest = vec![f64::INFINITY; self.net.links().len()];
        for v in &self.vehicles {
            if v.status == Status::OnLink && v.family == Some(Family::Cruising) {
                slowest[v.link.0] = slowest[v.link.0].min(v.cruise_speed);
            }
        }
        self.net
            .links()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let k = self.moving[i] as f64 / (l.length * l.lanes as f64);
                let base = greenshields_speed(k, l.free_flow_speed, l.jam_density);
                if l.lanes == 1 {
                    base.min(slowest[i])
                } else {
                    base
                }
            })
            .collect()
    }

    fn travel(&mut self, idx: usize, d: f64) {
        let vf = self.net.link(self.vehicles[idx].link).free_flow_speed;
        let v = &mut self.vehicles[idx];
        v.pos += d;
        v.seg_dist += d;
        v.dist += d;
        v.free_flow_h += d / vf;
        self.current.veh_km += d;
    }

    fn can_park_here(&self, idx: usize) -> bool {
        let v = &self.vehicles[idx];
        if self.transitioned_now(idx) {
            return false;
        }
        match v.family {
            Some(Family::MovingOn) => v.target == Some(v.link) && v.route.is_empty(),
            Some(Family::Cruising) => self.net.link(v.link).parking_capacity > 0,
            _ => false,
        }
    }

    fn park_on_street(&mut self, idx: usize, spot: usize, t_end: f64) {
        let link = self.vehicles[idx].link;
        self.spots[link.0][spot] = Spot::Vehicle(idx);
        self.occupied[link.0] += 1;
        self.region_occ[self.net.link(link).region as usize] += 1;
        self.total_occ += 1;
        self.leave_link(idx);
        self.record(idx, t_end, Family::ParkedOn, Location::Link(self.net.link(link).id));
        let v = &mut self.vehicles[idx];
        v.status = Status::Parked;
        v.spot = Some((link, spot));
        v.release_at = t_end + v.chain.parking_duration * 3600.0;
        self.current.parked_on_street += 1;
    }

    /// Moves one vehicle for a step; returns the distance covered and the speed used.
    fn advance(&mut self, idx: usize, speeds: &[f64], t_end: f64) -> Result<(f64, f64)> {
        let own = {
            let v = &self.vehicles[idx];
            if v.family == Some(Family::Cruising) {
                v.cruise_speed
            } else {
                v.chain.desired_speed
            }
        };
        let speed = speeds[self.vehicles[idx].link.0].min(own);
        let mut budget = speed * self.cfg.dt / 3600.0;
        let mut covered = 0.0;
        let mut crossed = false;
        loop {
            let link = self.vehicles[idx].link;
            let length = self.net.link(link).length;
            let pos = self.vehicles[idx].pos;
            let reach = (pos + budget).min(length);
            if self.can_park_here(idx) {
                let free = self.spot_pos[link.0]
                    .iter()
                    .enumerate()
                    .find(|&(j, &x)| x > pos && x <= reach && self.spots[link.0][j] == Spot::Free)
                    .map(|(j, &x)| (j, x));
                if let Some((j, x)) = free {
                    self.travel(idx, x - pos);
                    covered += x - pos;
                    self.park_on_street(idx, j, t_end);
                    return Ok((covered, speed));
                }
            }
            self.travel(idx, reach - pos);
            covered += reach - pos;
            budget -= reach - pos;
            if reach < length || crossed {
                return Ok((covered, speed));
            }
            crossed = true;
            match self.at_node(idx, t_end)? {
                Some(next) if self.has_room(next) => {
                    self.leave_link(idx);
                    if self.vehicles[idx].route.front() == Some(&next) {
                        self.vehicles[idx].route.pop_front();
                    }
                    self.enter_link(idx, next)?;
                }
                _ => return Ok((covered, speed)),
            }
            if budget <= 0.0 {
                return Ok((covered, speed));
            }
        }
    }

    /// Handles a vehicle at the downstream end of its link. Returns the link it
    /// wants next, or `None` when it left the network or is waiting.
    fn at_node(&mut self, idx: usize, t_end: f64) -> Result<Option<LinkId>> {
        let link = self.vehicles[idx].link;
        let node = self.net.link(link).to;
        let family = self.vehicles[idx].family.expect("injected");
        let route_empty = self.vehicles[idx].route.is_empty();
        match family {
            Family::Transit => {
                if route_empty {
                    if self.transitioned_now(idx) {
                        return Ok(None);
                    }
                    self.leave_link(idx);
                    self.record(idx, t_end, Family::Exited, Location::Link(self.net.link(link).id));
                    self.vehicles[idx].status = Status::Gone;
                    self.exited += 1;
                    return Ok(None);
                }
                Ok(self.vehicles[idx].route.front().copied())
            }
            Family::MovingOff => {
                if !route_empty {
                    return Ok(self.vehicles[idx].route.front().copied());
                }
                if self.transitioned_now(idx) {
                    return Ok(None);
                }
                let lot = self.net.lots()[0].clone();
                self.leave_link(idx);
                if self.lot_occ < lot.capacity {
                    self.lot_occ += 1;
                    self.record(idx, t_end, Family::ParkedOff, Location::Lot(lot.id));
                    let v = &mut self.vehicles[idx];
                    v.status = Status::InLot;
                    v.release_at = t_end + v.chain.parking_duration * 3600.0;
                    self.current.entered_lot += 1;
                } else {
                    self.record(idx, t_end, Family::Cruising, Location::Lot(lot.id));
                    let v = &mut self.vehicles[idx];
                    v.status = Status::InCircuit;
                    v.release_at = t_end + lot.circuit_time_h() * 3600.0;
                    v.seg_dist = lot.circuit_length;
                    self.current.entered_lot += 1;
                    self.current.rejected_by_lot += 1;
                }
                Ok(None)
            }
            Family::MovingOn => {
                if route_empty {
                    if self.transitioned_now(idx) {
                        return Ok(None);
                    }
                    self.record(idx, t_end, Family::Cruising, Location::Link(self.net.link(link).id));
                    return self.search_choice(idx, node, Some(link)).map(Some);
                }
                let next = *self.vehicles[idx].route.front().expect("route");
                let guided = self.cfg.guidance.guided_region;
                if self.net.link(next).region == guided && !self.unguided_supply.is_empty() && self.diverted(idx, link)
                {
                    let target = *self
                        .unguided_supply
                        .choose(&mut self.vehicles[idx].rng)
                        .expect("non-empty");
                    let route = self.route_to_link(node, target)?;
                    let v = &mut self.vehicles[idx];
                    v.target = Some(target);
                    v.route = route;
                    return Ok(v.route.front().copied());
                }
                Ok(Some(next))
            }
            Family::Cruising => {
                let pending = self.vehicles[idx].pending;
                let guided = self.cfg.guidance.guided_region;
                let next = match pending {
                    Some(p)
                        if !self.cfg.guidance.local_guidance
                            && !(self.net.link(p).region == guided && self.diverted(idx, link)) =>
                    {
                        p
                    }
                    _ => self.search_choice(idx, node, Some(link))?,
                };
                self.vehicles[idx].pending = Some(next);
                Ok(Some(next))
            }
            Family::ParkedOn | Family::ParkedOff | Family::Exited => {
                Err(Error::Invariant(format!("vehicle {idx} on a link in family {family}")))
            }
        }
    }

    fn redepart(&mut self, t_end: f64) -> Result<()> {
        let lot = self.net.lots().first().cloned();
        for i in 0..self.vehicles.len() {
            let status = self.vehicles[i].status;
            if !matches!(status, Status::Parked | Status::InLot)
                || self.vehicles[i].release_at > t_end + 1e-9
                || self.transitioned_now(i)
            {
                continue;
            }
            if status == Status::Parked {
                let (link, spot) = self.vehicles[i].spot.expect("parked vehicle has a spot");
                if !self.has_room(link) {
                    continue;
                }
                let node = self.net.link(link).to;
                let route = self.path(node, self.vehicles[i].chain.destination)?;
                self.spots[link.0][spot] = Spot::Free;
                self.occupied[link.0] -= 1;
                self.region_occ[self.net.link(link).region as usize] -= 1;
                self.total_occ -= 1;
                self.record(i, t_end, Family::Transit, Location::Link(self.net.link(link).id));
                self.moving[link.0] += 1;
                let x = self.spot_pos[link.0][spot];
                let v = &mut self.vehicles[i];
                v.status = Status::OnLink;
                v.link = link;
                v.pos = x;
                v.spot = None;
                v.route = route;
                self.current.left_street += 1;
            } else {
                let lot = lot.as_ref().expect("lot");
                let node = self.net.link(lot.entry_link).to;
                let mut dest = self.vehicles[i].chain.destination;
                if dest == node {
                    let gateways = self.net.gateways();
                    dest = pick_other(&gateways, node, &mut self.vehicles[i].rng);
                    self.vehicles[i].chain.destination = dest;
                }
                let mut route = self.path(node, dest)?;
                let first = route.pop_front().expect("distinct nodes");
                if !self.has_room(first) {
                    continue;
                }
                self.lot_occ -= 1;
                self.record(i, t_end, Family::Transit, Location::Lot(lot.id));
                self.vehicles[i].route = route;
                self.enter_link(i, first)?;
                self.current.left_lot += 1;
            }
        }
        Ok(())
    }

    fn vacate(&mut self, t_end: f64) {
        let due = ((self.cfg.vacate_per_minute * t_end / 60.0) + 1e-9).floor() as usize;
        while self.vacated < due.min(self.preoccupied.len()) {
            let (l, j) = self.preoccupied[self.vacated];
            self.spots[l.0][j] = Spot::Free;
            self.occupied[l.0] -= 1;
            self.region_occ[self.net.link(l).region as usize] -= 1;
            self.total_occ -= 1;
            self.vacated += 1;
        }
    }

    /// Advances the simulation by one step.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let t_start = self.time();
        let t_end = t_start + dt;
        self.current = StepStats {
            t: t_end,
            dt,
            ..Default::default()
        };

        self.inject(t_start)?;
        self.end_circuits(t_start)?;
        self.reevaluate(t_start)?;

        let speeds = self.link_speeds();
        let mut any_on_link = false;
        let mut moved = false;
        for i in 0..self.vehicles.len() {
            if self.vehicles[i].status != Status::OnLink {
                continue;
            }
            any_on_link = true;
            let (covered, speed) = self.advance(i, &speeds, t_end)?;
            // a vehicle that left the network mid-step only counts the time it drove
            let hours = if self.vehicles[i].status != Status::OnLink && speed > 0.0 {
                (covered / speed).min(dt / 3600.0)
            } else {
                dt / 3600.0
            };
            self.vehicles[i].time_h += hours;
            self.current.veh_h += hours;
            if covered > 0.0 {
                moved = true;
            }
        }
        if any_on_link && !moved {
            self.still_steps += 1;
            if self.still_steps >= self.cfg.gridlock_steps {
                self.gridlocked = true;
            }
        } else {
            self.still_steps = 0;
        }

        self.redepart(t_end)?;
        self.vacate(t_end);
        self.step += 1;
        self.finish_stats();
        Ok(())
    }

    fn finish_stats(&mut self) {
        let mut s = std::mem::take(&mut self.current);
        for v in &self.vehicles {
            match (v.status, v.family) {
                (Status::OnLink, Some(Family::MovingOn)) => s.n_moving_on += 1,
                (Status::OnLink, Some(Family::MovingOff)) => s.n_moving_off += 1,
                (Status::OnLink, Some(Family::Transit)) => s.n_transit += 1,
                (Status::OnLink, Some(Family::Cruising)) => s.n_cruising += 1,
                (Status::InCircuit, _) => s.n_in_circuit += 1,
                _ => {}
            }
        }
        s.n_parked_on = self.total_occ as usize;
        s.n_parked_off = self.lot_occ as usize;
        s.n_queued = self.queue.len();
        s.injected = self.injected;
        s.exited = self.exited;
        s.occupancy_on = self.occupancy_on();
        s.occupancy_off = self.occupancy_off();
        self.stats.push(s);
    }

    /// Steps until `t` seconds (or the horizon).
    pub fn run_until(&mut self, t: f64) -> Result<()> {
        while !self.is_finished() && self.time() + 1e-9 < t {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_output(self) -> RunOutput {
        let circuit_time_h = self.net.lots().first().map_or(0.0, |l| l.circuit_time_h());
        RunOutput {
            initial_parked_on: self.cfg.captive_spots + self.cfg.preoccupied_spots,
            network_length: self.net.total_length(),
            parker_demand: self.cfg.parkers,
            vehicles: self
                .vehicles
                .iter()
                .map(|v| VehicleSummary {
                    vehicle: v.chain.vehicle,
                    is_parker: v.is_parker,
                    injected: v.family.is_some(),
                    time_on_road: v.time_h,
                    distance: v.dist,
                    free_flow_time: v.free_flow_h,
                })
                .collect(),
            config: self.cfg,
            log: self.log,
            stats: self.stats,
            circuit_time_h,
            gridlocked: self.gridlocked,
        }
    }
}

/// Builds the scenario network and runs it to the horizon.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let net = Arc::new(cfg.network.build()?);
    run_on(net, cfg)
}

pub fn run_on(net: Arc<Network>, cfg: &ScenarioConfig) -> Result<RunOutput> {
    let mut sim = MicroSim::new(net, cfg.clone())?;
    sim.run_to_end()?;
    Ok(sim.into_output())
}
