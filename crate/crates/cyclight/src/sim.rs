//! Mesoscopic traffic flow on the grid.
//!
//! Links are point queues: a vehicle entering a link cruises at the speed
//! limit for the link's free-flow time, then joins a vertical FIFO queue in
//! the lane matching its movement at the downstream intersection (inner
//! lane for left turns, outer lane for through and right). Queued vehicles
//! discharge at saturation rate — one vehicle per lane per two seconds of
//! green — whenever the running phase serves their movement and the
//! receiving link has storage. A full receiving link blocks the discharge
//! (spillback). Time advances in one-second ticks.
//!
//! The simulator also embodies the sensing model: virtual detectors cover
//! the first 100 m of every approach and exit lane, so per-lane counts cap
//! at 13 vehicles (100 m / 7.5 m footprint), and per-intersection reward
//! windows accumulate the stopped-waiting seconds of detected vehicles plus
//! the count of vehicles that sat through an entire green.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{turn, Direction, GridNetwork, LinkId, NodeId, Route, Turn, DIRECTIONS};
use crate::signal::{phase_serves, IntervalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Seconds of green per discharged vehicle per lane.
    pub saturation_headway_s: u32,
    /// Storage footprint of one queued vehicle.
    pub vehicle_footprint_m: f64,
    /// Reach of the approach and exit detectors.
    pub sensor_range_m: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { saturation_headway_s: 2, vehicle_footprint_m: 7.5, sensor_range_m: 100.0 }
    }
}

impl SimParams {
    /// Most vehicles one detector lane can report: floor(range / footprint).
    pub fn sensor_cap(&self) -> u32 {
        (self.sensor_range_m / self.vehicle_footprint_m).floor() as u32
    }
}

pub type VehicleId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VehState {
    /// Scheduled but still outside the network (boundary storage full).
    Pending,
    /// Cruising along a link since the given tick.
    Transit { link: LinkId, entered: u32 },
    /// Stopped in a vertical queue.
    Queued { link: LinkId, lane: usize },
    Done,
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub route: Route,
    leg: usize,
    pub scheduled_s: f64,
    state: VehState,
    pub entered_tick: Option<u32>,
    pub completed_tick: Option<u32>,
    /// Stopped-waiting seconds over the whole journey.
    pub total_wait_s: u32,
}

#[derive(Debug, Clone, Default)]
struct LinkState {
    transit: VecDeque<(VehicleId, u32)>,
    queues: Vec<VecDeque<VehicleId>>,
    /// Cumulative queue joins per lane, for interval-based controllers.
    arrivals: Vec<u64>,
}

/// Reward bookkeeping for one inter-observation window at one intersection.
#[derive(Debug, Clone, Default)]
struct RewardWindow {
    wait_by_vehicle: HashMap<VehicleId, u32>,
    detected: HashSet<VehicleId>,
    secondary: u32,
}

/// What one intersection's reward window saw, returned on close.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleWindowStats {
    /// Distinct vehicles the approach detectors saw during the window.
    pub detected: u32,
    /// Stopped-waiting seconds accumulated by those vehicles in the window.
    pub wait_s: u64,
    /// Vehicles queued at a green's onset that were still queued at its end,
    /// summed over the greens that ended inside the window.
    pub secondary_queue: u32,
}

/// Per-lane detector counts for one intersection, approaches and exits,
/// sides in north, east, south, west order, inner lane first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSnapshot {
    pub approach: [[u32; 2]; 4],
    pub exit: [[u32; 2]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickLogEntry {
    pub tick: u32,
    pub intersection: NodeId,
    pub phase: usize,
    pub green: bool,
    pub queues: [[u32; 2]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Vehicles that entered the network.
    pub spawned: u64,
    /// Vehicles that completed their route (throughput).
    pub completed: u64,
    /// Scheduled vehicles still waiting outside at the horizon.
    pub never_entered: u64,
    pub total_wait_s: u64,
    /// Mean stopped-waiting seconds per spawned vehicle; zero without demand.
    pub avg_wait_s: f64,
    /// Once a minute: (tick, vehicles queued, cumulative wait seconds).
    pub wait_series: Vec<(u32, u64, u64)>,
}

pub struct Simulation {
    pub net: GridNetwork,
    pub params: SimParams,
    now: u32,
    vehicles: Vec<Vehicle>,
    links: Vec<LinkState>,
    /// Spawn order per origin link: (scheduled second, vehicle), sorted.
    spawn_queues: Vec<VecDeque<VehicleId>>,
    travel_ticks: u32,
    cap_per_link: usize,
    spawned: u64,
    completed: u64,
    total_wait_s: u64,
    windows: Vec<RewardWindow>,
    /// Signal state each intersection saw last tick, for edge detection.
    prev_signal: Vec<Option<IntervalState>>,
    /// Vehicles queued at green onset: (link, lane, ids) per intersection.
    green_marks: Vec<Vec<(LinkId, usize, Vec<VehicleId>)>>,
    wait_series: Vec<(u32, u64, u64)>,
    event_log: Option<Vec<TickLogEntry>>,
}

impl Simulation {
    /// Set up an episode from a realized demand schedule.
    pub fn new(net: &GridNetwork, schedule: &crate::grid::DemandSchedule, params: SimParams) -> Self {
        let mut plans: Vec<(Route, f64)> = Vec::new();
        for g in &schedule.groups {
            for r in &g.routes {
                for &t in &r.arrivals {
                    plans.push((r.route.clone(), t));
                }
            }
        }
        Self::with_manual_demand(net, plans, params)
    }

    /// Set up an episode from explicit (route, entry second) pairs; the
    /// scripted path used by tests and scenario tooling.
    pub fn with_manual_demand(net: &GridNetwork, plans: Vec<(Route, f64)>, params: SimParams) -> Self {
        let vehicles: Vec<Vehicle> = plans
            .into_iter()
            .map(|(route, scheduled_s)| {
                assert!(!route.is_empty(), "empty route");
                Vehicle {
                    route,
                    leg: 0,
                    scheduled_s,
                    state: VehState::Pending,
                    entered_tick: None,
                    completed_tick: None,
                    total_wait_s: 0,
                }
            })
            .collect();
        // Stable spawn order: by time, then by construction order.
        let mut order: Vec<VehicleId> = (0..vehicles.len()).collect();
        order.sort_by(|&a, &b| {
            vehicles[a]
                .scheduled_s
                .partial_cmp(&vehicles[b].scheduled_s)
                .unwrap()
                .then(a.cmp(&b))
        });

        let mut spawn_queues = vec![VecDeque::new(); net.links.len()];
        for &v in &order {
            let first = vehicles[v].route[0];
            spawn_queues[first].push_back(v);
        }

        let links = net
            .links
            .iter()
            .map(|l| LinkState {
                transit: VecDeque::new(),
                queues: vec![VecDeque::new(); l.lanes],
                arrivals: vec![0; l.lanes],
            })
            .collect();

        let travel_s = net.spec.link_length_m / net.spec.speed_limit_mps;
        Simulation {
            params,
            now: 0,
            vehicles,
            links,
            spawn_queues,
            travel_ticks: travel_s.ceil() as u32,
            cap_per_link: ((net.spec.link_length_m / params.vehicle_footprint_m).floor() as usize)
                * net.spec.lanes,
            spawned: 0,
            completed: 0,
            total_wait_s: 0,
            windows: (0..net.interior_count()).map(|_| RewardWindow::default()).collect(),
            prev_signal: vec![None; net.interior_count()],
            green_marks: vec![Vec::new(); net.interior_count()],
            wait_series: Vec::new(),
            event_log: None,
            net: net.clone(),
        }
    }

    pub fn now(&self) -> u32 {
        self.now
    }

    pub fn spawned(&self) -> u64 {
        self.spawned
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn enable_event_log(&mut self) {
        self.event_log = Some(Vec::new());
    }

    pub fn take_event_log(&mut self) -> Vec<TickLogEntry> {
        self.event_log.replace(Vec::new()).unwrap_or_default()
    }

    fn occupancy(&self, l: LinkId) -> usize {
        self.links[l].transit.len() + self.links[l].queues.iter().map(|q| q.len()).sum::<usize>()
    }

    /// Lane a vehicle uses on `link`: inner (0) for a left turn at the next
    /// interior intersection, outer for everything else.
    fn lane_for(&self, veh: VehicleId, link: LinkId) -> usize {
        let lanes = self.net.link(link).lanes;
        if lanes == 1 {
            return 0;
        }
        match self.movement_at_end(veh, link) {
            Some(Turn::Left) => 0,
            _ => lanes - 1,
        }
    }

    /// The turn a vehicle makes where `link` — its current leg — ends, if
    /// it ends at an interior intersection.
    fn movement_at_end(&self, veh: VehicleId, link: LinkId) -> Option<Turn> {
        let v = &self.vehicles[veh];
        debug_assert_eq!(v.route[v.leg], link, "movement query off the current leg");
        let next = *v.route.get(v.leg + 1)?;
        Some(turn(self.net.link(link).dir, self.net.link(next).dir))
    }

    /// Advance one second. `signals[i]` is the state intersection `i` runs
    /// during this interval, indexed by interior node id.
    pub fn advance(&mut self, signals: &[IntervalState]) -> Result<()> {
        debug_assert_eq!(signals.len(), self.net.interior_count());
        let t = self.now;

        // 1. Boundary entries, oldest scheduled first, as storage allows.
        for l in 0..self.links.len() {
            loop {
                let Some(&v) = self.spawn_queues[l].front() else { break };
                if self.vehicles[v].scheduled_s >= (t + 1) as f64 {
                    break;
                }
                if self.occupancy(l) >= self.cap_per_link {
                    break;
                }
                self.spawn_queues[l].pop_front();
                self.vehicles[v].state = VehState::Transit { link: l, entered: t };
                self.vehicles[v].entered_tick = Some(t);
                self.links[l].transit.push_back((v, t));
                self.spawned += 1;
            }
        }

        // 2. Transit maturation: reach the stop line or leave the network.
        for l in 0..self.links.len() {
            while let Some(&(v, entered)) = self.links[l].transit.front() {
                if t < entered + self.travel_ticks {
                    break;
                }
                self.links[l].transit.pop_front();
                let to = self.net.link(l).to;
                if self.net.is_boundary(to) {
                    self.vehicles[v].state = VehState::Done;
                    self.vehicles[v].completed_tick = Some(t);
                    self.completed += 1;
                } else {
                    let lane = self.lane_for(v, l);
                    self.links[l].queues[lane].push_back(v);
                    self.links[l].arrivals[lane] += 1;
                    self.vehicles[v].state = VehState::Queued { link: l, lane };
                }
            }
        }

        // 3. Signal edges and saturation discharge, per intersection.
        for ix in 0..self.net.interior_count() {
            let sig = signals[ix];

            // A green that just ended: count its survivors.
            if let Some(prev) = self.prev_signal[ix] {
                if prev.green && !(sig.green && sig.phase == prev.phase) {
                    let marks = std::mem::take(&mut self.green_marks[ix]);
                    let mut survivors = 0u32;
                    for (link, lane, ids) in &marks {
                        for &v in ids {
                            if self.vehicles[v].state == (VehState::Queued { link: *link, lane: *lane }) {
                                survivors += 1;
                            }
                        }
                    }
                    self.windows[ix].secondary += survivors;
                }
            }

            // A green that just started: mark who is already waiting.
            if sig.green && sig.green_second == 1 {
                let mut marks = Vec::new();
                for side in DIRECTIONS {
                    let l = self.net.in_link(ix, side).expect("interior approach");
                    for lane in 0..self.links[l].queues.len() {
                        let ids: Vec<VehicleId> = self.links[l].queues[lane]
                            .iter()
                            .copied()
                            .filter(|&v| {
                                self.movement_at_end(v, l)
                                    .map(|m| phase_serves(sig.phase, side, m))
                                    .unwrap_or(false)
                            })
                            .collect();
                        if !ids.is_empty() {
                            marks.push((l, lane, ids));
                        }
                    }
                }
                self.green_marks[ix] = marks;
            }

            // Discharge on the saturation beat.
            if sig.green && sig.green_second % self.params.saturation_headway_s == 0 {
                for side in DIRECTIONS {
                    let l = self.net.in_link(ix, side).expect("interior approach");
                    for lane in 0..self.links[l].queues.len() {
                        let Some(&head) = self.links[l].queues[lane].front() else { continue };
                        let Some(movement) = self.movement_at_end(head, l) else { continue };
                        if !phase_serves(sig.phase, side, movement) {
                            continue;
                        }
                        let leg = self.vehicles[head].leg;
                        let next = self.vehicles[head].route[leg + 1];
                        if self.occupancy(next) >= self.cap_per_link {
                            continue; // spillback: receiving link is full
                        }
                        self.links[l].queues[lane].pop_front();
                        let v = &mut self.vehicles[head];
                        v.leg += 1;
                        v.state = VehState::Transit { link: next, entered: t };
                        self.links[next].transit.push_back((head, t));
                    }
                }
            }

            self.prev_signal[ix] = Some(sig);
        }

        // 4. Waiting accrual and detector coverage.
        let cap = self.params.sensor_cap() as usize;
        let mut queued_now = 0u64;
        for l in 0..self.links.len() {
            let to = self.net.link(l).to;
            let interior = self.net.is_interior(to);
            for lane in 0..self.links[l].queues.len() {
                for pos in 0..self.links[l].queues[lane].len() {
                    let v = self.links[l].queues[lane][pos];
                    self.vehicles[v].total_wait_s += 1;
                    self.total_wait_s += 1;
                    queued_now += 1;
                    if interior {
                        let w = &mut self.windows[to];
                        *w.wait_by_vehicle.entry(v).or_insert(0) += 1;
                        if pos < cap {
                            w.detected.insert(v);
                        }
                    }
                }
            }
            if interior {
                let spec = self.net.spec;
                let reach = spec.link_length_m - self.params.sensor_range_m;
                for &(v, entered) in &self.links[l].transit {
                    let travelled = (t - entered) as f64 * spec.speed_limit_mps;
                    if travelled >= reach {
                        self.windows[to].detected.insert(v);
                    }
                }
            }
        }

        if let Some(log) = &mut self.event_log {
            for ix in 0..self.net.interior_count() {
                let mut queues = [[0u32; 2]; 4];
                for (si, side) in DIRECTIONS.iter().enumerate() {
                    let l = self.net.in_link(ix, *side).unwrap();
                    for lane in 0..self.links[l].queues.len().min(2) {
                        queues[si][lane] = self.links[l].queues[lane].len() as u32;
                    }
                }
                log.push(TickLogEntry {
                    tick: t,
                    intersection: ix,
                    phase: signals[ix].phase,
                    green: signals[ix].green,
                    queues,
                });
            }
        }

        self.now = t + 1;
        if self.now % 60 == 0 {
            self.wait_series.push((self.now, queued_now, self.total_wait_s));
        }

        debug_assert!(self.conserves_vehicles(), "vehicle conservation violated at tick {}", self.now);
        Ok(())
    }

    /// Advance with an explicit step size; only the one-second tick is
    /// supported, anything else is a caller bug worth a typed error.
    pub fn step(&mut self, signals: &[IntervalState], dt_s: f64) -> Result<()> {
        if !(dt_s > 0.0) || !dt_s.is_finite() {
            return Err(Error::BadStepSize(dt_s));
        }
        let whole = dt_s.round();
        if (dt_s - whole).abs() > 1e-9 || whole < 1.0 {
            return Err(Error::BadStepSize(dt_s));
        }
        for _ in 0..whole as u32 {
            self.advance(signals)?;
        }
        Ok(())
    }

    /// spawned == in-network + completed, every tick.
    pub fn conserves_vehicles(&self) -> bool {
        let in_network: usize = (0..self.links.len())
            .map(|l| self.links[l].transit.len() + self.links[l].queues.iter().map(|q| q.len()).sum::<usize>())
            .sum();
        self.spawned == in_network as u64 + self.completed
    }

    /// Detector readout for one intersection at the current instant.
    pub fn sensor_snapshot(&self, ix: NodeId) -> SensorSnapshot {
        debug_assert!(self.net.is_interior(ix));
        let spec = self.net.spec;
        let cap = self.params.sensor_cap();
        let range = self.params.sensor_range_m;
        let mut approach = [[0u32; 2]; 4];
        let mut exit = [[0u32; 2]; 4];

        for (si, side) in DIRECTIONS.iter().enumerate() {
            let l = self.net.in_link(ix, *side).expect("interior approach");
            let mut counts = [0u32; 2];
            for lane in 0..self.links[l].queues.len().min(2) {
                counts[lane] = self.links[l].queues[lane].len() as u32;
            }
            // In-transit vehicles estimated inside the detector zone join
            // the count of the lane they are heading for.
            for &(v, entered) in &self.links[l].transit {
                let travelled = (self.now - entered) as f64 * spec.speed_limit_mps;
                if travelled >= spec.link_length_m - range {
                    counts[self.lane_for(v, l).min(1)] += 1;
                }
            }
            for lane in 0..2 {
                approach[si][lane] = counts[lane].min(cap);
            }

            let o = self.net.out_link(ix, *side).expect("interior exit");
            let mut out_counts = [0u32; 2];
            for &(v, entered) in &self.links[o].transit {
                let travelled = (self.now - entered) as f64 * spec.speed_limit_mps;
                if travelled <= range {
                    out_counts[self.lane_for(v, o).min(1)] += 1;
                }
            }
            // A queue long enough to back into the detector zone also shows.
            for lane in 0..self.links[o].queues.len().min(2) {
                for pos in 0..self.links[o].queues[lane].len() {
                    if spec.link_length_m - pos as f64 * self.params.vehicle_footprint_m <= range {
                        out_counts[lane] += 1;
                    }
                }
            }
            for lane in 0..2 {
                exit[si][lane] = out_counts[lane].min(cap);
            }
        }
        SensorSnapshot { approach, exit }
    }

    /// Close and reset one intersection's reward window.
    pub fn close_reward_window(&mut self, ix: NodeId) -> CycleWindowStats {
        debug_assert!(self.net.is_interior(ix));
        let w = std::mem::take(&mut self.windows[ix]);
        let wait_s: u64 = w.detected.iter().map(|v| *w.wait_by_vehicle.get(v).unwrap_or(&0) as u64).sum();
        CycleWindowStats { detected: w.detected.len() as u32, wait_s, secondary_queue: w.secondary }
    }

    /// Queue length per lane on the approach from `side`.
    pub fn approach_queue(&self, ix: NodeId, side: Direction) -> Vec<usize> {
        let l = self.net.in_link(ix, side).expect("interior approach");
        self.links[l].queues.iter().map(|q| q.len()).collect()
    }

    /// Total queued vehicles per lane (averaged) on the link leaving toward
    /// `side`; zero toward a boundary exit.
    pub fn downstream_queue_per_lane(&self, ix: NodeId, side: Direction) -> f64 {
        let l = self.net.out_link(ix, side).expect("interior exit");
        if self.net.is_boundary(self.net.link(l).to) {
            return 0.0;
        }
        let total: usize = self.links[l].queues.iter().map(|q| q.len()).sum();
        total as f64 / self.net.link(l).lanes as f64
    }

    /// Cumulative queue joins per lane on the approach from `side`.
    pub fn approach_arrivals(&self, ix: NodeId, side: Direction) -> Vec<u64> {
        let l = self.net.in_link(ix, side).expect("interior approach");
        self.links[l].arrivals.clone()
    }

    /// Wrap up: averages over everything that entered the network.
    pub fn finalize_episode(&self) -> EpisodeMetrics {
        let never_entered = self.spawn_queues.iter().map(|q| q.len() as u64).sum();
        EpisodeMetrics {
            spawned: self.spawned,
            completed: self.completed,
            never_entered,
            total_wait_s: self.total_wait_s,
            avg_wait_s: if self.spawned == 0 {
                0.0
            } else {
                self.total_wait_s as f64 / self.spawned as f64
            },
            wait_series: self.wait_series.clone(),
        }
    }

    /// Stopped-waiting seconds accrued so far by one vehicle.
    pub fn vehicle_wait(&self, v: VehicleId) -> u32 {
        self.vehicles[v].total_wait_s
    }

    pub fn vehicle(&self, v: VehicleId) -> &Vehicle {
        &self.vehicles[v]
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }
}
