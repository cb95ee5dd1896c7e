//! Discrete-time mesoscopic traffic dynamics.
//!
//! One-second steps. A vehicle entering a link traverses it at free-flow
//! speed, then joins the link's vertical FIFO queue. Queue heads discharge
//! at saturation flow while their next movement is green and the receiving
//! link has storage room; a full receiving link blocks the sender
//! (spillback). Vehicles exit when free-flow traversal of their
//! destination link completes.
//!
//! Insertion respects storage too: departures that do not fit on their
//! origin link wait in a per-link entry buffer and are inserted as room
//! appears, routing at actual insertion time.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::control;
use crate::demand::Trip;
use crate::error::{CoreError, CoreResult};
use crate::net::{LinkId, MovementId, Network, NodeId, SignalKind};
use crate::route;

/// Action cadence of signal commands, seconds.
pub const ACTION_STEP_S: u32 = 5;
/// Yellow plus all-red time inserted on every phase change, seconds.
pub const INTERLOCK_S: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehState {
    Pending,
    Traversing,
    Queued,
    Exited,
    /// Dropped at insertion because no route existed.
    Discarded,
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u32,
    pub origin: LinkId,
    pub destination: LinkId,
    pub path: Vec<LinkId>,
    /// Index of the current link within `path`.
    pub cursor: usize,
    pub depart_s: u32,
    pub entered_s: u32,
    pub link_entry_s: u32,
    /// Second at which free-flow traversal of the current link completes.
    pub arrival_s: u32,
    pub state: VehState,
    /// Independent per-vehicle accumulation of seconds spent on PN links.
    pub pn_seconds: u64,
}

impl Vehicle {
    pub fn current_link(&self) -> LinkId {
        self.path[self.cursor]
    }

    pub fn next_link(&self) -> Option<LinkId> {
        self.path.get(self.cursor + 1).copied()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinkState {
    /// Vehicles in free-flow, ordered by arrival second.
    pub traversing: VecDeque<u32>,
    /// Vertical queue, FIFO.
    pub queue: VecDeque<u32>,
    pub count: u32,
    /// Fractional saturation-flow credit carried between seconds of
    /// uninterrupted service.
    discharge_acc: f64,
    /// Cumulative vehicles discharged off this link.
    pub discharged: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SignalState {
    pub phase: usize,
    pub interlock_left: u32,
}

/// One second's aggregate outputs, consumed by the metrics accumulator.
#[derive(Debug, Clone, Default)]
pub struct SecondStats {
    /// Vehicles on PN links this second.
    pub pn_count: u32,
    /// Vehicles on any link this second.
    pub on_net_count: u32,
    /// Departed vehicles still waiting for insertion room.
    pub pending_count: u32,
    /// Free-flow meters covered on PN links this second.
    pub pn_dist_m: f64,
    /// Free-flow meters covered anywhere this second.
    pub all_dist_m: f64,
    /// Queued vehicles on any link this second.
    pub queued_on_net: u32,
    /// Queue length per gate (network gate order), insertion backlog
    /// included.
    pub per_gate_queue: Vec<u32>,
    /// Vehicles that left a gate link this second: (gate, entry_s, exit_s).
    pub gate_exits: Vec<(LinkId, u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Green seconds of the two local phases in fixed timetables.
    pub green_split: (u32, u32),
    /// Record every queue discharge (vehicle, link, second).
    pub log_discharges: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            green_split: (30, 30),
            log_discharges: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation<'n> {
    pub net: &'n Network,
    pub cfg: SimConfig,
    pub now: u32,
    pub vehicles: Vec<Vehicle>,
    pub links: Vec<LinkState>,
    /// One entry per grid node; only cordon signals consult it.
    pub signals: Vec<SignalState>,
    trips: Vec<Trip>,
    next_trip: usize,
    pending: Vec<VecDeque<u32>>,
    pending_total: u32,
    pub entered: u64,
    pub exited: u64,
    pub discarded: u32,
    pub discharge_log: Vec<(u32, LinkId, u32)>,
    cost_scratch: Vec<f64>,
}

impl<'n> Simulation<'n> {
    pub fn new(net: &'n Network, mut trips: Vec<Trip>, cfg: SimConfig) -> Simulation<'n> {
        trips.sort_by_key(|t| t.depart_s);
        let vehicles = trips
            .iter()
            .enumerate()
            .map(|(i, t)| Vehicle {
                id: i as u32,
                origin: t.origin,
                destination: t.destination,
                path: Vec::new(),
                cursor: 0,
                depart_s: t.depart_s,
                entered_s: 0,
                link_entry_s: 0,
                arrival_s: 0,
                state: VehState::Pending,
                pn_seconds: 0,
            })
            .collect();
        Simulation {
            net,
            cfg,
            now: 0,
            vehicles,
            links: alloc::vec![LinkState::default(); net.links.len()],
            signals: alloc::vec![
                SignalState { phase: 0, interlock_left: 0 };
                net.intersections.len()
            ],
            trips,
            next_trip: 0,
            pending: alloc::vec![VecDeque::new(); net.links.len()],
            pending_total: 0,
            entered: 0,
            exited: 0,
            discarded: 0,
            discharge_log: Vec::new(),
            cost_scratch: Vec::new(),
        }
    }

    pub fn queue_len(&self, l: LinkId) -> u32 {
        self.links[l.index()].queue.len() as u32
    }

    pub fn count(&self, l: LinkId) -> u32 {
        self.links[l.index()].count
    }

    pub fn occupancy(&self, l: LinkId) -> f64 {
        self.net.occupancy(l, self.count(l))
    }

    pub fn pending_len(&self, l: LinkId) -> u32 {
        self.pending[l.index()].len() as u32
    }

    pub fn discharged(&self, l: LinkId) -> u64 {
        self.links[l.index()].discharged
    }

    /// Occupied fraction of a movement's origin link held by vehicles whose
    /// next hop is that movement.
    pub fn movement_occupancy(&self, m: MovementId) -> f64 {
        let mv = self.net.movement(m);
        let ls = &self.links[mv.from_link.index()];
        let n = ls
            .traversing
            .iter()
            .chain(ls.queue.iter())
            .filter(|&&v| self.vehicles[v as usize].next_link() == Some(mv.to_link))
            .count() as u32;
        self.net.occupancy(mv.from_link, n)
    }

    /// Commands a phase on a signalized grid intersection. A change starts
    /// the 5 s yellow/all-red interlock; repeating the current phase keeps
    /// the green uninterrupted.
    pub fn apply_control(&mut self, node: NodeId, phase: usize) -> CoreResult<()> {
        if !self.net.is_grid_node(node) {
            return Err(CoreError::Control(alloc::format!(
                "node {} is not an intersection",
                node.0
            )));
        }
        let n_phases = self.net.intersection(node).phases.len();
        if phase >= n_phases {
            return Err(CoreError::Control(alloc::format!(
                "phase {phase} out of range for node {} ({n_phases} phases)",
                node.0
            )));
        }
        let sig = &mut self.signals[node.0 as usize];
        if sig.phase != phase {
            sig.phase = phase;
            sig.interlock_left = INTERLOCK_S;
        }
        Ok(())
    }

    /// True when `m` may discharge this second.
    fn movement_green(&self, node: NodeId, m: &crate::net::Movement) -> bool {
        let inter = self.net.intersection(node);
        match inter.kind {
            SignalKind::Unsignalized => true,
            SignalKind::FixedTwoPhase => {
                match control::fixed_green(self.now, self.cfg.green_split.0, self.cfg.green_split.1)
                {
                    Some(p) => inter.phases[p].grants(m.local_idx),
                    None => false,
                }
            }
            SignalKind::Cordon { .. } => {
                let sig = &self.signals[node.0 as usize];
                sig.interlock_left == 0 && inter.phases[sig.phase].grants(m.local_idx)
            }
        }
    }

    /// Advances one second and returns the second's aggregates.
    pub fn step(&mut self) -> SecondStats {
        let t = self.now;
        let mut stats = SecondStats::default();

        // Departures join their origin link's entry buffer.
        while self.next_trip < self.trips.len() && self.trips[self.next_trip].depart_s <= t {
            let trip = self.trips[self.next_trip];
            let vid = self.next_trip as u32;
            self.pending[trip.origin.index()].push_back(vid);
            self.pending_total += 1;
            self.next_trip += 1;
        }

        // Insert as storage allows, routing at actual insertion time.
        let mut costs_ready = false;
        for li in 0..self.links.len() {
            if self.pending[li].is_empty() {
                continue;
            }
            while let Some(&vid) = self.pending[li].front() {
                let link = LinkId(li as u32);
                if self.links[li].count >= self.net.storage(link) {
                    break;
                }
                if !costs_ready {
                    self.cost_scratch = route::link_costs(self.net, |l| self.queue_len(l));
                    costs_ready = true;
                }
                self.pending[li].pop_front();
                self.pending_total -= 1;
                let dest = self.vehicles[vid as usize].destination;
                match route::route(self.net, link, dest, &self.cost_scratch) {
                    Ok(path) => {
                        let v = &mut self.vehicles[vid as usize];
                        v.path = path;
                        v.cursor = 0;
                        v.entered_s = t;
                        v.link_entry_s = t;
                        v.arrival_s = t + free_flow_steps(self.net, link);
                        v.state = VehState::Traversing;
                        self.links[li].traversing.push_back(vid);
                        self.links[li].count += 1;
                        self.entered += 1;
                    }
                    Err(_) => {
                        self.vehicles[vid as usize].state = VehState::Discarded;
                        self.discarded += 1;
                    }
                }
            }
        }

        // Free-flow completions: exit at destination, otherwise queue up.
        for li in 0..self.links.len() {
            while let Some(&vid) = self.links[li].traversing.front() {
                if self.vehicles[vid as usize].arrival_s > t {
                    break;
                }
                self.links[li].traversing.pop_front();
                let v = &mut self.vehicles[vid as usize];
                if v.current_link() == v.destination {
                    v.state = VehState::Exited;
                    self.links[li].count -= 1;
                    self.exited += 1;
                } else {
                    v.state = VehState::Queued;
                    self.links[li].queue.push_back(vid);
                }
            }
        }

        // Queue discharge, intersections in id order, approaches N,E,S,W.
        for node_idx in 0..self.net.intersections.len() {
            let node = NodeId(node_idx as u32);
            let legs = self.net.intersection(node).incoming;
            for leg in legs {
                self.serve_queue(node, leg, t, &mut stats);
            }
        }

        // Interlock countdown.
        for sig in &mut self.signals {
            if sig.interlock_left > 0 {
                sig.interlock_left -= 1;
            }
        }

        // Per-second accounting.
        stats.pending_count = self.pending_total;
        for v in &self.vehicles {
            match v.state {
                VehState::Traversing | VehState::Queued => {}
                _ => continue,
            }
            let link = self.net.link(v.current_link());
            stats.on_net_count += 1;
            let mut dist = 0.0;
            if v.state == VehState::Traversing {
                dist = if t + 1 < v.arrival_s {
                    link.speed_mps
                } else {
                    link.length_m - link.speed_mps * f64::from(v.arrival_s - 1 - v.link_entry_s)
                };
                stats.all_dist_m += dist;
            } else {
                stats.queued_on_net += 1;
            }
            if link.inside_pn {
                stats.pn_count += 1;
                stats.pn_dist_m += dist;
            }
        }
        for v in &mut self.vehicles {
            if matches!(v.state, VehState::Traversing | VehState::Queued)
                && self.net.link(v.path[v.cursor]).inside_pn
            {
                v.pn_seconds += 1;
            }
        }
        stats.per_gate_queue = self
            .net
            .gate_links
            .iter()
            .map(|&g| self.queue_len(g) + self.pending_len(g))
            .collect();

        self.now = t + 1;
        debug_assert!(self.check_conservation());
        stats
    }

    fn serve_queue(&mut self, node: NodeId, leg: LinkId, t: u32, stats: &mut SecondStats) {
        let li = leg.index();
        if self.links[li].queue.is_empty() {
            self.links[li].discharge_acc = 0.0;
            return;
        }
        let mut acc = self.links[li].discharge_acc + self.net.discharge_rate(leg);
        let mut blocked = false;
        while acc >= 1.0 {
            let Some(&vid) = self.links[li].queue.front() else {
                // Queue drained; no banking while idle.
                acc = 0.0;
                break;
            };
            let next = self.vehicles[vid as usize]
                .next_link()
                .expect("queued vehicle has a next link");
            let Some(mid) = self.net.find_movement(leg, next) else {
                // Path no longer matches topology; should not happen.
                blocked = true;
                break;
            };
            if !self.movement_green(node, self.net.movement(mid)) {
                blocked = true;
                break;
            }
            if self.links[next.index()].count >= self.net.storage(next) {
                // Spillback: never discharge into a full link.
                blocked = true;
                break;
            }
            self.links[li].queue.pop_front();
            self.links[li].count -= 1;
            self.links[li].discharged += 1;
            if self.cfg.log_discharges {
                self.discharge_log.push((t, leg, vid));
            }
            if self.net.link(leg).is_gate {
                let entry = self.vehicles[vid as usize].link_entry_s;
                stats.gate_exits.push((leg, entry, t));
            }
            let v = &mut self.vehicles[vid as usize];
            v.cursor += 1;
            v.link_entry_s = t;
            v.arrival_s = t + free_flow_steps(self.net, next);
            v.state = VehState::Traversing;
            self.links[next.index()].traversing.push_back(vid);
            self.links[next.index()].count += 1;
            acc -= 1.0;
        }
        self.links[li].discharge_acc = if blocked { 0.0 } else { acc };
    }

    /// entered == exited + on-network count, and storage is respected.
    pub fn check_conservation(&self) -> bool {
        let on_net: u64 = self.links.iter().map(|l| u64::from(l.count)).sum();
        if self.entered != self.exited + on_net {
            return false;
        }
        self.links.iter().enumerate().all(|(i, l)| {
            l.count == (l.traversing.len() + l.queue.len()) as u32
                && l.count <= self.net.storage(LinkId(i as u32))
        })
    }

    /// All departures inserted and every inserted vehicle exited.
    pub fn drained(&self) -> bool {
        self.next_trip == self.trips.len()
            && self.pending_total == 0
            && self.entered == self.exited + u64::from(self.discarded) - u64::from(self.discarded)
            && self.links.iter().all(|l| l.count == 0)
    }
}

/// Whole seconds a link traversal takes at free flow (at least one).
pub fn free_flow_steps(net: &Network, l: LinkId) -> u32 {
    let link = net.link(l);
    let x = link.free_flow_s();
    let t = x as u32;
    if f64::from(t) < x {
        t + 1
    } else {
        t.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GridSpec;

    fn paper_net() -> Network {
        Network::build_grid(&GridSpec::paper_5x5()).unwrap()
    }

    /// One vehicle entering an empty 300 m link at 10 m/s joins the queue
    /// after 30 steps and discharges on the first green second.
    #[test]
    fn single_vehicle_traverses_then_discharges() {
        let mut spec = GridSpec::paper_5x5();
        spec.speed_mps = 10.0;
        let net = Network::build_grid(&spec).unwrap();
        // Internal trip: origin is a PN link behind a fixed or cordon
        // signal; use a north gate's downstream link going south.
        let gate = net.gate_links[2];
        let origin = net.gate_through_target(gate);
        let dest = net
            .successors(origin)
            .iter()
            .find(|(to, _)| net.link(*to).bearing == net.link(origin).bearing)
            .unwrap()
            .0;
        let trips = alloc::vec![Trip {
            depart_s: 0,
            origin,
            destination: dest,
        }];
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        for t in 0..30 {
            sim.step();
            let v = &sim.vehicles[0];
            assert_eq!(
                v.state,
                VehState::Traversing,
                "still traversing at t={t}"
            );
        }
        // Arrival at t=30 queues the vehicle during step 30.
        sim.step();
        // It may already have discharged if the movement was green.
        let v = &sim.vehicles[0];
        assert!(v.cursor == 1 || v.state == VehState::Queued);
        // Run on; it must discharge within one fixed cycle.
        let mut discharged = v.cursor == 1;
        for _ in 0..70 {
            sim.step();
            if sim.vehicles[0].cursor == 1 || sim.vehicles[0].state == VehState::Exited {
                discharged = true;
                break;
            }
        }
        assert!(discharged);
    }

    /// A full receiving link blocks discharge entirely.
    #[test]
    fn spillback_blocks_discharge() {
        let net = paper_net();
        let gate = net.gate_links[2];
        let downstream = net.gate_through_target(gate);
        let storage = net.storage(downstream);
        assert_eq!(storage, 80);
        // 80 internal vehicles parked on the downstream link (their
        // destination is far, and the signal holds them), plus gate
        // arrivals that would like to enter it.
        let mut trips = Vec::new();
        let far = net.opposite_exit(gate);
        for _ in 0..storage {
            trips.push(Trip {
                depart_s: 0,
                origin: downstream,
                destination: far,
            });
        }
        for _ in 0..40 {
            trips.push(Trip {
                depart_s: 0,
                origin: gate,
                destination: far,
            });
        }
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        // Keep the cordon signal on the gating phase so the downstream
        // queue cannot discharge, while the gate approach is red... the
        // gate approach is red in the gating phase, so force phase 0 and
        // let both compete: downstream is full, so the gate must not send
        // a single vehicle while count stays at storage.
        let head = net.link(gate).to;
        sim.apply_control(head, 0).unwrap();
        for _ in 0..60 {
            sim.step();
            assert!(sim.count(downstream) <= storage);
            assert!(sim.check_conservation());
        }
        // The downstream link drains through its own head over time, so
        // eventually some gate vehicles enter; but at no instant may the
        // storage cap be exceeded (asserted above).
    }

    /// No departures ever leave the network in a closed system.
    #[test]
    fn closed_system_conserves_vehicles() {
        let net = paper_net();
        // Vehicles shuttling to far-away internal destinations; none can
        // exit within the horizon because destinations keep them inside.
        let mut trips = Vec::new();
        for (i, &g) in net.gate_links.iter().enumerate() {
            for k in 0..20 {
                trips.push(Trip {
                    depart_s: (k * 7 + i as u32) % 100,
                    origin: g,
                    destination: net.pn_links[(i * 7 + k as usize) % net.pn_links.len()],
                });
            }
        }
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        for _ in 0..1000 {
            sim.step();
            assert!(sim.check_conservation());
        }
    }

    #[test]
    fn apply_control_interlock_timing() {
        let net = paper_net();
        let node = net.cordon_signals[0];
        let mut sim = Simulation::new(&net, Vec::new(), SimConfig::default());
        // Same phase: no interlock.
        sim.apply_control(node, 0).unwrap();
        assert_eq!(sim.signals[node.0 as usize].interlock_left, 0);
        // Change: 5 s all red.
        sim.apply_control(node, 1).unwrap();
        assert_eq!(sim.signals[node.0 as usize].interlock_left, INTERLOCK_S);
        for expect in (0..INTERLOCK_S).rev() {
            sim.step();
            assert_eq!(sim.signals[node.0 as usize].interlock_left, expect);
        }
        // Invalid phase index rejected.
        assert!(sim.apply_control(node, 9).is_err());
    }

    /// Alternating commands every action step never produce green.
    #[test]
    fn alternating_commands_keep_the_signal_red() {
        let net = paper_net();
        let gate = net.gate_links[2];
        let node = net.link(gate).to;
        let far = net.opposite_exit(gate);
        let trips: Vec<Trip> = (0..30)
            .map(|k| Trip {
                depart_s: k,
                origin: gate,
                destination: far,
            })
            .collect();
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        let mut phase = 0usize;
        for t in 0..300u32 {
            if t % ACTION_STEP_S == 0 {
                phase = 1 - phase;
                sim.apply_control(node, phase).unwrap();
            }
            sim.step();
        }
        // Interlock always >= 1 during steps, so nothing ever left the gate.
        assert_eq!(sim.discharged(gate), 0);
        assert!(sim.queue_len(gate) > 0);
    }

    #[test]
    fn fifo_exit_order_matches_entry_order() {
        let net = paper_net();
        let gate = net.gate_links[2];
        let far = net.opposite_exit(gate);
        let trips: Vec<Trip> = (0..50)
            .map(|k| Trip {
                depart_s: k,
                origin: gate,
                destination: far,
            })
            .collect();
        let cfg = SimConfig {
            log_discharges: true,
            ..SimConfig::default()
        };
        let mut sim = Simulation::new(&net, trips, cfg);
        for _ in 0..600 {
            sim.step();
        }
        // All these vehicles take the same straight movement off the gate;
        // their discharge order must equal their entry order.
        let order: Vec<u32> = sim
            .discharge_log
            .iter()
            .filter(|(_, l, _)| *l == gate)
            .map(|&(_, _, v)| v)
            .collect();
        assert!(!order.is_empty());
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn insertion_waits_for_storage_room() {
        let net = paper_net();
        let gate = net.gate_links[0];
        let storage = net.storage(gate);
        let far = net.opposite_exit(gate);
        let trips: Vec<Trip> = (0..storage + 50)
            .map(|_| Trip {
                depart_s: 0,
                origin: gate,
                destination: far,
            })
            .collect();
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        // Hold the head signal on the gating phase: gate approach red.
        let head = net.link(gate).to;
        sim.apply_control(head, 2).unwrap();
        sim.step();
        assert_eq!(sim.count(gate), storage);
        assert_eq!(sim.pending_len(gate), 50);
        assert!(sim.check_conservation());
    }

    /// Occupancy stays in [0, 1] across a busy run.
    #[test]
    fn occupancy_bounds_hold() {
        let net = paper_net();
        let schedule = crate::demand::DemandProfile::demand1()
            .resolve(&net, 15000)
            .unwrap();
        let trips = crate::demand::generate_demand(&net, &schedule, 15000).unwrap();
        let trips: Vec<Trip> = trips.into_iter().take(3000).collect();
        let mut sim = Simulation::new(&net, trips, SimConfig::default());
        for _ in 0..400 {
            sim.step();
            for l in &net.links {
                let occ = sim.occupancy(l.id);
                assert!((0.0..=1.0).contains(&occ));
            }
        }
    }
}
