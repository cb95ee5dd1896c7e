//! Demand schedules, seeded trip generation, and the built-in demand
//! profiles.
//!
//! Demand originates on gate links. Per window each gate draws a rate
//! uniformly from its range, then departures are spaced deterministically
//! at that rate, so the realized volume is rate-exact while the randomness
//! the scenario prescribes lives entirely in the rate draw (and, for
//! shuffled profiles, in the per-window assignment of ranges to gates).
//!
//! Destination split per departure: a configurable share ends inside the
//! protected network, a share crosses to the far boundary (one third of it
//! turning toward a random other boundary terminal), and the remainder are
//! internal trips that start on the gate's downstream link.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::net::{Bearing, LinkId, Network};
use crate::rng::{SimRng, Stream};

/// One demand window on one gate: rate drawn uniformly from
/// [rate_lo, rate_hi] veh/h.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandWindow {
    pub start_s: u32,
    pub end_s: u32,
    pub rate_lo: f64,
    pub rate_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDemand {
    pub gate: LinkId,
    pub windows: Vec<DemandWindow>,
}

/// Fully resolved schedule: every gate has its windows and ranges pinned.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSchedule {
    pub gates: Vec<GateDemand>,
    pub horizon_s: u32,
    /// Fraction of departures ending inside the PN (origin on the gate).
    pub share_pn_destination: f64,
    /// Fraction crossing to the opposite boundary.
    pub share_crossing: f64,
    /// Fraction starting on the gate's downstream PN link and ending in
    /// the PN.
    pub share_internal: f64,
    /// Portion of the crossing share that turns toward a random other
    /// boundary terminal.
    pub turning_fraction: f64,
}

impl DemandSchedule {
    pub fn validate(&self) -> CoreResult<()> {
        if self.gates.is_empty() {
            return Err(CoreError::Demand(String::from("no gates in schedule")));
        }
        let sum = self.share_pn_destination + self.share_crossing + self.share_internal;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Demand(format!(
                "destination shares must sum to 1.0, got {sum}"
            )));
        }
        if self.share_pn_destination < 0.0 || self.share_crossing < 0.0 || self.share_internal < 0.0
        {
            return Err(CoreError::Demand(String::from(
                "destination shares must be nonnegative",
            )));
        }
        if !(0.0..=1.0).contains(&self.turning_fraction) {
            return Err(CoreError::Demand(String::from(
                "turning fraction must be in [0, 1]",
            )));
        }
        for g in &self.gates {
            if g.windows.is_empty() {
                return Err(CoreError::Demand(format!(
                    "gate {} has no windows",
                    g.gate.0
                )));
            }
            let mut cursor = 0;
            for w in &g.windows {
                if w.start_s != cursor {
                    return Err(CoreError::Demand(format!(
                        "gate {}: window starting at {} leaves a gap or overlap at {}",
                        g.gate.0, w.start_s, cursor
                    )));
                }
                if w.end_s <= w.start_s {
                    return Err(CoreError::Demand(format!(
                        "gate {}: empty window at {}",
                        g.gate.0, w.start_s
                    )));
                }
                if !(w.rate_lo.is_finite() && w.rate_hi.is_finite())
                    || w.rate_lo < 0.0
                    || w.rate_hi < w.rate_lo
                {
                    return Err(CoreError::Demand(format!(
                        "gate {}: bad rate range [{}, {}]",
                        g.gate.0, w.rate_lo, w.rate_hi
                    )));
                }
                cursor = w.end_s;
            }
            if cursor != self.horizon_s {
                return Err(CoreError::Demand(format!(
                    "gate {}: windows end at {} but horizon is {}",
                    g.gate.0, cursor, self.horizon_s
                )));
            }
        }
        Ok(())
    }
}

/// A single generated trip. `origin` is a gate link, except for internal
/// trips where it is the gate's downstream PN link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trip {
    pub depart_s: u32,
    pub origin: LinkId,
    pub destination: LinkId,
}

/// Demand profiles shipped with the lab. `DirectionTable` applies one
/// rate table to every gate on the matching boundary side; `ShuffledTable`
/// reshuffles a set of ranges over each side's gates every window.
#[derive(Debug, Clone, PartialEq)]
pub enum DemandProfile {
    /// Per-direction, per-window ranges (N, E, S, W order).
    DirectionTable {
        window_s: u32,
        ranges: [Vec<(f64, f64)>; 4],
    },
    /// Per-direction sets of ranges, shuffled onto that side's gates every
    /// window. Sides with more gates than ranges wrap around.
    ShuffledTable {
        window_s: u32,
        window_count: u32,
        range_sets: [Vec<(f64, f64)>; 4],
    },
    /// No demand at all for the given horizon.
    Zero { horizon_s: u32 },
}

impl DemandProfile {
    /// First benchmark pattern: four 1200 s windows, one range per
    /// boundary side per window, deliberately unbalanced.
    pub fn demand1() -> DemandProfile {
        DemandProfile::DirectionTable {
            window_s: 1200,
            ranges: [
                // North
                alloc::vec![(1200.0, 1440.0), (1080.0, 1320.0), (960.0, 1140.0), (810.0, 990.0)],
                // East
                alloc::vec![(1080.0, 1320.0), (810.0, 990.0), (1200.0, 1440.0), (960.0, 1140.0)],
                // South
                alloc::vec![(810.0, 990.0), (960.0, 1140.0), (1080.0, 1320.0), (1200.0, 1440.0)],
                // West
                alloc::vec![(960.0, 1140.0), (1200.0, 1440.0), (810.0, 990.0), (1080.0, 1320.0)],
            ],
        }
    }

    /// Second benchmark pattern: five ranges per side, reshuffled over the
    /// side's gates every 1200 s window.
    pub fn demand2() -> DemandProfile {
        DemandProfile::ShuffledTable {
            window_s: 1200,
            window_count: 4,
            range_sets: [
                // North
                alloc::vec![
                    (680.0, 820.0),
                    (810.0, 990.0),
                    (960.0, 1140.0),
                    (1080.0, 1320.0),
                    (1200.0, 1440.0),
                ],
                // East
                alloc::vec![
                    (1080.0, 1320.0),
                    (1200.0, 1440.0),
                    (680.0, 820.0),
                    (810.0, 990.0),
                    (960.0, 1140.0),
                ],
                // South
                alloc::vec![
                    (810.0, 990.0),
                    (680.0, 820.0),
                    (1080.0, 1320.0),
                    (1200.0, 1440.0),
                    (960.0, 1140.0),
                ],
                // West
                alloc::vec![
                    (960.0, 1140.0),
                    (1080.0, 1320.0),
                    (1200.0, 1440.0),
                    (680.0, 820.0),
                    (810.0, 990.0),
                ],
            ],
        }
    }

    /// Desk-scale unbalanced table for the 3x3 network: three 600 s
    /// windows, north side hottest.
    pub fn desk1() -> DemandProfile {
        DemandProfile::DirectionTable {
            window_s: 600,
            ranges: [
                alloc::vec![(1150.0, 1350.0), (1050.0, 1250.0), (950.0, 1150.0)], // N
                alloc::vec![(850.0, 1050.0), (550.0, 750.0), (950.0, 1150.0)],    // E
                alloc::vec![(550.0, 750.0), (650.0, 850.0), (750.0, 950.0)],      // S
                alloc::vec![(750.0, 950.0), (850.0, 1050.0), (550.0, 750.0)],     // W
            ],
        }
    }

    /// Desk-scale shuffled pattern used for training runs.
    pub fn desk2() -> DemandProfile {
        DemandProfile::ShuffledTable {
            window_s: 600,
            window_count: 3,
            range_sets: [
                alloc::vec![(650.0, 850.0), (900.0, 1100.0), (1150.0, 1350.0)], // N
                alloc::vec![(850.0, 1050.0), (650.0, 850.0), (1050.0, 1250.0)], // E
                alloc::vec![(550.0, 750.0), (750.0, 950.0), (950.0, 1150.0)],   // S
                alloc::vec![(750.0, 950.0), (950.0, 1150.0), (550.0, 750.0)],   // W
            ],
        }
    }

    fn side_index(side: Bearing) -> usize {
        match side {
            Bearing::North => 0,
            Bearing::East => 1,
            Bearing::South => 2,
            Bearing::West => 3,
        }
    }

    /// Resolves the profile against a network into a per-gate schedule.
    /// Shuffled profiles consume the seed; table profiles are seed-free.
    pub fn resolve(&self, net: &Network, seed: u64) -> CoreResult<DemandSchedule> {
        let gates = match self {
            DemandProfile::Zero { horizon_s } => net
                .gate_links
                .iter()
                .map(|&g| GateDemand {
                    gate: g,
                    windows: alloc::vec![DemandWindow {
                        start_s: 0,
                        end_s: *horizon_s,
                        rate_lo: 0.0,
                        rate_hi: 0.0,
                    }],
                })
                .collect(),
            DemandProfile::DirectionTable { window_s, ranges } => net
                .gate_links
                .iter()
                .map(|&g| {
                    let side = Self::side_index(net.gate_side(g));
                    let windows = ranges[side]
                        .iter()
                        .enumerate()
                        .map(|(i, &(lo, hi))| DemandWindow {
                            start_s: i as u32 * window_s,
                            end_s: (i as u32 + 1) * window_s,
                            rate_lo: lo,
                            rate_hi: hi,
                        })
                        .collect();
                    GateDemand { gate: g, windows }
                })
                .collect(),
            DemandProfile::ShuffledTable {
                window_s,
                window_count,
                range_sets,
            } => {
                let mut rng = SimRng::new(seed, Stream::Generic(0x5f));
                let mut gates: Vec<GateDemand> = net
                    .gate_links
                    .iter()
                    .map(|&g| GateDemand {
                        gate: g,
                        windows: Vec::new(),
                    })
                    .collect();
                for w in 0..*window_count {
                    for side in Bearing::ALL {
                        let set = &range_sets[Self::side_index(side)];
                        if set.is_empty() {
                            return Err(CoreError::Demand(format!(
                                "no ranges for side {}",
                                side.letter()
                            )));
                        }
                        let mut order: Vec<usize> = (0..set.len()).collect();
                        rng.shuffle(&mut order);
                        let side_gates: Vec<usize> = (0..gates.len())
                            .filter(|&i| net.gate_side(gates[i].gate) == side)
                            .collect();
                        for (pos, &gi) in side_gates.iter().enumerate() {
                            let (lo, hi) = set[order[pos % order.len()]];
                            gates[gi].windows.push(DemandWindow {
                                start_s: w * window_s,
                                end_s: (w + 1) * window_s,
                                rate_lo: lo,
                                rate_hi: hi,
                            });
                        }
                    }
                }
                gates
            }
        };
        let horizon_s = gates
            .first()
            .and_then(|g| g.windows.last())
            .map(|w| w.end_s)
            .unwrap_or(0);
        let schedule = DemandSchedule {
            gates,
            horizon_s,
            share_pn_destination: 0.27,
            share_crossing: 0.63,
            share_internal: 0.10,
            turning_fraction: 1.0 / 3.0,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Generates the trip table for one run. Deterministic per seed: rates,
/// splits, and random destinations all come from seed-derived streams.
pub fn generate_demand(
    net: &Network,
    schedule: &DemandSchedule,
    seed: u64,
) -> CoreResult<Vec<Trip>> {
    schedule.validate()?;
    let mut rate_rng = SimRng::new(seed, Stream::Demand);
    let mut dest_rng = SimRng::new(seed, Stream::Destinations);
    let exits = net.exit_links();
    let mut trips: Vec<Trip> = Vec::new();

    for gate in &schedule.gates {
        for w in &gate.windows {
            let rate = rate_rng.range_f64(w.rate_lo, w.rate_hi);
            if rate <= 0.0 {
                continue;
            }
            let headway = 3600.0 / rate;
            let span = f64::from(w.end_s - w.start_s);
            let mut k = 0u32;
            loop {
                let offset = f64::from(k) * headway;
                if offset >= span {
                    break;
                }
                let depart_s = w.start_s + offset as u32;
                let trip =
                    draw_destination(net, schedule, gate.gate, depart_s, &exits, &mut dest_rng);
                trips.push(trip);
                k += 1;
            }
        }
    }
    trips.sort_by_key(|t| t.depart_s);
    Ok(trips)
}

fn draw_destination(
    net: &Network,
    schedule: &DemandSchedule,
    gate: LinkId,
    depart_s: u32,
    exits: &[LinkId],
    rng: &mut SimRng,
) -> Trip {
    let u = rng.unit();
    if u < schedule.share_pn_destination {
        let destination = net.pn_links[rng.below(net.pn_links.len())];
        Trip {
            depart_s,
            origin: gate,
            destination,
        }
    } else if u < schedule.share_pn_destination + schedule.share_crossing {
        let destination = if rng.unit() < schedule.turning_fraction {
            let twin = net.twin_exit(gate);
            let mut pick = exits[rng.below(exits.len())];
            if pick == twin {
                let idx = exits.iter().position(|&e| e == pick).unwrap();
                pick = exits[(idx + 1) % exits.len()];
            }
            pick
        } else {
            net.opposite_exit(gate)
        };
        Trip {
            depart_s,
            origin: gate,
            destination,
        }
    } else {
        let origin = net.gate_through_target(gate);
        let mut destination = net.pn_links[rng.below(net.pn_links.len())];
        if destination == origin {
            let idx = net.pn_links.iter().position(|&l| l == destination).unwrap();
            destination = net.pn_links[(idx + 1) % net.pn_links.len()];
        }
        Trip {
            depart_s,
            origin,
            destination,
        }
    }
}
