//! Entry-time shortest-path routing over the movement graph.
//!
//! States are directed links, transitions are permitted movements, so
//! routes honor turn restrictions (no u-turns) and may legitimately
//! revisit an intersection to reach a destination that needs a block
//! loop. Link costs are supplied by the caller: free-flow time plus the
//! instantaneous queue-delay estimate at entry.
//!
//! Selection rule: minimum total cost, then fewest links, then the
//! lexicographically smallest link-id sequence. The last rule makes
//! routing (and with it the whole simulation) deterministic on networks
//! with symmetric costs.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{CoreError, CoreResult};
use crate::net::{LinkId, Network};

/// Per-link traversal cost estimate used by [`route`].
pub fn link_costs(net: &Network, queue_len: impl Fn(LinkId) -> u32) -> Vec<f64> {
    net.links
        .iter()
        .map(|l| l.free_flow_s() + f64::from(queue_len(l.id)) / net.discharge_rate(l.id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Label {
    cost: f64,
    hops: u32,
}

impl Label {
    const UNREACHED: Label = Label {
        cost: f64::INFINITY,
        hops: u32::MAX,
    };

    fn better_than(self, other: Label) -> bool {
        self.cost < other.cost || (self.cost == other.cost && self.hops < other.hops)
    }
}

/// Heap entry ordered for a min-heap pop of (cost, hops, link).
struct Pending {
    label: Label,
    link: LinkId,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .label
            .cost
            .total_cmp(&self.label.cost)
            .then(other.label.hops.cmp(&self.label.hops))
            .then(other.link.0.cmp(&self.link.0))
    }
}

/// Minimal-cost path from `origin` to `destination` (both included),
/// under per-link costs. `costs` must have one entry per network link.
pub fn route(
    net: &Network,
    origin: LinkId,
    destination: LinkId,
    costs: &[f64],
) -> CoreResult<Vec<LinkId>> {
    debug_assert_eq!(costs.len(), net.links.len());
    let n = net.links.len();
    let mut labels = alloc::vec![Label::UNREACHED; n];
    // Best path per settled link; final once the link pops because every
    // predecessor on an optimal path pops strictly earlier.
    let mut paths: Vec<Vec<LinkId>> = alloc::vec![Vec::new(); n];
    let mut settled = alloc::vec![false; n];
    let mut heap = BinaryHeap::new();

    labels[origin.index()] = Label {
        cost: costs[origin.index()],
        hops: 1,
    };
    paths[origin.index()] = alloc::vec![origin];
    heap.push(Pending {
        label: labels[origin.index()],
        link: origin,
    });

    while let Some(Pending { label, link }) = heap.pop() {
        if settled[link.index()] || label.cost > labels[link.index()].cost {
            continue;
        }
        settled[link.index()] = true;
        if link == destination {
            return Ok(paths[link.index()].clone());
        }
        for &(next, _) in net.successors(link) {
            if settled[next.index()] {
                continue;
            }
            let cand = Label {
                cost: label.cost + costs[next.index()],
                hops: label.hops + 1,
            };
            let cur = labels[next.index()];
            if cand.better_than(cur) {
                labels[next.index()] = cand;
                let mut p = paths[link.index()].clone();
                p.push(next);
                paths[next.index()] = p;
                heap.push(Pending {
                    label: cand,
                    link: next,
                });
            } else if cand.cost == cur.cost && cand.hops == cur.hops {
                // Exact tie: keep the lexicographically smaller sequence.
                let challenger = &paths[link.index()];
                let incumbent = &paths[next.index()];
                if challenger.as_slice() < &incumbent[..incumbent.len() - 1] {
                    let mut p = challenger.clone();
                    p.push(next);
                    paths[next.index()] = p;
                }
            }
        }
    }
    Err(CoreError::Unreachable {
        origin: origin.0,
        destination: destination.0,
    })
}

/// Total cost of a path under the same left-to-right accumulation the
/// router uses.
pub fn path_cost(path: &[LinkId], costs: &[f64]) -> f64 {
    let mut total = 0.0;
    for l in path {
        total += costs[l.index()];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Bearing, GridSpec};
    use crate::rng::{SimRng, Stream};

    fn paper_net() -> Network {
        Network::build_grid(&GridSpec::paper_5x5()).unwrap()
    }

    /// Exhaustive link-simple path enumeration under the same selection
    /// rule: min cost, then fewest links, then lexicographic sequence.
    fn brute_force(
        net: &Network,
        origin: LinkId,
        destination: LinkId,
        costs: &[f64],
    ) -> Option<(Vec<LinkId>, f64)> {
        struct Search<'a> {
            net: &'a Network,
            costs: &'a [f64],
            destination: LinkId,
            best: Option<(f64, u32, Vec<LinkId>)>,
            on_path: Vec<bool>,
            path: Vec<LinkId>,
        }
        impl Search<'_> {
            fn visit(&mut self, link: LinkId, cost: f64) {
                self.path.push(link);
                self.on_path[link.index()] = true;
                if link == self.destination {
                    let cand = (cost, self.path.len() as u32, self.path.clone());
                    let replace = match &self.best {
                        None => true,
                        Some((bc, bh, bp)) => {
                            (cand.0, cand.1, &cand.2) < (*bc, *bh, bp)
                        }
                    };
                    if replace {
                        self.best = Some(cand);
                    }
                } else {
                    for &(next, _) in self.net.successors(link) {
                        if self.on_path[next.index()] {
                            continue;
                        }
                        let c = cost + self.costs[next.index()];
                        // Any extension adds positive cost, so an equal-or
                        // -worse partial cost can never win.
                        if let Some((bc, _, _)) = &self.best {
                            if c > *bc {
                                continue;
                            }
                        }
                        self.visit(next, c);
                    }
                }
                self.on_path[link.index()] = false;
                self.path.pop();
            }
        }
        let mut s = Search {
            net,
            costs,
            destination,
            best: None,
            on_path: alloc::vec![false; net.links.len()],
            path: Vec::new(),
        };
        s.visit(origin, costs[origin.index()]);
        s.best.map(|(c, _, p)| (p, c))
    }

    #[test]
    fn straight_axis_od_takes_the_straight_path() {
        let net = paper_net();
        let costs = link_costs(&net, |_| 0);
        // North gate at column 2 to the straight-south exit.
        let gate = net
            .gate_links
            .iter()
            .copied()
            .filter(|&g| net.gate_side(g) == Bearing::North)
            .nth(2)
            .unwrap();
        let exit = net.opposite_exit(gate);
        let path = route(&net, gate, exit, &costs).unwrap();
        // gate + 4 grid links + exit stub
        assert_eq!(path.len(), 6);
        for l in &path {
            assert_eq!(net.link(*l).bearing, net.link(gate).bearing);
        }
    }

    #[test]
    fn congestion_forces_a_detour() {
        let net = paper_net();
        let gate = net
            .gate_links
            .iter()
            .copied()
            .filter(|&g| net.gate_side(g) == Bearing::North)
            .nth(2)
            .unwrap();
        let exit = net.opposite_exit(gate);
        let straight = route(&net, gate, exit, &link_costs(&net, |_| 0)).unwrap();
        // Pile a fat queue on the second straight link.
        let jammed = straight[1];
        let costs = link_costs(&net, |l| if l == jammed { 300 } else { 0 });
        let detour = route(&net, gate, exit, &costs).unwrap();
        assert!(!detour.contains(&jammed));
        let (oracle, oracle_cost) = brute_force(&net, gate, exit, &costs).unwrap();
        assert_eq!(detour, oracle);
        assert_eq!(path_cost(&detour, &costs), oracle_cost);
    }

    #[test]
    fn matches_enumeration_oracle_on_random_costs() {
        let net = Network::build_grid(&GridSpec {
            rows: 4,
            cols: 4,
            pn_rows: 2,
            pn_cols: 2,
            ..GridSpec::paper_5x5()
        })
        .unwrap();
        let mut rng = SimRng::new(0xABCD, Stream::Generic(1));
        for case in 0..40 {
            let costs: Vec<f64> = net
                .links
                .iter()
                .map(|_| rng.range_f64(1.0, 60.0))
                .collect();
            let origin = LinkId(rng.below(net.links.len()) as u32);
            let destination = LinkId(rng.below(net.links.len()) as u32);
            let got = route(&net, origin, destination, &costs);
            let want = brute_force(&net, origin, destination, &costs);
            match (got, want) {
                (Ok(p), Some((bp, bc))) => {
                    assert_eq!(p, bp, "case {case}");
                    assert_eq!(path_cost(&p, &costs), bc, "case {case}");
                }
                (Err(_), None) => {}
                (g, w) => panic!("case {case}: mismatch {g:?} vs {w:?}"),
            }
        }
    }

    #[test]
    fn uniform_costs_tie_break_matches_oracle() {
        let net = paper_net();
        let costs = link_costs(&net, |_| 0);
        let mut rng = SimRng::new(77, Stream::Generic(2));
        for _ in 0..15 {
            let origin = net.gate_links[rng.below(net.gate_links.len())];
            let destination = net.pn_links[rng.below(net.pn_links.len())];
            let got = route(&net, origin, destination, &costs).unwrap();
            let (want, _) = brute_force(&net, origin, destination, &costs).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn destination_behind_origin_needs_a_block_loop() {
        let net = paper_net();
        let costs = link_costs(&net, |_| 0);
        // Destination is the reverse of the origin link: a u-turn is not a
        // movement, so the route must loop around a block.
        let origin = net.pn_links[0];
        let l = net.link(origin);
        let destination = net
            .links
            .iter()
            .find(|r| r.from == l.to && r.to == l.from)
            .unwrap()
            .id;
        let path = route(&net, origin, destination, &costs).unwrap();
        assert_eq!(path.first(), Some(&origin));
        assert_eq!(path.last(), Some(&destination));
        assert!(path.len() >= 4);
        let (oracle, _) = brute_force(&net, origin, destination, &costs).unwrap();
        assert_eq!(path, oracle);
    }

    #[test]
    fn origin_equals_destination() {
        let net = paper_net();
        let costs = link_costs(&net, |_| 0);
        let l = net.pn_links[3];
        assert_eq!(route(&net, l, l, &costs).unwrap(), alloc::vec![l]);
    }
}
