//! Closed-loop test runs: one entry point drives any cordon strategy
//! against a trip table and produces the full metrics log plus command
//! and decision audit trails.
//!
//! All strategies read the same measurement: the protected network's
//! travel time over the most recently completed 20 s interval. Interior
//! intersections always run their fixed two-phase timetables inside the
//! simulation; only cordon signals are commanded here.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::control::{self, BudgetCarry, GateCommand, PiState};
use crate::demand::Trip;
use crate::error::{CoreError, CoreResult};
use crate::marl::{argmax, CordonTrackers};
use crate::metrics::{EmissionCoeffs, MetricsLog};
use crate::net::{Network, NodeId};
use crate::nn::Mlp;
use crate::pc::{self, PcFeedback, PenaltySets};
use crate::sim::{SimConfig, Simulation, ACTION_STEP_S};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    /// Fixed timetables everywhere; no perimeter control.
    Fixed,
    /// Close every gate for the next action step while TTT exceeds the
    /// critical value.
    Feedback,
    /// PI total-inflow control, split uniformly over the gates.
    Pi,
    /// PI total-inflow control distributed by relative queue balancing.
    PiCordonQueue,
    /// Trained signal agents fused with the PI-style feedback penalty.
    RlSemiModel,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fixed => "fixed",
            StrategyKind::Feedback => "feedback",
            StrategyKind::Pi => "pi",
            StrategyKind::PiCordonQueue => "pi_cordon_queue",
            StrategyKind::RlSemiModel => "rl_semi_model",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub horizon_s: u32,
    /// KPI measurement interval.
    pub interval_s: u32,
    /// PI update period.
    pub control_period_s: u32,
    pub k_p: f64,
    pub k_i: f64,
    pub k_s: f64,
    pub ttt_crit: f64,
    pub green_split: (u32, u32),
    pub emission: EmissionCoeffs,
    pub log_discharges: bool,
}

impl RunConfig {
    pub fn new(strategy: StrategyKind, horizon_s: u32, ttt_crit: f64) -> RunConfig {
        RunConfig {
            strategy,
            horizon_s,
            interval_s: 20,
            control_period_s: 60,
            k_p: 2.0,
            k_i: 0.5,
            k_s: 750.0,
            ttt_crit,
            green_split: (30, 30),
            emission: EmissionCoeffs::default(),
            log_discharges: false,
        }
    }

    fn validate(&self) -> CoreResult<()> {
        if self.horizon_s == 0
            || !self.horizon_s.is_multiple_of(self.interval_s)
            || !self.interval_s.is_multiple_of(ACTION_STEP_S)
            || !self.control_period_s.is_multiple_of(ACTION_STEP_S)
        {
            return Err(CoreError::Control(format!(
                "horizon {} must be a multiple of the {} s interval, and \
                 interval and control period multiples of the {} s action step",
                self.horizon_s, self.interval_s, ACTION_STEP_S
            )));
        }
        if self.strategy == StrategyKind::RlSemiModel && (self.k_s.is_nan() || self.k_s <= 0.0) {
            return Err(CoreError::Control(alloc::string::String::from(
                "k_s must be positive",
            )));
        }
        Ok(())
    }
}

/// A phase command that changed a signal's state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandRecord {
    pub t: u32,
    pub signal: NodeId,
    pub phase: usize,
}

/// One agent decision at one action step (semi-model strategy only).
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub t: u32,
    pub signal: NodeId,
    pub q: Vec<f64>,
    pub penalty: Vec<f64>,
    pub factor: f64,
    pub chosen: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: StrategyKind,
    pub metrics: MetricsLog,
    pub commands: Vec<CommandRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub entered: u64,
    pub exited: u64,
    pub discarded: u32,
    /// Conservation and storage checks held at every step.
    pub conservation_ok: bool,
    /// All link occupancies stayed in [0, 1] at every step.
    pub occupancy_ok: bool,
    /// Independent per-vehicle accumulation of PN seconds, for
    /// cross-checking the interval metrics.
    pub vehicle_pn_seconds: u64,
}

/// Runs one strategy over one trip table. `weights` maps every cordon
/// signal to its net and is required (and only read) by the semi-model
/// strategy.
pub fn run(
    net: &Network,
    trips: Vec<Trip>,
    cfg: &RunConfig,
    weights: Option<&BTreeMap<NodeId, Mlp>>,
) -> CoreResult<RunOutput> {
    cfg.validate()?;
    let mut sim = Simulation::new(
        net,
        trips,
        SimConfig {
            green_split: cfg.green_split,
            log_discharges: cfg.log_discharges,
        },
    );
    let gate_ff: Vec<f64> = net
        .gate_links
        .iter()
        .map(|&g| net.link(g).free_flow_s())
        .collect();
    let mut metrics = MetricsLog::new(cfg.interval_s, gate_ff, cfg.emission);
    let gate_index: BTreeMap<u32, usize> = net
        .gate_links
        .iter()
        .enumerate()
        .map(|(i, g)| (g.0, i))
        .collect();

    let mut commands: Vec<CommandRecord> = Vec::new();
    let mut decisions: Vec<DecisionRecord> = Vec::new();
    let mut last_commanded: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut conservation_ok = true;
    let mut occupancy_ok = true;

    let mut strategy = StrategyState::new(net, cfg, weights)?;

    for t in 0..cfg.horizon_s {
        let measured_ttt = metrics.last_interval_pn_ttt();
        strategy.command(
            net,
            &mut sim,
            cfg,
            t,
            measured_ttt,
            &mut commands,
            &mut decisions,
            &mut last_commanded,
        )?;

        let stats = sim.step();
        strategy.after_second(&sim);
        metrics.on_second(t, &stats, |gid| gate_index[&gid]);
        if (t + 1) % cfg.interval_s == 0 {
            let counts: Vec<u32> = net.pn_links.iter().map(|&l| sim.count(l)).collect();
            metrics.close_interval(counts);
        }

        conservation_ok &= sim.check_conservation();
        occupancy_ok &= net
            .links
            .iter()
            .all(|l| (0.0..=1.0).contains(&sim.occupancy(l.id)));
    }

    let vehicle_pn_seconds = sim.vehicles.iter().map(|v| v.pn_seconds).sum();
    Ok(RunOutput {
        strategy: cfg.strategy,
        metrics,
        commands,
        decisions,
        entered: sim.entered,
        exited: sim.exited,
        discarded: sim.discarded,
        conservation_ok,
        occupancy_ok,
        vehicle_pn_seconds,
    })
}

/// Mutable state of the active strategy.
enum StrategyState {
    Fixed,
    Feedback,
    Metered {
        pi: PiState,
        carry: BudgetCarry,
        /// Fractional carry of the queue-balanced total.
        total_carry: f64,
        balance_queues: bool,
        /// Remaining admissions this period, per gate.
        budgets: Vec<u32>,
        /// Gate discharge counters at period start.
        baseline: Vec<u64>,
        /// Per cordon signal: (gate order index, phase serving the gate).
        served_gates: BTreeMap<NodeId, Vec<(usize, usize)>>,
        /// Per-gate admission cap for queue balancing, one period.
        period_cap: u32,
    },
    Rl {
        trackers: CordonTrackers,
        nets: BTreeMap<NodeId, Mlp>,
        sets: BTreeMap<NodeId, PenaltySets>,
    },
}

impl StrategyState {
    fn new(
        net: &Network,
        cfg: &RunConfig,
        weights: Option<&BTreeMap<NodeId, Mlp>>,
    ) -> CoreResult<StrategyState> {
        Ok(match cfg.strategy {
            StrategyKind::Fixed => StrategyState::Fixed,
            StrategyKind::Feedback => StrategyState::Feedback,
            StrategyKind::Pi | StrategyKind::PiCordonQueue => {
                let inflow_max: f64 = net
                    .gate_links
                    .iter()
                    .map(|&g| net.discharge_rate(g) * 3600.0)
                    .sum();
                let mut served_gates: BTreeMap<NodeId, Vec<(usize, usize)>> = BTreeMap::new();
                for (gi, &gate) in net.gate_links.iter().enumerate() {
                    let head = net.link(gate).to;
                    let inter = net.intersection(head);
                    let phase = (0..inter.phases.len())
                        .find(|&p| {
                            !inter.phases[p].is_gating
                                && inter.movements.iter().any(|&m| {
                                    let mv = net.movement(m);
                                    mv.from_link == gate
                                        && inter.phases[p].grants(mv.local_idx)
                                })
                        })
                        .ok_or_else(|| {
                            CoreError::Control(format!(
                                "gate {} has no serving phase",
                                gate.0
                            ))
                        })?;
                    served_gates.entry(head).or_default().push((gi, phase));
                }
                let period_cap = net
                    .gate_links
                    .iter()
                    .map(|&g| (net.discharge_rate(g) * f64::from(cfg.control_period_s)) as u32)
                    .min()
                    .unwrap_or(0);
                StrategyState::Metered {
                    pi: PiState::new(cfg.k_p, cfg.k_i, cfg.ttt_crit, inflow_max),
                    carry: BudgetCarry::new(net.gate_links.len()),
                    total_carry: 0.0,
                    balance_queues: cfg.strategy == StrategyKind::PiCordonQueue,
                    budgets: alloc::vec![0; net.gate_links.len()],
                    baseline: alloc::vec![0; net.gate_links.len()],
                    served_gates,
                    period_cap,
                }
            }
            StrategyKind::RlSemiModel => {
                let weights = weights.ok_or_else(|| {
                    CoreError::Control(alloc::string::String::from(
                        "semi-model strategy needs weights for every cordon signal",
                    ))
                })?;
                let mut nets = BTreeMap::new();
                let mut sets = BTreeMap::new();
                for &node in &net.cordon_signals {
                    let mlp = weights.get(&node).ok_or_else(|| {
                        CoreError::Control(format!(
                            "no weights assigned to cordon signal {}",
                            node.0
                        ))
                    })?;
                    nets.insert(node, mlp.clone());
                    sets.insert(node, pc::penalty_sets(net, node)?);
                }
                StrategyState::Rl {
                    trackers: CordonTrackers::new(net),
                    nets,
                    sets,
                }
            }
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn command(
        &mut self,
        net: &Network,
        sim: &mut Simulation,
        cfg: &RunConfig,
        t: u32,
        measured_ttt: f64,
        commands: &mut Vec<CommandRecord>,
        decisions: &mut Vec<DecisionRecord>,
        last_commanded: &mut BTreeMap<NodeId, usize>,
    ) -> CoreResult<()> {
        let boundary = t.is_multiple_of(ACTION_STEP_S);
        let mut issue = |sim: &mut Simulation, node: NodeId, phase: usize| -> CoreResult<()> {
            sim.apply_control(node, phase)?;
            if last_commanded.insert(node, phase) != Some(phase) {
                commands.push(CommandRecord {
                    t,
                    signal: node,
                    phase,
                });
            }
            Ok(())
        };

        match self {
            StrategyState::Fixed => {
                if boundary {
                    let phase = control::fixed_plan(t, cfg.green_split.0, cfg.green_split.1);
                    for &node in &net.cordon_signals {
                        issue(sim, node, phase)?;
                    }
                }
            }
            StrategyState::Feedback => {
                if boundary {
                    let closed =
                        control::feedback_gate(measured_ttt, cfg.ttt_crit) == GateCommand::CloseAll;
                    let fixed = control::fixed_plan(t, cfg.green_split.0, cfg.green_split.1);
                    for &node in &net.cordon_signals {
                        let phase = if closed {
                            net.intersection(node).gating_phase().unwrap()
                        } else {
                            fixed
                        };
                        issue(sim, node, phase)?;
                    }
                }
            }
            StrategyState::Metered {
                pi,
                carry,
                total_carry,
                balance_queues,
                budgets,
                baseline,
                served_gates,
                period_cap,
            } => {
                if t.is_multiple_of(cfg.control_period_s) {
                    let inflow = pi.pi_update(measured_ttt);
                    *budgets = if *balance_queues {
                        *total_carry += inflow * f64::from(cfg.control_period_s) / 3600.0;
                        let total = *total_carry as u32;
                        *total_carry -= f64::from(total);
                        let queues: Vec<u32> = net
                            .gate_links
                            .iter()
                            .map(|&g| sim.queue_len(g) + sim.pending_len(g))
                            .collect();
                        let caps = alloc::vec![*period_cap; net.gate_links.len()];
                        let storages: Vec<u32> =
                            net.gate_links.iter().map(|&g| net.storage(g)).collect();
                        control::cordon_queue_distribution(total, &queues, &caps, &storages)
                    } else {
                        control::uniform_metering(
                            inflow,
                            net.gate_links.len(),
                            cfg.control_period_s,
                            carry,
                        )?
                    };
                    for (gi, &gate) in net.gate_links.iter().enumerate() {
                        baseline[gi] = sim.discharged(gate);
                    }
                }
                // Metering is enforced every second: once a gate's period
                // budget is spent, slots of its serving phase switch to
                // the gating phase.
                let base = control::fixed_plan(t, cfg.green_split.0, cfg.green_split.1);
                for &node in &net.cordon_signals {
                    let gating = net.intersection(node).gating_phase().unwrap();
                    let mut phase = base;
                    if let Some(gates) = served_gates.get(&node) {
                        let servable = gates.iter().any(|&(gi, p)| {
                            p == base
                                && u64::from(budgets[gi])
                                    > sim.discharged(net.gate_links[gi]) - baseline[gi]
                        });
                        let base_serves_a_gate = gates.iter().any(|&(_, p)| p == base);
                        if base_serves_a_gate && !servable {
                            phase = gating;
                        }
                    }
                    issue(sim, node, phase)?;
                }
            }
            StrategyState::Rl {
                trackers,
                nets,
                sets,
            } => {
                if boundary {
                    trackers.roll_step();
                    let factor = pc::penalty_factor(&PcFeedback {
                        ttt_now: measured_ttt,
                        ttt_crit: cfg.ttt_crit,
                        k_s: cfg.k_s,
                    })?;
                    // Observations for every signal first, then commits,
                    // so neighbor features are order-independent.
                    let states: Vec<(NodeId, Vec<f64>)> = trackers
                        .order
                        .clone()
                        .into_iter()
                        .map(|node| {
                            let s = trackers.build_state(sim, node);
                            (node, s)
                        })
                        .collect();
                    for (node, state) in states {
                        let q = nets[&node].forward(&state)?;
                        let decision = pc::decide(q, &sets[&node], |m| sim.movement_occupancy(m), factor);
                        issue(sim, node, decision.action)?;
                        trackers.get_mut(node).commit(decision.action);
                        decisions.push(DecisionRecord {
                            t,
                            signal: node,
                            q: decision.q,
                            penalty: decision.penalty,
                            factor,
                            chosen: decision.action,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn after_second(&mut self, sim: &Simulation) {
        if let StrategyState::Rl { trackers, .. } = self {
            trackers.on_second(sim);
        }
    }
}

/// Convenience wrapper for the semi-model strategy: transfers donor nets
/// across the cordon and runs the closed loop.
pub fn run_semi_model_pc(
    net: &Network,
    trips: Vec<Trip>,
    cfg: &RunConfig,
    donors: &[Mlp],
) -> CoreResult<RunOutput> {
    if donors.is_empty() {
        return Err(CoreError::Control(alloc::string::String::from(
            "no donor nets",
        )));
    }
    let dims = donors[0].dims.clone();
    let assignment = crate::marl::transfer(donors, net, &dims)?;
    let weights: BTreeMap<NodeId, Mlp> = assignment
        .into_iter()
        .map(|(node, donor)| (node, donors[donor].clone()))
        .collect();
    run(net, trips, cfg, Some(&weights))
}

/// Pure greedy local policy trace: what the agents would do with the
/// feedback disabled. Used to verify that zero factor leaves decisions
/// untouched.
pub fn greedy_reference_actions(decisions: &[DecisionRecord]) -> Vec<usize> {
    decisions.iter().map(|d| argmax(&d.q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{generate_demand, DemandProfile};
    use crate::net::GridSpec;

    fn desk_net() -> Network {
        Network::build_grid(&GridSpec::desk_3x3()).unwrap()
    }

    fn desk_trips(net: &Network, seed: u64) -> Vec<Trip> {
        let schedule = DemandProfile::desk1().resolve(net, seed).unwrap();
        generate_demand(net, &schedule, seed).unwrap()
    }

    fn desk_weights(net: &Network) -> BTreeMap<NodeId, Mlp> {
        let dims = crate::marl::TrainConfig::desk(0).dims();
        let donors: Vec<Mlp> = (0..3).map(|i| Mlp::init(&dims, 5, i)).collect();
        crate::marl::transfer(&donors, net, &dims)
            .unwrap()
            .into_iter()
            .map(|(n, d)| (n, donors[d].clone()))
            .collect()
    }

    #[test]
    fn fixed_run_conserves_and_is_deterministic() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::Fixed, 1200, 2000.0);
        let a = run(&net, desk_trips(&net, 7), &cfg, None).unwrap();
        let b = run(&net, desk_trips(&net, 7), &cfg, None).unwrap();
        assert!(a.conservation_ok);
        assert!(a.occupancy_ok);
        assert!(a.entered > 0);
        assert_eq!(a.metrics.totals, b.metrics.totals);
        assert_eq!(a.commands, b.commands);
        // Per-vehicle PN seconds equal the interval accumulation.
        let interval_sum: f64 = a.metrics.intervals.iter().map(|r| r.pn_ttt).sum();
        assert!((interval_sum - a.vehicle_pn_seconds as f64).abs() < 1e-6);
    }

    #[test]
    fn cordon_commands_under_fixed_follow_the_timetable() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::Fixed, 140, 2000.0);
        let out = run(&net, Vec::new(), &cfg, None).unwrap();
        // Phase changes at the timetable switch points only: t=30 (to 1),
        // t=65 (to 0), t=100 (to 1), t=135 (to 0).
        let node = net.cordon_signals[0];
        let mine: Vec<(u32, usize)> = out
            .commands
            .iter()
            .filter(|c| c.signal == node)
            .map(|c| (c.t, c.phase))
            .collect();
        assert_eq!(mine, alloc::vec![(0, 0), (30, 1), (65, 0), (100, 1), (135, 0)]);
    }

    #[test]
    fn feedback_closes_all_gates_above_threshold() {
        let net = desk_net();
        // Absurdly low threshold: every interval after the first will
        // exceed it, so from t=20+5 on, all cordon signals sit on gating.
        let mut cfg = RunConfig::new(StrategyKind::Feedback, 300, 1.0);
        cfg.k_s = 100.0;
        let out = run(&net, desk_trips(&net, 3), &cfg, None).unwrap();
        let gating: Vec<_> = net
            .cordon_signals
            .iter()
            .map(|&n| net.intersection(n).gating_phase().unwrap())
            .collect();
        for (i, &node) in net.cordon_signals.iter().enumerate() {
            let last = out
                .commands
                .iter().rfind(|c| c.signal == node)
                .unwrap();
            assert_eq!(last.phase, gating[i]);
            assert!(last.t <= 45);
        }
    }

    #[test]
    fn zero_demand_feedback_never_closes() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::Feedback, 300, 2000.0);
        let out = run(&net, Vec::new(), &cfg, None).unwrap();
        let gating: Vec<_> = net
            .cordon_signals
            .iter()
            .map(|&n| net.intersection(n).gating_phase().unwrap())
            .collect();
        for c in &out.commands {
            let gi = net
                .cordon_signals
                .iter()
                .position(|&n| n == c.signal)
                .unwrap();
            assert_ne!(c.phase, gating[gi]);
        }
    }

    #[test]
    fn metering_respects_budgets() {
        let net = desk_net();
        let mut cfg = RunConfig::new(StrategyKind::Pi, 1200, 800.0);
        cfg.k_p = 2.0;
        cfg.k_i = 0.5;
        let out = run(&net, desk_trips(&net, 11), &cfg, None).unwrap();
        assert!(out.conservation_ok);
        // Re-derive per-period admissions from the metrics seconds and
        // assert they are bounded: run again with a tiny critical TTT so
        // the PI quickly drives the budget to zero, then gates must stop
        // admitting entirely once interlocks settle.
        let mut tight = cfg.clone();
        tight.ttt_crit = 1.0;
        tight.strategy = StrategyKind::Pi;
        let out2 = run(&net, desk_trips(&net, 11), &tight, None).unwrap();
        assert!(
            out2.metrics.totals.pn_ttt_veh_s < out.metrics.totals.pn_ttt_veh_s,
            "tighter setpoint must admit less: {} vs {}",
            out2.metrics.totals.pn_ttt_veh_s,
            out.metrics.totals.pn_ttt_veh_s
        );
    }

    #[test]
    fn queue_balancing_runs_and_conserves() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::PiCordonQueue, 1200, 800.0);
        let out = run(&net, desk_trips(&net, 11), &cfg, None).unwrap();
        assert!(out.conservation_ok);
        assert!(out.occupancy_ok);
        assert!(out.exited > 0);
    }

    #[test]
    fn rl_requires_weights_for_every_signal() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::RlSemiModel, 200, 2000.0);
        assert!(run(&net, Vec::new(), &cfg, None).is_err());
        let mut partial = desk_weights(&net);
        partial.remove(&net.cordon_signals[3]);
        assert!(run(&net, Vec::new(), &cfg, Some(&partial)).is_err());
    }

    #[test]
    fn rl_zero_demand_is_pure_local_greedy() {
        let net = desk_net();
        let weights = desk_weights(&net);
        let cfg = RunConfig::new(StrategyKind::RlSemiModel, 300, 2000.0);
        let out = run(&net, Vec::new(), &cfg, Some(&weights)).unwrap();
        assert!(!out.decisions.is_empty());
        let greedy = greedy_reference_actions(&out.decisions);
        for (d, g) in out.decisions.iter().zip(greedy) {
            assert_eq!(d.factor, 0.0);
            assert_eq!(d.chosen, g);
            let gating = net.intersection(d.signal).gating_phase().unwrap();
            assert_eq!(d.penalty[gating], 0.0);
        }
        assert_eq!(out.metrics.totals.pn_ttt_veh_s, 0.0);
    }

    #[test]
    fn rl_run_is_deterministic() {
        let net = desk_net();
        let weights = desk_weights(&net);
        let mut cfg = RunConfig::new(StrategyKind::RlSemiModel, 600, 300.0);
        cfg.k_s = 50.0;
        let a = run(&net, desk_trips(&net, 21), &cfg, Some(&weights)).unwrap();
        let b = run(&net, desk_trips(&net, 21), &cfg, Some(&weights)).unwrap();
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.metrics.totals, b.metrics.totals);
        // The gating action's value is never modified.
        for d in &a.decisions {
            let gating = net.intersection(d.signal).gating_phase().unwrap();
            assert_eq!(d.penalty[gating], 0.0);
        }
    }

    #[test]
    fn horizon_must_align_with_intervals() {
        let net = desk_net();
        let cfg = RunConfig::new(StrategyKind::Fixed, 130, 2000.0);
        assert!(run(&net, Vec::new(), &cfg, None).is_err());
    }
}
