//! Decentralized cordon signal agents: observation encoding, reward,
//! replay, double-Q targets, epsilon-greedy exploration, the episode
//! training loop, and weight transfer across the cordon.
//!
//! Observation layout (encoding version 1), all features in [0, 1]:
//!
//! ```text
//! [ stop_time_norm,            stopping veh·s of the last action step,
//!                              normalized by 5 s x total leg storage
//!   occ_leg0 .. occ_leg3,      leg occupancies in canonical orientation
//!                              (outward first, then clockwise)
//!   switches / 10,             interlocks triggered in the last 10 actions
//!   one_hot4(own last action),   3 phases + "none"
//!   one_hot4(neighbor A action), same-edge predecessor, "none" at edge end
//!   one_hot4(neighbor B action) ] same-edge successor
//! ```
//!
//! Legs are listed relative to each signal's outward bearing, so a policy
//! trained on one edge reads identically rotated states on any other edge;
//! transfer is plain weight reuse.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::control;
use crate::demand::{generate_demand, DemandProfile};
use crate::error::{CoreError, CoreResult};
use crate::net::{Edge, LinkId, Network, NodeId};
use crate::nn::{train_batch, Mlp, OptimizerKind, OptimizerState, TrainSample};
use crate::rng::{SimRng, Stream};
use crate::sim::{SimConfig, Simulation, ACTION_STEP_S};

/// Observation encoding version; recorded in training manifests.
pub const OBS_VERSION: u32 = 1;
/// Number of signal phases an agent chooses between (two local + gating).
pub const N_ACTIONS: usize = 3;
/// Actions remembered: own + two same-edge neighbors, one-hot with "none".
pub const OBS_DIM: usize = 1 + 4 + 1 + 3 * (N_ACTIONS + 1);

/// Default critical occupancy for the leg-saturation penalty.
pub const CRIT_OCCUPANCY: f64 = 0.75;
/// Default critical number of phase switches over the last ten actions.
pub const CRIT_SWITCHES: u32 = 2;

/// Per-signal bookkeeping shared by training and test-time control.
#[derive(Debug, Clone)]
pub struct SignalTracker {
    pub node: NodeId,
    /// Incoming legs, canonical orientation.
    pub legs: [LinkId; 4],
    /// Same-edge neighbors: predecessor, successor.
    pub neighbors: [Option<NodeId>; 2],
    /// 5 s x total storage of the legs; stop-time normalizer.
    stop_norm: f64,
    /// Stopping veh·s accumulating over the current action step.
    d_open: f64,
    /// Stopping veh·s of the last completed action step.
    pub d_last: f64,
    /// ... and of the step before it.
    pub d_before: f64,
    /// Interlock flags of the most recent action steps (up to 10).
    switch_history: VecDeque<bool>,
    /// Phase committed at the previous action step.
    pub last_action: Option<usize>,
}

impl SignalTracker {
    fn new(net: &Network, node: NodeId) -> SignalTracker {
        let legs = net.intersection(node).legs_canonical();
        let storage: u32 = legs.iter().map(|&l| net.storage(l)).sum();
        SignalTracker {
            node,
            legs,
            neighbors: net.edge_neighbors(node),
            stop_norm: f64::from(ACTION_STEP_S) * f64::from(storage),
            d_open: 0.0,
            d_last: 0.0,
            d_before: 0.0,
            switch_history: VecDeque::new(),
            last_action: None,
        }
    }

    /// Interlocks triggered over the last ten committed actions.
    pub fn switches(&self) -> u32 {
        self.switch_history.iter().filter(|&&s| s).count() as u32
    }

    /// Records a committed action and whether it triggered an interlock.
    pub fn commit(&mut self, action: usize) {
        let switched = self.last_action.is_some_and(|prev| prev != action);
        if self.switch_history.len() == 10 {
            self.switch_history.pop_front();
        }
        self.switch_history.push_back(switched);
        self.last_action = Some(action);
    }

    fn roll_step(&mut self) {
        self.d_before = self.d_last;
        self.d_last = self.d_open;
        self.d_open = 0.0;
    }
}

/// Trackers for every cordon signal of a network, in cordon order.
#[derive(Debug, Clone)]
pub struct CordonTrackers {
    pub order: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    pub items: Vec<SignalTracker>,
}

impl CordonTrackers {
    pub fn new(net: &Network) -> CordonTrackers {
        let order = net.cordon_signals.clone();
        let items = order.iter().map(|&n| SignalTracker::new(net, n)).collect();
        let index = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        CordonTrackers {
            order,
            index,
            items,
        }
    }

    pub fn get(&self, node: NodeId) -> &SignalTracker {
        &self.items[self.index[&node]]
    }

    pub fn get_mut(&mut self, node: NodeId) -> &mut SignalTracker {
        &mut self.items[self.index[&node]]
    }

    /// Accumulates one second of stopping time on every tracked signal.
    pub fn on_second(&mut self, sim: &Simulation) {
        for t in &mut self.items {
            let stopped: u32 = t.legs.iter().map(|&l| sim.queue_len(l)).sum();
            t.d_open += f64::from(stopped);
        }
    }

    /// Rolls every tracker's action-step accumulators at a boundary.
    pub fn roll_step(&mut self) {
        for t in &mut self.items {
            t.roll_step();
        }
    }

    /// Observation vector for one signal (encoding version 1).
    pub fn build_state(&self, sim: &Simulation, node: NodeId) -> Vec<f64> {
        let t = self.get(node);
        let mut v = Vec::with_capacity(OBS_DIM);
        v.push(if t.stop_norm > 0.0 {
            (t.d_last / t.stop_norm).min(1.0)
        } else {
            0.0
        });
        for &leg in &t.legs {
            v.push(sim.occupancy(leg));
        }
        v.push(f64::from(t.switches()) / 10.0);
        push_one_hot(&mut v, t.last_action);
        for n in t.neighbors {
            let a = n.and_then(|node| self.get(node).last_action);
            push_one_hot(&mut v, a);
        }
        debug_assert_eq!(v.len(), OBS_DIM);
        v
    }
}

fn push_one_hot(v: &mut Vec<f64>, action: Option<usize>) {
    let idx = action.map_or(N_ACTIONS, |a| a.min(N_ACTIONS));
    for k in 0..=N_ACTIONS {
        v.push(if k == idx { 1.0 } else { 0.0 });
    }
}

/// Action-step reward: +-1 on the stopping-time trend, minus one per
/// saturated leg, minus one when the signal switched too often.
pub fn compute_reward(
    d_now: f64,
    d_prev: f64,
    leg_occupancies: &[f64],
    switches: u32,
    crit_occupancy: f64,
    crit_switches: u32,
) -> f64 {
    let trend = if d_now < d_prev { 1.0 } else { -1.0 };
    let saturated = leg_occupancies
        .iter()
        .filter(|&&o| o >= crit_occupancy)
        .count() as f64;
    let churn = if switches > crit_switches { -1.0 } else { 0.0 };
    trend - saturated + churn
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// FIFO ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0);
        ReplayBuffer {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of distinct transitions; the whole buffer (shuffled
    /// draw order) when `n` exceeds the fill.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Vec<&Transition> {
        let fill = self.items.len();
        if fill == 0 {
            return Vec::new();
        }
        if n >= fill {
            return self.items.iter().collect();
        }
        let mut picked: Vec<usize> = Vec::with_capacity(n);
        while picked.len() < n {
            let k = rng.below(fill);
            if !picked.contains(&k) {
                picked.push(k);
            }
        }
        picked.into_iter().map(|k| &self.items[k]).collect()
    }
}

/// Double-Q bootstrap target: the online net picks the next action, the
/// target net prices it. Terminal transitions return the bare reward.
pub fn ddqn_target(
    reward: f64,
    terminal: bool,
    next_state: &[f64],
    online: &Mlp,
    target: &Mlp,
    gamma: f64,
) -> CoreResult<f64> {
    if terminal {
        return Ok(reward);
    }
    let q_online = online.forward(next_state)?;
    let best = argmax(&q_online);
    let q_target = target.forward(next_state)?;
    Ok(reward + gamma * q_target[best])
}

/// Greedy argmax with lowest-index tie-break.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy pick over action values.
pub fn select_action(q: &[f64], epsilon: f64, rng: &mut SimRng) -> usize {
    if epsilon > 0.0 && rng.unit() < epsilon {
        rng.below(q.len())
    } else {
        argmax(q)
    }
}

/// Linear exploration decay from 1 to `floor` over `decay_episodes`,
/// constant afterwards.
pub fn epsilon_schedule(episode: u32, decay_episodes: u32, floor: f64) -> f64 {
    if episode >= decay_episodes {
        floor
    } else {
        1.0 - (1.0 - floor) * f64::from(episode) / f64::from(decay_episodes)
    }
}

/// One cordon signal agent: online and target nets plus its replay ring.
#[derive(Debug, Clone)]
pub struct Agent {
    pub signal: NodeId,
    pub online: Mlp,
    pub target: Mlp,
    pub buffer: ReplayBuffer,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub episodes: u32,
    /// Episodes over which epsilon decays linearly from 1 to the floor.
    pub decay_episodes: u32,
    pub epsilon_floor: f64,
    /// Batch updates run at the end of every episode.
    pub epochs_per_episode: u32,
    /// Target net refresh period, in epochs.
    pub target_refresh: u32,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Hidden layer widths of every agent net.
    pub hidden: Vec<usize>,
    /// Seconds simulated past the demand horizon so terminal states are
    /// meaningful.
    pub clearance_s: u32,
    /// The cordon edge whose signals learn; the rest run fixed plans.
    pub trained_edge: Edge,
    pub green_split: (u32, u32),
    pub seed: u64,
}

impl TrainConfig {
    /// Full-size profile: four hidden layers of 400, 70 episodes, 800
    /// epochs per episode.
    pub fn paper(seed: u64) -> TrainConfig {
        TrainConfig {
            episodes: 70,
            decay_episodes: 50,
            epsilon_floor: 0.02,
            epochs_per_episode: 800,
            target_refresh: 100,
            batch_size: 64,
            buffer_capacity: 50_000,
            gamma: 0.95,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Sgd,
            hidden: alloc::vec![400, 400, 400, 400],
            clearance_s: 1200,
            trained_edge: Edge::North,
            green_split: (30, 30),
            seed,
        }
    }

    /// Desk profile: two hidden layers of 64 and 20 short episodes; the
    /// whole run takes seconds.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            episodes: 20,
            decay_episodes: 14,
            epsilon_floor: 0.02,
            epochs_per_episode: 200,
            target_refresh: 100,
            batch_size: 64,
            buffer_capacity: 50_000,
            gamma: 0.95,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Sgd,
            hidden: alloc::vec![64, 64],
            clearance_s: 600,
            trained_edge: Edge::North,
            green_split: (30, 30),
            seed,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = alloc::vec![OBS_DIM];
        dims.extend_from_slice(&self.hidden);
        dims.push(N_ACTIONS);
        dims
    }
}

/// Per-episode mean reward of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeReward {
    pub episode: u32,
    pub agent: u32,
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Trained signals in edge order with their online nets.
    pub agents: Vec<(NodeId, Mlp)>,
    pub curves: Vec<EpisodeReward>,
    /// (episode, epoch) pairs at which targets were refreshed.
    pub target_refreshes: Vec<(u32, u32)>,
}

/// Offline training: the trained edge's signals act epsilon-greedily on
/// purely local state (no perimeter feedback), all other cordon signals
/// run fixed plans, and each agent replays its own buffer at episode end.
pub fn train(
    net: &Network,
    profile: &DemandProfile,
    cfg: &TrainConfig,
) -> CoreResult<TrainOutput> {
    let trained: Vec<NodeId> = net.edge_signals(cfg.trained_edge);
    if trained.is_empty() {
        return Err(CoreError::Control(format!(
            "no cordon signals on edge {:?}",
            cfg.trained_edge
        )));
    }
    let dims = cfg.dims();
    let mut agents: Vec<Agent> = trained
        .iter()
        .enumerate()
        .map(|(i, &signal)| Agent {
            signal,
            online: Mlp::init(&dims, cfg.seed, i as u32),
            target: Mlp::init(&dims, cfg.seed, i as u32),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
        })
        .collect();
    let mut opts: Vec<OptimizerState> = agents
        .iter()
        .map(|_| OptimizerState::new(cfg.optimizer, cfg.learning_rate))
        .collect();
    let mut replay_rngs: Vec<SimRng> = (0..agents.len())
        .map(|i| SimRng::new(cfg.seed, Stream::Replay(i as u32)))
        .collect();
    let mut curves = Vec::new();
    let mut target_refreshes = Vec::new();

    for episode in 0..cfg.episodes {
        let epsilon = epsilon_schedule(episode, cfg.decay_episodes, cfg.epsilon_floor);
        let episode_seed = cfg.seed.wrapping_add(u64::from(episode));
        let schedule = profile.resolve(net, episode_seed)?;
        let trips = generate_demand(net, &schedule, episode_seed)?;
        let horizon = schedule.horizon_s + cfg.clearance_s;
        debug_assert_eq!(horizon % ACTION_STEP_S, 0);

        let mut sim = Simulation::new(
            net,
            trips,
            SimConfig {
                green_split: cfg.green_split,
                ..SimConfig::default()
            },
        );
        let mut trackers = CordonTrackers::new(net);
        let mut rngs: Vec<SimRng> = (0..agents.len())
            .map(|i| {
                SimRng::new(
                    cfg.seed,
                    Stream::Exploration {
                        agent: i as u32,
                        episode,
                    },
                )
            })
            .collect();
        let mut pending_steps: Vec<Option<(Vec<f64>, usize)>> =
            alloc::vec![None; agents.len()];
        let mut reward_sums = alloc::vec![0.0; agents.len()];
        let mut reward_counts = alloc::vec![0u32; agents.len()];

        for t in 0..=horizon {
            if t % ACTION_STEP_S == 0 {
                trackers.roll_step();
                let terminal = t == horizon;
                // Rewards and next states for the previous step's actions,
                // computed before anything new is committed.
                for (i, agent) in agents.iter_mut().enumerate() {
                    if let Some((state, action)) = pending_steps[i].take() {
                        let tr = trackers.get(agent.signal);
                        let occs: Vec<f64> =
                            tr.legs.iter().map(|&l| sim.occupancy(l)).collect();
                        let reward = compute_reward(
                            tr.d_last,
                            tr.d_before,
                            &occs,
                            tr.switches(),
                            CRIT_OCCUPANCY,
                            CRIT_SWITCHES,
                        );
                        reward_sums[i] += reward;
                        reward_counts[i] += 1;
                        let next_state = trackers.build_state(&sim, agent.signal);
                        agent.buffer.push(Transition {
                            state,
                            action,
                            reward,
                            next_state,
                            terminal,
                        });
                    }
                }
                if terminal {
                    break;
                }
                // New actions: observations for all agents first, then
                // commits, so neighbor features are order-independent.
                let states: Vec<Vec<f64>> = agents
                    .iter()
                    .map(|a| trackers.build_state(&sim, a.signal))
                    .collect();
                for (i, agent) in agents.iter().enumerate() {
                    let q = agent.online.forward(&states[i])?;
                    let action = select_action(&q, epsilon, &mut rngs[i]);
                    sim.apply_control(agent.signal, action)?;
                    trackers.get_mut(agent.signal).commit(action);
                    pending_steps[i] = Some((states[i].clone(), action));
                }
                // Fixed plans everywhere else on the cordon.
                let fixed = control::fixed_plan(t, cfg.green_split.0, cfg.green_split.1);
                for &node in &trackers.order.clone() {
                    if agents.iter().any(|a| a.signal == node) {
                        continue;
                    }
                    sim.apply_control(node, fixed)?;
                    trackers.get_mut(node).commit(fixed);
                }
            }
            sim.step();
            trackers.on_second(&sim);
        }

        // Episode-end replay.
        for epoch in 0..cfg.epochs_per_episode {
            for (i, agent) in agents.iter_mut().enumerate() {
                if agent.buffer.is_empty() {
                    continue;
                }
                let sample = agent.buffer.sample(cfg.batch_size, &mut replay_rngs[i]);
                let mut batch = Vec::with_capacity(sample.len());
                for tr in sample {
                    let target = ddqn_target(
                        tr.reward,
                        tr.terminal,
                        &tr.next_state,
                        &agent.online,
                        &agent.target,
                        cfg.gamma,
                    )?;
                    batch.push(TrainSample {
                        state: tr.state.clone(),
                        action: tr.action,
                        target,
                    });
                }
                let loss = train_batch(&mut agent.online, &mut opts[i], &batch)?;
                if !loss.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "loss diverged: episode {episode}, epoch {epoch}, agent {i}"
                    )));
                }
                if (epoch + 1) % cfg.target_refresh == 0 {
                    agent.target.copy_from(&agent.online)?;
                }
            }
            if (epoch + 1) % cfg.target_refresh == 0 {
                target_refreshes.push((episode, epoch + 1));
            }
        }

        for i in 0..agents.len() {
            curves.push(EpisodeReward {
                episode,
                agent: i as u32,
                mean_reward: if reward_counts[i] == 0 {
                    0.0
                } else {
                    reward_sums[i] / f64::from(reward_counts[i])
                },
            });
        }
    }

    Ok(TrainOutput {
        agents: agents.into_iter().map(|a| (a.signal, a.online)).collect(),
        curves,
        target_refreshes,
    })
}

/// Assigns donor nets to every cordon signal by relative edge position.
/// Returns (signal, donor index) pairs covering the whole cordon.
pub fn transfer(
    donors: &[Mlp],
    net: &Network,
    expected_dims: &[usize],
) -> CoreResult<Vec<(NodeId, usize)>> {
    if donors.is_empty() {
        return Err(CoreError::Control(String::from("no donor agents")));
    }
    for d in donors {
        if d.dims != expected_dims {
            return Err(CoreError::DimMismatch {
                expected: expected_dims.len(),
                got: d.dims.len(),
            });
        }
        if d.input_dim() != OBS_DIM || d.output_dim() != N_ACTIONS {
            return Err(CoreError::DimMismatch {
                expected: OBS_DIM,
                got: d.input_dim(),
            });
        }
    }
    let n = donors.len();
    let mut assignment = Vec::new();
    for edge in [Edge::North, Edge::East, Edge::South, Edge::West] {
        let signals = net.edge_signals(edge);
        let m = signals.len();
        for (j, &signal) in signals.iter().enumerate() {
            let donor = if m <= 1 {
                (n - 1) / 2
            } else {
                // Same relative position on the edge as on the donor edge.
                ((j as f64) * (n - 1) as f64 / (m - 1) as f64 + 0.5) as usize
            };
            assignment.push((signal, donor.min(n - 1)));
        }
    }
    Ok(assignment)
}
