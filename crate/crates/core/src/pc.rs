//! Test-time fusion of local agent values with the global perimeter
//! feedback.
//!
//! When the protected network's measured travel time exceeds the critical
//! value, every non-gating action of a cordon signal is penalized by the
//! occupancy it would admit into or hold back from leaving the PN, scaled
//! by the feedback factor. The gating action's value is never touched, so
//! the agent's learned policy stays intact and takes over again the
//! moment the network recovers.
//!
//! Per action `a` of one signal, with factor `f`:
//!
//! ```text
//! q'(a) = q(a) - f * ( sum of occupancies over outflow movements NOT
//!                      green in a
//!                    + sum over inflow movements green in a )     a != gating
//! q'(gating) = q(gating)
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::marl::argmax;
use crate::net::{MovementId, Network, NodeId};

/// Global feedback snapshot handed to every cordon signal.
#[derive(Debug, Clone, Copy)]
pub struct PcFeedback {
    pub ttt_now: f64,
    pub ttt_crit: f64,
    /// Weight parameter trading local value against the feedback, > 0.
    pub k_s: f64,
}

/// Nonnegative pressure of the feedback: zero at or below the critical
/// TTT, growing linearly above it.
pub fn penalty_factor(fb: &PcFeedback) -> CoreResult<f64> {
    if fb.k_s.is_nan() || fb.k_s <= 0.0 {
        return Err(CoreError::Control(String::from(
            "feedback weight k_s must be positive",
        )));
    }
    Ok(((fb.ttt_now - fb.ttt_crit) / fb.k_s).max(0.0))
}

/// Movement sets each action's penalty sums over, fixed per signal.
#[derive(Debug, Clone)]
pub struct PenaltySets {
    pub node: NodeId,
    pub gating_action: usize,
    /// Per action: (outflow movements not green, inflow movements green).
    pub per_action: Vec<(Vec<MovementId>, Vec<MovementId>)>,
}

pub fn penalty_sets(net: &Network, node: NodeId) -> CoreResult<PenaltySets> {
    let inter = net.intersection(node);
    let gating_action = inter.gating_phase().ok_or_else(|| {
        CoreError::Domain(alloc::format!("node {} has no gating phase", node.0))
    })?;
    let per_action = (0..inter.phases.len())
        .map(|p| {
            let o = net.phase_overlap(node, p)?;
            Ok((o.out_complement, o.in_overlap))
        })
        .collect::<CoreResult<_>>()?;
    Ok(PenaltySets {
        node,
        gating_action,
        per_action,
    })
}

/// Applies the feedback penalty to a signal's action values. Returns the
/// modified values and the penalty charged per action.
pub fn modify_q(
    q: &[f64],
    sets: &PenaltySets,
    occupancy_of: impl Fn(MovementId) -> f64,
    factor: f64,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(factor >= 0.0);
    debug_assert_eq!(q.len(), sets.per_action.len());
    let mut modified = Vec::with_capacity(q.len());
    let mut penalties = Vec::with_capacity(q.len());
    for (a, value) in q.iter().enumerate() {
        let penalty = if a == sets.gating_action {
            0.0
        } else {
            let (held_outflow, admitted_inflow) = &sets.per_action[a];
            let occ: f64 = held_outflow
                .iter()
                .chain(admitted_inflow.iter())
                .map(|&m| occupancy_of(m))
                .sum();
            occ * factor
        };
        penalties.push(penalty);
        modified.push(value - penalty);
    }
    (modified, penalties)
}

/// One logged decision of [`decide`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub q: Vec<f64>,
    pub penalty: Vec<f64>,
    pub factor: f64,
    pub action: usize,
}

/// Greedy action over the feedback-modified values; the net itself is
/// only evaluated, never altered.
pub fn decide(
    q: Vec<f64>,
    sets: &PenaltySets,
    occupancy_of: impl Fn(MovementId) -> f64,
    factor: f64,
) -> Decision {
    let (modified, penalty) = modify_q(&q, sets, occupancy_of, factor);
    let action = argmax(&modified);
    Decision {
        q,
        penalty,
        factor,
        action,
    }
}
