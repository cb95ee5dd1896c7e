//! Benchmark perimeter strategies: fixed timetables, threshold feedback,
//! PI metering with uniform distribution, and queue-balancing inflow
//! distribution.
//!
//! Everything here is a pure function or a small state struct; wiring a
//! strategy to signals happens in [`crate::runner`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::sim::INTERLOCK_S;

/// Commanded phase of a two-phase fixed timetable at second `t`.
/// The cycle is g1 + interlock + g2 + interlock; the command switches at
/// the instant the previous green ends, so the interlock machinery
/// reproduces the timetable exactly.
pub fn fixed_plan(t: u32, g1: u32, g2: u32) -> usize {
    let cycle = g1 + g2 + 2 * INTERLOCK_S;
    let tau = t % cycle;
    if tau < g1 || tau >= g1 + INTERLOCK_S + g2 {
        0
    } else {
        1
    }
}

/// Green phase of the same timetable, `None` during interlocks.
pub fn fixed_green(t: u32, g1: u32, g2: u32) -> Option<usize> {
    let cycle = g1 + g2 + 2 * INTERLOCK_S;
    let tau = t % cycle;
    if tau < g1 {
        Some(0)
    } else if tau < g1 + INTERLOCK_S {
        None
    } else if tau < g1 + INTERLOCK_S + g2 {
        Some(1)
    } else {
        None
    }
}

/// Proportional-integral total-inflow controller state.
#[derive(Debug, Clone)]
pub struct PiState {
    pub k_p: f64,
    pub k_i: f64,
    pub ttt_crit: f64,
    /// Previous inflow command, veh/h.
    pub inflow_prev: f64,
    pub ttt_prev: f64,
    /// Clamp ceiling: the cordon's total saturation capacity, veh/h.
    pub inflow_max: f64,
}

impl PiState {
    pub fn new(k_p: f64, k_i: f64, ttt_crit: f64, inflow_max: f64) -> PiState {
        PiState {
            k_p,
            k_i,
            ttt_crit,
            inflow_prev: inflow_max,
            ttt_prev: 0.0,
            inflow_max,
        }
    }

    /// One control-period update of the total inflow limit:
    /// previous command, minus the proportional term on the TTT change,
    /// plus the integral term on the distance to the setpoint. Clamped to
    /// [0, inflow_max].
    pub fn pi_update(&mut self, ttt_now: f64) -> f64 {
        let raw = self.inflow_prev - self.k_p * (ttt_now - self.ttt_prev)
            + self.k_i * (self.ttt_crit - ttt_now);
        let clamped = raw.clamp(0.0, self.inflow_max);
        self.inflow_prev = clamped;
        self.ttt_prev = ttt_now;
        clamped
    }
}

/// Fractional budget carry-over so metering conserves the commanded
/// inflow exactly over any horizon.
#[derive(Debug, Clone)]
pub struct BudgetCarry {
    carry: Vec<f64>,
}

impl BudgetCarry {
    pub fn new(n_gates: usize) -> BudgetCarry {
        BudgetCarry {
            carry: alloc::vec![0.0; n_gates],
        }
    }
}

/// Splits a total inflow limit evenly over the gates for one control
/// period, in whole vehicles; fractional remainders roll into the next
/// period through `carry`.
pub fn uniform_metering(
    inflow_veh_h: f64,
    n_gates: usize,
    period_s: u32,
    carry: &mut BudgetCarry,
) -> CoreResult<Vec<u32>> {
    if n_gates == 0 {
        return Err(CoreError::Control(String::from("no gates to meter")));
    }
    debug_assert_eq!(carry.carry.len(), n_gates);
    let share = inflow_veh_h * f64::from(period_s) / 3600.0 / n_gates as f64;
    let budgets = carry
        .carry
        .iter_mut()
        .map(|c| {
            *c += share;
            let whole = *c as u32;
            *c -= f64::from(whole);
            whole
        })
        .collect();
    Ok(budgets)
}

/// Integer inflow distribution that minimizes the sum of squared relative
/// queue lengths left on the gates.
///
/// Minimizes sum_i ((w_i - x_i) / c_i)^2 subject to
/// sum x_i = min(total, sum min(w_i, cap_i)) and 0 <= x_i <= min(w_i, cap_i),
/// where w = queues and c = gate storage capacities. Solved exactly by
/// greedy marginal allocation (the objective is separable and convex);
/// marginals are compared in integer arithmetic so ties are exact, broken
/// toward the lower gate index.
pub fn cordon_queue_distribution(
    total: u32,
    queues: &[u32],
    caps: &[u32],
    storages: &[u32],
) -> Vec<u32> {
    let n = queues.len();
    debug_assert_eq!(caps.len(), n);
    debug_assert_eq!(storages.len(), n);
    let upper: Vec<u32> = (0..n).map(|i| queues[i].min(caps[i])).collect();
    let mut budget: u64 = u64::from(total).min(upper.iter().map(|&u| u64::from(u)).sum());
    let mut x = alloc::vec![0u32; n];
    while budget > 0 {
        // marginal_i = (1 - 2(w_i - x_i)) / c_i^2; pick the most negative.
        let mut best: Option<(i128, u64, usize)> = None;
        for i in 0..n {
            if x[i] >= upper[i] {
                continue;
            }
            let residual = i128::from(queues[i]) - i128::from(x[i]);
            let num = 1 - 2 * residual;
            let den = u64::from(storages[i].max(1)).pow(2);
            // Compare num_i/den_i < num_j/den_j via cross multiplication.
            let replace = match best {
                None => true,
                Some((bnum, bden, _)) => num * i128::from(bden) < bnum * i128::from(den),
            };
            if replace {
                best = Some((num, den, i));
            }
        }
        match best {
            Some((_, _, i)) => x[i] += 1,
            None => break,
        }
        budget -= 1;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateCommand {
    CloseAll,
    OpenAll,
}

/// Memoryless threshold feedback: close every gate for the next action
/// step exactly when the measured TTT exceeds the critical TTT.
pub fn feedback_gate(ttt_now: f64, ttt_crit: f64) -> GateCommand {
    if ttt_now > ttt_crit {
        GateCommand::CloseAll
    } else {
        GateCommand::OpenAll
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_plan_timetable() {
        assert_eq!(fixed_plan(10, 30, 30), 0);
        assert_eq!(fixed_plan(40, 30, 30), 1);
        assert_eq!(fixed_green(10, 30, 30), Some(0));
        assert_eq!(fixed_green(32, 30, 30), None);
        assert_eq!(fixed_green(40, 30, 30), Some(1));
        assert_eq!(fixed_green(67, 30, 30), None);
        // Period = greens + two interlocks.
        let cycle = 30 + 30 + 2 * INTERLOCK_S;
        for t in 0..cycle {
            assert_eq!(fixed_green(t, 30, 30), fixed_green(t + cycle, 30, 30));
            assert_eq!(fixed_plan(t, 30, 30), fixed_plan(t + cycle, 30, 30));
        }
        // Each phase gets exactly its split of green per cycle.
        let g0 = (0..cycle).filter(|&t| fixed_green(t, 30, 30) == Some(0)).count();
        let g1 = (0..cycle).filter(|&t| fixed_green(t, 30, 30) == Some(1)).count();
        assert_eq!((g0, g1), (30, 30));
    }

    #[test]
    fn pi_update_clamps_at_zero() {
        let mut pi = PiState::new(2.0, 0.5, 17000.0, 40000.0);
        pi.inflow_prev = 2000.0;
        pi.ttt_prev = 17000.0;
        // 2000 - 2*1000 + 0.5*(-1000) = -500 -> clamped to 0.
        assert_eq!(pi.pi_update(18000.0), 0.0);
        assert_eq!(pi.inflow_prev, 0.0);
        assert_eq!(pi.ttt_prev, 18000.0);
    }

    #[test]
    fn pi_update_fixed_point_at_setpoint() {
        let mut pi = PiState::new(2.0, 0.5, 17000.0, 40000.0);
        pi.inflow_prev = 3000.0;
        pi.ttt_prev = 17000.0;
        assert_eq!(pi.pi_update(17000.0), 3000.0);
        assert_eq!(pi.pi_update(17000.0), 3000.0);
    }

    #[test]
    fn pi_update_increases_when_underloaded() {
        let mut pi = PiState::new(2.0, 0.5, 17000.0, 40000.0);
        pi.inflow_prev = 3000.0;
        pi.ttt_prev = 16500.0;
        let out = pi.pi_update(16000.0);
        assert!(out > 3000.0);
    }

    #[test]
    fn pi_update_never_negative() {
        let mut pi = PiState::new(2.0, 0.5, 1000.0, 5000.0);
        pi.inflow_prev = 0.0;
        pi.ttt_prev = 0.0;
        for ttt in [5000.0, 9000.0, 20000.0, 100.0, 50000.0] {
            let q = pi.pi_update(ttt);
            assert!((0.0..=5000.0).contains(&q));
        }
    }

    #[test]
    fn uniform_metering_even_split() {
        let mut carry = BudgetCarry::new(20);
        let budgets = uniform_metering(7200.0, 20, 60, &mut carry).unwrap();
        assert!(budgets.iter().all(|&b| b == 6));
    }

    #[test]
    fn uniform_metering_zero() {
        let mut carry = BudgetCarry::new(4);
        let budgets = uniform_metering(0.0, 4, 60, &mut carry).unwrap();
        assert!(budgets.iter().all(|&b| b == 0));
    }

    #[test]
    fn uniform_metering_conserves_total_over_horizon() {
        // Divisible case: exact equality.
        let mut carry = BudgetCarry::new(20);
        let mut total = 0u32;
        for _ in 0..10 {
            total += uniform_metering(7200.0, 20, 60, &mut carry)
                .unwrap()
                .iter()
                .sum::<u32>();
        }
        assert_eq!(total, 7200 * 600 / 3600);
        // Non-divisible: per-gate drift below one vehicle.
        let mut carry = BudgetCarry::new(7);
        let mut per_gate = alloc::vec![0u64; 7];
        for _ in 0..50 {
            for (g, b) in uniform_metering(1234.0, 7, 60, &mut carry)
                .unwrap()
                .iter()
                .enumerate()
            {
                per_gate[g] += u64::from(*b);
            }
        }
        let exact = 1234.0 * 60.0 * 50.0 / 3600.0 / 7.0;
        for &g in &per_gate {
            assert!((g as f64 - exact).abs() < 1.0);
        }
    }

    #[test]
    fn uniform_metering_rejects_empty_gate_list() {
        let mut carry = BudgetCarry::new(0);
        assert!(uniform_metering(100.0, 0, 60, &mut carry).is_err());
    }

    #[test]
    fn distribution_favors_the_longer_relative_queue() {
        // Unconstrained optimum (50, -10) projects onto (40, 0).
        let x = cordon_queue_distribution(40, &[80, 20], &[100, 100], &[100, 100]);
        assert_eq!(x, alloc::vec![40, 0]);
    }

    #[test]
    fn distribution_splits_symmetric_instances_evenly() {
        let x = cordon_queue_distribution(30, &[50, 50, 50], &[60, 60, 60], &[80, 80, 80]);
        assert_eq!(x, alloc::vec![10, 10, 10]);
    }

    #[test]
    fn distribution_truncates_infeasible_totals() {
        let x = cordon_queue_distribution(100, &[3, 2], &[50, 1], &[10, 10]);
        assert_eq!(x.iter().sum::<u32>(), 3 + 1);
        assert!(x[0] <= 3 && x[1] <= 1);
    }

    /// Exhaustive check against enumeration on small instances. Objectives
    /// are compared exactly in scaled integer arithmetic.
    #[test]
    fn distribution_matches_brute_force() {
        use crate::rng::{SimRng, Stream};

        fn exact_objective(queues: &[u32], storages: &[u32], x: &[u32]) -> u128 {
            // sum ((w-x)/c)^2 scaled by prod c^2.
            let prod: u128 = storages.iter().map(|&c| u128::from(c) * u128::from(c)).product();
            let mut obj = 0u128;
            for i in 0..x.len() {
                let r = u128::from(queues[i] - x[i]);
                let c2 = u128::from(storages[i]) * u128::from(storages[i]);
                obj += r * r * (prod / c2);
            }
            obj
        }

        fn brute(
            queues: &[u32],
            caps: &[u32],
            storages: &[u32],
            total: u32,
        ) -> Vec<u32> {
            let n = queues.len();
            let upper: Vec<u32> = (0..n).map(|i| queues[i].min(caps[i])).collect();
            let target: u64 =
                u64::from(total).min(upper.iter().map(|&u| u64::from(u)).sum());
            let mut best: Option<(u128, Vec<u32>)> = None;
            let mut x = alloc::vec![0u32; n];
            fn rec(
                i: usize,
                left: u64,
                x: &mut Vec<u32>,
                upper: &[u32],
                queues: &[u32],
                storages: &[u32],
                best: &mut Option<(u128, Vec<u32>)>,
            ) {
                if i == x.len() {
                    if left != 0 {
                        return;
                    }
                    let obj = exact_objective(queues, storages, x);
                    let replace = match best {
                        None => true,
                        // Tie: keep the lexicographically largest, which
                        // is what index-ordered greedy produces.
                        Some((bo, bx)) => obj < *bo || (obj == *bo && x > bx),
                    };
                    if replace {
                        *best = Some((obj, x.clone()));
                    }
                    return;
                }
                let hi = u64::from(upper[i]).min(left);
                for v in 0..=hi {
                    x[i] = v as u32;
                    rec(i + 1, left - v, x, upper, queues, storages, best);
                }
                x[i] = 0;
            }
            rec(0, target, &mut x, &upper, queues, storages, &mut best);
            best.map(|(_, x)| x).unwrap_or(alloc::vec![0; n])
        }

        let mut rng = SimRng::new(0xC0DE, Stream::Generic(11));
        for case in 0..120 {
            let n = 2 + rng.below(3); // 2..=4 gates
            let queues: Vec<u32> = (0..n).map(|_| rng.below(25) as u32).collect();
            let caps: Vec<u32> = (0..n).map(|_| rng.below(20) as u32).collect();
            let storages: Vec<u32> = (0..n).map(|_| 1 + rng.below(120) as u32).collect();
            let total = rng.below(31) as u32;
            let got = cordon_queue_distribution(total, &queues, &caps, &storages);
            let want = brute(&queues, &caps, &storages, total);
            assert_eq!(got, want, "case {case}: q={queues:?} caps={caps:?} c={storages:?} total={total}");
        }
    }

    #[test]
    fn feedback_gate_threshold_is_strict() {
        assert_eq!(feedback_gate(17500.0, 17000.0), GateCommand::CloseAll);
        assert_eq!(feedback_gate(16000.0, 17000.0), GateCommand::OpenAll);
        assert_eq!(feedback_gate(17000.0, 17000.0), GateCommand::OpenAll);
    }
}
