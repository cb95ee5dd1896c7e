//! KPI accounting: interval travel time and distance inside the protected
//! network (the MFD points), entire-network travel time, cordon queue
//! integration, per-gate delays, link-count dispersion, and the linear
//! emission proxy.
//!
//! The accumulator consumes the per-second aggregates the simulation
//! emits plus a per-PN-link count sample at every interval boundary. It
//! keeps the raw second samples, so every exported series is a pure
//! function of the log and can be recomputed after the fact.
//!
//! Waiting departures that have not found insertion room yet count toward
//! entire-network travel time and toward their gate's queue, but not
//! toward occupancy, distance, or the emission proxy.

use alloc::vec::Vec;

use crate::sim::SecondStats;

/// Emission proxy: grams per meter moved plus grams per queued second.
/// A declared linear stand-in, not a tailpipe model.
#[derive(Debug, Clone, Copy)]
pub struct EmissionCoeffs {
    pub alpha_g_per_m: f64,
    pub beta_g_per_s: f64,
}

impl Default for EmissionCoeffs {
    fn default() -> Self {
        EmissionCoeffs {
            alpha_g_per_m: 0.16,
            beta_g_per_s: 1.2,
        }
    }
}

/// One closed measurement interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    pub start_s: u32,
    /// Vehicle-seconds accrued on PN links.
    pub pn_ttt: f64,
    /// Vehicle-meters covered on PN links; queued vehicles contribute 0.
    pub pn_ttd: f64,
    /// Vehicle-seconds anywhere, waiting departures included.
    pub en_ttt: f64,
    /// Mean queue per gate over the interval, network gate order.
    pub per_gate_queue: Vec<f64>,
    /// Mean gate-exit delay over the interval, per gate; NaN when no
    /// vehicle left the gate.
    pub per_gate_delay: Vec<f64>,
    /// Per-PN-link vehicle counts sampled at the interval end.
    pub per_link_count: Vec<u32>,
    /// Population standard deviation of `per_link_count`.
    pub link_count_stddev: f64,
    /// Proxy grams emitted during the interval.
    pub emission_g: f64,
}

/// Compact copy of one second's aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondSample {
    pub t: u32,
    pub pn_count: u32,
    pub en_count: u32,
    pub queued: u32,
    pub pn_dist_m: f64,
    pub all_dist_m: f64,
    pub per_gate_queue: Vec<u32>,
    /// Gate exits this second as (gate order index, entry_s, exit_s).
    pub gate_exits: Vec<(u32, u32, u32)>,
}

/// Whole-run totals in the units of the comparison tables.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Totals {
    pub pn_ttt_veh_s: f64,
    pub pn_ttd_veh_m: f64,
    pub en_ttt_veh_s: f64,
    pub cordon_queue_veh_s: f64,
    pub emission_g: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub interval_s: u32,
    pub coeffs: EmissionCoeffs,
    /// Free-flow seconds per gate, for delay computation.
    gate_ff_s: Vec<f64>,
    pub intervals: Vec<IntervalRecord>,
    pub seconds: Vec<SecondSample>,
    pub totals: Totals,
    /// Cumulative cordon queue per gate, veh·s.
    pub per_gate_queue_veh_s: Vec<f64>,
    // Open-interval accumulators.
    acc_start: u32,
    acc_pn_ttt: f64,
    acc_pn_ttd: f64,
    acc_en_ttt: f64,
    acc_gate_queue: Vec<f64>,
    acc_delay_sum: Vec<f64>,
    acc_delay_n: Vec<u32>,
    acc_emission: f64,
}

impl MetricsLog {
    pub fn new(interval_s: u32, gate_ff_s: Vec<f64>, coeffs: EmissionCoeffs) -> MetricsLog {
        let n = gate_ff_s.len();
        MetricsLog {
            interval_s,
            coeffs,
            gate_ff_s,
            intervals: Vec::new(),
            seconds: Vec::new(),
            totals: Totals::default(),
            per_gate_queue_veh_s: alloc::vec![0.0; n],
            acc_start: 0,
            acc_pn_ttt: 0.0,
            acc_pn_ttd: 0.0,
            acc_en_ttt: 0.0,
            acc_gate_queue: alloc::vec![0.0; n],
            acc_delay_sum: alloc::vec![0.0; n],
            acc_delay_n: alloc::vec![0; n],
            acc_emission: 0.0,
        }
    }

    pub fn gate_count(&self) -> usize {
        self.gate_ff_s.len()
    }

    /// Folds one second of simulation output into the open interval.
    pub fn on_second(&mut self, t: u32, stats: &SecondStats, gate_index: impl Fn(u32) -> usize) {
        let en = f64::from(stats.on_net_count + stats.pending_count);
        let pn = f64::from(stats.pn_count);
        self.acc_pn_ttt += pn;
        self.acc_pn_ttd += stats.pn_dist_m;
        self.acc_en_ttt += en;
        let emission = self.coeffs.alpha_g_per_m * stats.all_dist_m
            + self.coeffs.beta_g_per_s * f64::from(stats.queued_on_net);
        self.acc_emission += emission;
        for (g, &q) in stats.per_gate_queue.iter().enumerate() {
            self.acc_gate_queue[g] += f64::from(q);
            self.per_gate_queue_veh_s[g] += f64::from(q);
        }
        let mut exits = Vec::with_capacity(stats.gate_exits.len());
        for &(gate, entry, exit) in &stats.gate_exits {
            let g = gate_index(gate.0);
            let delay = f64::from(exit - entry) - self.gate_ff_s[g];
            self.acc_delay_sum[g] += delay;
            self.acc_delay_n[g] += 1;
            exits.push((g as u32, entry, exit));
        }
        self.totals.pn_ttt_veh_s += pn;
        self.totals.pn_ttd_veh_m += stats.pn_dist_m;
        self.totals.en_ttt_veh_s += en;
        self.totals.cordon_queue_veh_s += stats
            .per_gate_queue
            .iter()
            .map(|&q| f64::from(q))
            .sum::<f64>();
        self.totals.emission_g += emission;
        self.seconds.push(SecondSample {
            t,
            pn_count: stats.pn_count,
            en_count: stats.on_net_count + stats.pending_count,
            queued: stats.queued_on_net,
            pn_dist_m: stats.pn_dist_m,
            all_dist_m: stats.all_dist_m,
            per_gate_queue: stats.per_gate_queue.clone(),
            gate_exits: exits,
        });
    }

    /// Closes the open interval with the end-of-interval per-PN-link
    /// counts.
    pub fn close_interval(&mut self, per_link_count: Vec<u32>) {
        let span = f64::from(self.interval_s);
        let n = self.gate_count();
        let per_gate_queue = self.acc_gate_queue.iter().map(|&q| q / span).collect();
        let per_gate_delay = (0..n)
            .map(|g| {
                if self.acc_delay_n[g] == 0 {
                    f64::NAN
                } else {
                    self.acc_delay_sum[g] / f64::from(self.acc_delay_n[g])
                }
            })
            .collect();
        let link_count_stddev = population_stddev(&per_link_count);
        self.intervals.push(IntervalRecord {
            start_s: self.acc_start,
            pn_ttt: self.acc_pn_ttt,
            pn_ttd: self.acc_pn_ttd,
            en_ttt: self.acc_en_ttt,
            per_gate_queue,
            per_gate_delay,
            per_link_count,
            link_count_stddev,
            emission_g: self.acc_emission,
        });
        self.acc_start += self.interval_s;
        self.acc_pn_ttt = 0.0;
        self.acc_pn_ttd = 0.0;
        self.acc_en_ttt = 0.0;
        self.acc_gate_queue = alloc::vec![0.0; n];
        self.acc_delay_sum = alloc::vec![0.0; n];
        self.acc_delay_n = alloc::vec![0; n];
        self.acc_emission = 0.0;
    }

    /// PN-TTT of the most recently closed interval, the measurement the
    /// feedback strategies consume.
    pub fn last_interval_pn_ttt(&self) -> f64 {
        self.intervals.last().map_or(0.0, |r| r.pn_ttt)
    }

    /// Re-integrates the cordon queue from the stored second samples;
    /// must reproduce the running totals exactly.
    pub fn reintegrate_cordon_queue(&self) -> f64 {
        let mut total = 0.0;
        for s in &self.seconds {
            total += s.per_gate_queue.iter().map(|&q| f64::from(q)).sum::<f64>();
        }
        total
    }
}

/// Population standard deviation.
pub fn population_stddev(counts: &[u32]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| f64::from(c)).sum::<f64>() / n;
    let var = counts
        .iter()
        .map(|&c| {
            let d = f64::from(c) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    libm::sqrt(var)
}

/// Travel-production plateau over MFD points, for critical-TTT
/// calibration: bins interval TTT, averages TTD per bin, and reports the
/// TTT range whose mean TTD stays within `plateau_frac` of the peak.
#[derive(Debug, Clone, PartialEq)]
pub struct TtdPlateau {
    pub lo: f64,
    pub hi: f64,
    pub midpoint: f64,
    /// (bin center, mean ttd, samples) for every populated bin.
    pub bins: Vec<(f64, f64, u32)>,
}

pub fn ttd_plateau(points: &[(f64, f64)], bin_width: f64, plateau_frac: f64) -> Option<TtdPlateau> {
    if points.is_empty() || bin_width <= 0.0 {
        return None;
    }
    let max_ttt = points.iter().fold(0.0f64, |m, &(t, _)| m.max(t));
    let n_bins = (max_ttt / bin_width) as usize + 1;
    let mut sum = alloc::vec![0.0f64; n_bins];
    let mut cnt = alloc::vec![0u32; n_bins];
    for &(ttt, ttd) in points {
        let b = ((ttt / bin_width) as usize).min(n_bins - 1);
        sum[b] += ttd;
        cnt[b] += 1;
    }
    let bins: Vec<(f64, f64, u32)> = (0..n_bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| ((b as f64 + 0.5) * bin_width, sum[b] / f64::from(cnt[b]), cnt[b]))
        .collect();
    let peak = bins.iter().fold(0.0f64, |m, &(_, ttd, _)| m.max(ttd));
    if peak <= 0.0 {
        return None;
    }
    let qualifying: Vec<f64> = bins
        .iter()
        .filter(|&&(_, ttd, _)| ttd >= plateau_frac * peak)
        .map(|&(c, _, _)| c)
        .collect();
    let lo = qualifying.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = qualifying.iter().copied().fold(0.0f64, f64::max);
    Some(TtdPlateau {
        lo,
        hi,
        midpoint: (lo + hi) / 2.0,
        bins,
    })
}
