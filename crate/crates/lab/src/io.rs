//! File formats of the lab: line-oriented CSVs with schema-version
//! comment headers, the binary weight files, trip tables, manifests, and
//! the raw event log a run can be replayed from.
//!
//! Every writer formats numbers with Rust's shortest round-trip float
//! notation, so identical runs produce byte-identical files and the event
//! log reloads losslessly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cordon_core::demand::Trip;
use cordon_core::metrics::{EmissionCoeffs, MetricsLog};
use cordon_core::net::{LinkId, Network};
use cordon_core::nn::Mlp;
use cordon_core::runner::RunOutput;
use cordon_core::sim::SecondStats;

use crate::config::{Config, LabError};

pub const SCHEMA: u32 = 1;

pub fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Data lines of a schema'd CSV: comments and blanks skipped.
fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

// ---------------------------------------------------------------- trips

pub fn trips_csv(trips: &[Trip]) -> String {
    let mut s = format!("# trips schema v{SCHEMA}\ndepart_s,origin_link,destination_link\n");
    for t in trips {
        s.push_str(&format!("{},{},{}\n", t.depart_s, t.origin.0, t.destination.0));
    }
    s
}

pub fn read_trips(path: &Path) -> Result<Vec<Trip>> {
    let text = read(path)?;
    let mut trips = Vec::new();
    for line in data_lines(&text).skip(1) {
        let mut f = line.split(',');
        let (a, b, c) = (f.next(), f.next(), f.next());
        let (Some(a), Some(b), Some(c)) = (a, b, c) else {
            bail!(LabError::Runtime(format!("bad trip row: {line}")));
        };
        trips.push(Trip {
            depart_s: a.parse()?,
            origin: LinkId(b.parse()?),
            destination: LinkId(c.parse()?),
        });
    }
    Ok(trips)
}

// -------------------------------------------------------------- weights

/// Writes donor nets as donor_00.mlpw, donor_01.mlpw, ... in edge order.
pub fn save_donors(dir: &Path, donors: &[(u32, Mlp)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (signal, mlp)) in donors.iter().enumerate() {
        let path = dir.join(format!("donor_{i:02}_signal{signal}.mlpw"));
        fs::write(&path, mlp.to_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Loads donor nets back in index order.
pub fn load_donors(dir: &Path) -> Result<Vec<Mlp>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading weights dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mlpw"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(LabError::Runtime(format!(
            "no .mlpw files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            Mlp::from_bytes(&bytes)
                .map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
        })
        .collect()
}

// ---------------------------------------------------------- run outputs

pub fn mfd_csv(log: &MetricsLog) -> String {
    let mut s = format!("# mfd schema v{SCHEMA}\ninterval_start,ttt,ttd\n");
    for r in &log.intervals {
        s.push_str(&format!("{},{},{}\n", r.start_s, r.pn_ttt, r.pn_ttd));
    }
    s
}

pub fn gates_csv(log: &MetricsLog, gate_ids: &[LinkId]) -> String {
    let mut s = format!("# gates schema v{SCHEMA}\nt,gate_id,queue,avg_delay\n");
    for r in &log.intervals {
        for (g, gate) in gate_ids.iter().enumerate() {
            let delay = r.per_gate_delay[g];
            let delay_s = if delay.is_nan() {
                String::new()
            } else {
                format!("{delay}")
            };
            s.push_str(&format!(
                "{},{},{},{delay_s}\n",
                r.start_s, gate.0, r.per_gate_queue[g]
            ));
        }
    }
    s
}

pub fn intervals_csv(log: &MetricsLog) -> String {
    let mut s = format!(
        "# intervals schema v{SCHEMA}\ninterval_start,pn_ttt,pn_ttd,en_ttt,link_count_stddev,emission_g\n"
    );
    for r in &log.intervals {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.start_s, r.pn_ttt, r.pn_ttd, r.en_ttt, r.link_count_stddev, r.emission_g
        ));
    }
    s
}

pub fn summary_text(out: &RunOutput) -> String {
    let t = &out.metrics.totals;
    format!(
        "# summary schema v{SCHEMA}\n\
         controller={}\n\
         pn_ttt_veh_s={}\n\
         pn_ttd_veh_m={}\n\
         en_ttt_veh_s={}\n\
         cordon_queue_veh_s={}\n\
         emission_g={}\n\
         entered={}\n\
         exited={}\n\
         discarded={}\n",
        out.strategy.name(),
        t.pn_ttt_veh_s,
        t.pn_ttd_veh_m,
        t.en_ttt_veh_s,
        t.cordon_queue_veh_s,
        t.emission_g,
        out.entered,
        out.exited,
        out.discarded
    )
}

pub fn commands_csv(out: &RunOutput) -> String {
    let mut s = format!("# commands schema v{SCHEMA}\nt,signal,phase\n");
    for c in &out.commands {
        s.push_str(&format!("{},{},{}\n", c.t, c.signal.0, c.phase));
    }
    s
}

pub fn decisions_csv(out: &RunOutput) -> String {
    let mut s = format!(
        "# decisions schema v{SCHEMA}\nt,signal,q0,q1,q2,p0,p1,p2,factor,chosen\n"
    );
    for d in &out.decisions {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            d.t,
            d.signal.0,
            d.q[0],
            d.q[1],
            d.q[2],
            d.penalty[0],
            d.penalty[1],
            d.penalty[2],
            d.factor,
            d.chosen
        ));
    }
    s
}

/// Raw per-second event log; lossless, replayable via [`replay_events`].
/// Row kinds: `S` one second's aggregates, `X` one gate exit, `L` the
/// per-PN-link counts closing an interval.
pub fn events_csv(log: &MetricsLog) -> String {
    let mut s = format!("# events schema v{SCHEMA}\n");
    let interval = log.interval_s;
    let mut li = 0usize;
    for sec in &log.seconds {
        let queues: Vec<String> = sec.per_gate_queue.iter().map(u32::to_string).collect();
        s.push_str(&format!(
            "S,{},{},{},{},{},{},{}\n",
            sec.t,
            sec.pn_count,
            sec.en_count,
            sec.queued,
            sec.pn_dist_m,
            sec.all_dist_m,
            queues.join(";")
        ));
        for &(gate, entry, exit) in &sec.gate_exits {
            s.push_str(&format!("X,{exit},{gate},{entry}\n"));
        }
        if (sec.t + 1) % interval == 0 && li < log.intervals.len() {
            let r = &log.intervals[li];
            let counts: Vec<String> = r.per_link_count.iter().map(u32::to_string).collect();
            s.push_str(&format!("L,{},{}\n", r.start_s, counts.join(";")));
            li += 1;
        }
    }
    s
}

/// Rebuilds a metrics log by re-feeding a saved event log through the
/// same accumulator. Exports derived from the result are byte-identical
/// to the originals.
pub fn replay_events(
    path: &Path,
    gate_ff_s: Vec<f64>,
    interval_s: u32,
    coeffs: EmissionCoeffs,
) -> Result<MetricsLog> {
    let text = read(path)?;
    let mut log = MetricsLog::new(interval_s, gate_ff_s, coeffs);
    let mut pending: Option<(u32, SecondStats)> = None;
    fn flush(log: &mut MetricsLog, pending: &mut Option<(u32, SecondStats)>) {
        if let Some((t, stats)) = pending.take() {
            log.on_second(t, &stats, |g| g as usize);
        }
    }
    for line in data_lines(&text) {
        let mut f = line.split(',');
        match f.next() {
            Some("S") => {
                flush(&mut log, &mut pending);
                let t: u32 = f.next().context("t")?.parse()?;
                let pn_count = f.next().context("pn")?.parse()?;
                let en_count: u32 = f.next().context("en")?.parse()?;
                let queued = f.next().context("queued")?.parse()?;
                let pn_dist_m = f.next().context("pn_dist")?.parse()?;
                let all_dist_m = f.next().context("all_dist")?.parse()?;
                let per_gate_queue = f
                    .next()
                    .context("queues")?
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<u32>)
                    .collect::<Result<Vec<_>, _>>()?;
                pending = Some((
                    t,
                    SecondStats {
                        pn_count,
                        on_net_count: en_count,
                        pending_count: 0,
                        pn_dist_m,
                        all_dist_m,
                        queued_on_net: queued,
                        per_gate_queue,
                        gate_exits: Vec::new(),
                    },
                ));
            }
            Some("X") => {
                let exit: u32 = f.next().context("exit")?.parse()?;
                let gate: u32 = f.next().context("gate")?.parse()?;
                let entry: u32 = f.next().context("entry")?.parse()?;
                let Some((_, stats)) = pending.as_mut() else {
                    bail!(LabError::Runtime("exit row before any second".into()));
                };
                stats.gate_exits.push((LinkId(gate), entry, exit));
            }
            Some("L") => {
                flush(&mut log, &mut pending);
                let _t: u32 = f.next().context("t")?.parse()?;
                let counts = f
                    .next()
                    .context("counts")?
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::parse::<u32>)
                    .collect::<Result<Vec<_>, _>>()?;
                log.close_interval(counts);
            }
            other => bail!(LabError::Runtime(format!("bad event row kind {other:?}"))),
        }
    }
    flush(&mut log, &mut pending);
    Ok(log)
}

// ------------------------------------------------------------- manifest

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub meta: Meta,
    pub config: Config,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Meta {
    pub code_version: String,
    pub schema: u32,
    pub obs_version: u32,
    pub controller: String,
    pub seed: u64,
    pub demand_profile: String,
}

impl Manifest {
    pub fn new(cfg: &Config) -> Manifest {
        Manifest {
            meta: Meta {
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                schema: SCHEMA,
                obs_version: cordon_core::marl::OBS_VERSION,
                controller: cfg.scenario.controller.clone(),
                seed: cfg.scenario.seed,
                demand_profile: cfg.demand.profile.clone(),
            },
            config: cfg.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let text = read(&dir.join("manifest.toml"))?;
        toml::from_str(&text).map_err(|e| LabError::Runtime(e.to_string()).into())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write(
            &dir.join("manifest.toml"),
            &toml::to_string_pretty(self).expect("manifest serializes"),
        )
    }

    /// True when two runs are comparable: same seed, demand, and network.
    pub fn comparable(&self, other: &Manifest) -> bool {
        self.meta.seed == other.meta.seed
            && self.meta.demand_profile == other.meta.demand_profile
            && toml::to_string(&self.config.network).ok()
                == toml::to_string(&other.config.network).ok()
    }
}

// -------------------------------------------------------------- summary

/// KPI block parsed back from summary.txt.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub controller: String,
    pub values: BTreeMap<String, f64>,
}

pub const KPI_KEYS: [&str; 5] = [
    "pn_ttt_veh_s",
    "pn_ttd_veh_m",
    "en_ttt_veh_s",
    "cordon_queue_veh_s",
    "emission_g",
];

pub fn read_summary(dir: &Path) -> Result<SummaryRow> {
    let text = read(&dir.join("summary.txt"))?;
    let mut controller = String::new();
    let mut values = BTreeMap::new();
    for line in data_lines(&text) {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        if k == "controller" {
            controller = v.to_string();
        } else if let Ok(x) = v.parse::<f64>() {
            values.insert(k.to_string(), x);
        }
    }
    for key in KPI_KEYS {
        if !values.contains_key(key) {
            bail!(LabError::Runtime(format!(
                "summary in {} lacks {key}",
                dir.display()
            )));
        }
    }
    Ok(SummaryRow { controller, values })
}

/// Writes the complete output set of one run.
pub fn write_run_outputs(dir: &Path, net: &Network, cfg: &Config, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    Manifest::new(cfg).save(dir)?;
    write(&dir.join("mfd.csv"), &mfd_csv(&out.metrics))?;
    write(&dir.join("gates.csv"), &gates_csv(&out.metrics, &net.gate_links))?;
    write(&dir.join("intervals.csv"), &intervals_csv(&out.metrics))?;
    write(&dir.join("summary.txt"), &summary_text(out))?;
    write(&dir.join("commands.csv"), &commands_csv(out))?;
    if !out.decisions.is_empty() {
        write(&dir.join("decisions.csv"), &decisions_csv(out))?;
    }
    write(&dir.join("events.csv"), &events_csv(&out.metrics))?;
    let diag = format!(
        "# diagnostics\nconservation_ok={}\noccupancy_ok={}\ndiscarded={}\nvehicle_pn_seconds={}\n",
        out.conservation_ok, out.occupancy_ok, out.discarded, out.vehicle_pn_seconds
    );
    write(&dir.join("diagnostics.log"), &diag)?;
    Ok(())
}
