//! Assembles networks, demand, training and runs from a resolved config.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use cordon_core::demand::{generate_demand, Trip};
use cordon_core::marl::{self, TrainConfig};
use cordon_core::net::Network;
use cordon_core::nn::Mlp;
use cordon_core::runner::{self, RunOutput};

use crate::config::{Config, LabError};
use crate::io;

pub fn build_network(cfg: &Config) -> Result<Network> {
    Network::build_grid(&cfg.grid_spec()).map_err(|e| LabError::Config(e.to_string()).into())
}

/// Trip table for the configured demand and seed.
pub fn build_trips(cfg: &Config, net: &Network) -> Result<Vec<Trip>> {
    let profile = cfg.demand_profile()?;
    let schedule = profile
        .resolve(net, cfg.scenario.seed)
        .map_err(|e| anyhow!(LabError::Config(e.to_string())))?;
    generate_demand(net, &schedule, cfg.scenario.seed)
        .map_err(|e| LabError::Runtime(e.to_string()).into())
}

/// Demand horizon plus clearance, the default run length.
pub fn horizon(cfg: &Config, net: &Network) -> Result<u32> {
    let schedule = cfg
        .demand_profile()?
        .resolve(net, cfg.scenario.seed)
        .map_err(|e| anyhow!(LabError::Config(e.to_string())))?;
    Ok(schedule.horizon_s + cfg.demand.clearance_s)
}

/// Runs the configured controller. `trips_override` replays a saved trip
/// table; `weights_dir` supplies donor nets for the semi-model strategy.
pub fn run_once(
    cfg: &Config,
    net: &Network,
    trips_override: Option<Vec<Trip>>,
    weights_dir: Option<&Path>,
) -> Result<RunOutput> {
    let trips = match trips_override {
        Some(t) => t,
        None => build_trips(cfg, net)?,
    };
    let run_cfg = cfg.run_config(horizon(cfg, net)?)?;
    let weights = match run_cfg.strategy {
        cordon_core::runner::StrategyKind::RlSemiModel => {
            let dir = weights_dir.ok_or_else(|| {
                LabError::Config("rl_semi_model needs --weights <dir>".to_string())
            })?;
            let donors = io::load_donors(dir)?;
            let dims = donors[0].dims.clone();
            let assignment = marl::transfer(&donors, net, &dims)
                .map_err(|e| anyhow!(LabError::Runtime(e.to_string())))?;
            Some(
                assignment
                    .into_iter()
                    .map(|(node, d)| (node, donors[d].clone()))
                    .collect::<BTreeMap<_, _>>(),
            )
        }
        _ => None,
    };
    runner::run(net, trips, &run_cfg, weights.as_ref())
        .map_err(|e| LabError::Runtime(e.to_string()).into())
}

/// Full run command: simulate and write the output set into `dir`.
pub fn run_to_dir(
    cfg: &Config,
    dir: &Path,
    trips_override: Option<Vec<Trip>>,
    weights_dir: Option<&Path>,
) -> Result<RunOutput> {
    let net = build_network(cfg)?;
    let out = run_once(cfg, &net, trips_override, weights_dir)?;
    io::write_run_outputs(dir, &net, cfg, &out)
        .with_context(|| format!("writing outputs to {}", dir.display()))?;
    Ok(out)
}

/// Trains the configured edge and writes weights, reward curves, and the
/// training manifest into `dir`.
pub fn train_to_dir(cfg: &Config, dir: &Path) -> Result<marl::TrainOutput> {
    let net = build_network(cfg)?;
    let train_cfg: TrainConfig = cfg.train_config()?;
    let profile = cfg.named_demand_profile(&cfg.training.demand_profile)?;
    let out = marl::train(&net, &profile, &train_cfg)
        .map_err(|e| anyhow!(LabError::Runtime(e.to_string())))?;

    let donors: Vec<(u32, Mlp)> = out
        .agents
        .iter()
        .map(|(node, mlp)| (node.0, mlp.clone()))
        .collect();
    io::save_donors(dir, &donors)?;

    let mut rewards = format!("# rewards schema v{}\nepisode,agent,mean_reward\n", io::SCHEMA);
    for r in &out.curves {
        rewards.push_str(&format!("{},{},{}\n", r.episode, r.agent, r.mean_reward));
    }
    io::write(&dir.join("rewards.csv"), &rewards)?;

    let mut refreshes = format!("# refreshes schema v{}\nepisode,epoch\n", io::SCHEMA);
    for &(e, ep) in &out.target_refreshes {
        refreshes.push_str(&format!("{e},{ep}\n"));
    }
    io::write(&dir.join("target_refreshes.csv"), &refreshes)?;

    io::Manifest::new(cfg).save(dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn desk_network_and_trips_build() {
        let cfg = Config::preset("desk").unwrap();
        let net = build_network(&cfg).unwrap();
        assert_eq!(net.gate_links.len(), 12);
        let trips = build_trips(&cfg, &net).unwrap();
        assert!(!trips.is_empty());
        assert_eq!(horizon(&cfg, &net).unwrap(), 1800 + 600);
    }

    #[test]
    fn zero_demand_run_has_zero_kpis() {
        let mut cfg = Config::preset("desk").unwrap();
        cfg.demand.profile = "zero".to_string();
        let net = build_network(&cfg).unwrap();
        let out = run_once(&cfg, &net, None, None).unwrap();
        let t = out.metrics.totals;
        assert_eq!(t.pn_ttt_veh_s, 0.0);
        assert_eq!(t.pn_ttd_veh_m, 0.0);
        assert_eq!(t.en_ttt_veh_s, 0.0);
        assert_eq!(t.cordon_queue_veh_s, 0.0);
        assert_eq!(t.emission_g, 0.0);
    }
}
