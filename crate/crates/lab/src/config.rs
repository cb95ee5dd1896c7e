//! Scenario configuration: TOML with two built-in presets.
//!
//! A config names a preset (`profile = "desk"` or `"paper"`) and overrides
//! any field it cares about; the file is deep-merged over the preset and
//! then validated as a whole. Unknown keys are rejected so typos surface
//! as errors, with the TOML span in the message.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cordon_core::demand::DemandProfile;
use cordon_core::marl::TrainConfig;
use cordon_core::metrics::EmissionCoeffs;
use cordon_core::net::{Edge, GridSpec};
use cordon_core::nn::OptimizerKind;
use cordon_core::runner::{RunConfig, StrategyKind};
use serde::{Deserialize, Serialize};

pub const DESK_PRESET: &str = include_str!("presets/desk.toml");
pub const PAPER_PRESET: &str = include_str!("presets/paper.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scenario: Scenario,
    pub network: NetworkSection,
    pub demand: DemandSection,
    pub control: ControlSection,
    pub emission: EmissionSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Preset the file was merged over: "desk" or "paper".
    pub profile: String,
    /// fixed | feedback | pi | pi_cordon_queue | rl_semi_model
    pub controller: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub rows: u32,
    pub cols: u32,
    pub pn_row0: u32,
    pub pn_col0: u32,
    pub pn_rows: u32,
    pub pn_cols: u32,
    pub grid_link_m: f64,
    pub stub_link_m: f64,
    pub lanes: u32,
    pub speed_mps: f64,
    pub vehicle_len_m: f64,
    pub min_gap_m: f64,
    pub saturation_flow: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// demand1 | demand2 | desk1 | desk2 | zero | custom
    pub profile: String,
    /// Seconds simulated beyond the demand horizon.
    pub clearance_s: u32,
    /// Horizon of the zero profile.
    pub zero_horizon_s: u32,
    /// Custom direction-table profile (used when profile = "custom").
    pub custom_window_s: u32,
    pub custom_north: Vec<[f64; 2]>,
    pub custom_east: Vec<[f64; 2]>,
    pub custom_south: Vec<[f64; 2]>,
    pub custom_west: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub k_p: f64,
    pub k_i: f64,
    pub k_s: f64,
    pub ttt_crit: f64,
    pub control_period_s: u32,
    pub interval_s: u32,
    pub green_1: u32,
    pub green_2: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionSection {
    pub alpha_g_per_m: f64,
    pub beta_g_per_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub episodes: u32,
    pub decay_episodes: u32,
    pub epsilon_floor: f64,
    pub epochs_per_episode: u32,
    pub target_refresh: u32,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// sgd | adam
    pub optimizer: String,
    pub hidden: Vec<usize>,
    /// north | east | south | west
    pub trained_edge: String,
    /// Demand profile used for training episodes.
    pub demand_profile: String,
}

/// Error carrying the exit-code distinction the CLI needs.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Config {
    /// Parses a config file over its preset.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let user: toml::Table = toml::from_str(text).map_err(config_err)?;
        let profile = user
            .get("scenario")
            .and_then(|s| s.get("profile"))
            .and_then(|p| p.as_str())
            .unwrap_or("desk")
            .to_string();
        let preset_text = match profile.as_str() {
            "desk" => DESK_PRESET,
            "paper" => PAPER_PRESET,
            other => bail!(LabError::Config(format!(
                "unknown profile {other:?}, expected \"desk\" or \"paper\""
            ))),
        };
        let mut merged: toml::Table = toml::from_str(preset_text).expect("preset parses");
        deep_merge(&mut merged, user);
        let cfg: Config = toml::Table::try_into(merged).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(profile: &str) -> Result<Config> {
        Config::parse(&format!("[scenario]\nprofile = \"{profile}\"\n"))
    }

    fn validate(&self) -> Result<()> {
        self.strategy()?;
        self.trained_edge()?;
        self.optimizer()?;
        self.demand_profile()?;
        for (name, v) in [
            ("control.k_p", self.control.k_p),
            ("control.k_i", self.control.k_i),
            ("control.k_s", self.control.k_s),
            ("control.ttt_crit", self.control.ttt_crit),
        ] {
            if !v.is_finite() || v <= 0.0 {
                bail!(LabError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.control.green_1 % 5 != 0 || self.control.green_2 % 5 != 0 {
            bail!(LabError::Config(
                "green splits must be multiples of the 5 s action step".into()
            ));
        }
        if self.demand.clearance_s % self.control.interval_s != 0 {
            bail!(LabError::Config(format!(
                "demand.clearance_s must be a multiple of control.interval_s = {}",
                self.control.interval_s
            )));
        }
        // Geometry errors surface here rather than mid-run.
        self.grid_spec_checked()?;
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        let n = &self.network;
        GridSpec {
            rows: n.rows,
            cols: n.cols,
            pn_row0: n.pn_row0,
            pn_col0: n.pn_col0,
            pn_rows: n.pn_rows,
            pn_cols: n.pn_cols,
            grid_link_m: n.grid_link_m,
            stub_link_m: n.stub_link_m,
            lanes: n.lanes,
            speed_mps: n.speed_mps,
            vehicle_len_m: n.vehicle_len_m,
            min_gap_m: n.min_gap_m,
            saturation_flow: n.saturation_flow,
        }
    }

    fn grid_spec_checked(&self) -> Result<GridSpec> {
        let spec = self.grid_spec();
        cordon_core::net::Network::build_grid(&spec)
            .map_err(|e| LabError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn strategy(&self) -> Result<StrategyKind> {
        Ok(match self.scenario.controller.as_str() {
            "fixed" => StrategyKind::Fixed,
            "feedback" => StrategyKind::Feedback,
            "pi" => StrategyKind::Pi,
            "pi_cordon_queue" => StrategyKind::PiCordonQueue,
            "rl_semi_model" => StrategyKind::RlSemiModel,
            other => bail!(LabError::Config(format!("unknown controller {other:?}"))),
        })
    }

    pub fn trained_edge(&self) -> Result<Edge> {
        Ok(match self.training.trained_edge.as_str() {
            "north" => Edge::North,
            "east" => Edge::East,
            "south" => Edge::South,
            "west" => Edge::West,
            other => bail!(LabError::Config(format!("unknown edge {other:?}"))),
        })
    }

    pub fn optimizer(&self) -> Result<OptimizerKind> {
        Ok(match self.training.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => bail!(LabError::Config(format!("unknown optimizer {other:?}"))),
        })
    }

    pub fn demand_profile(&self) -> Result<DemandProfile> {
        self.named_demand_profile(&self.demand.profile)
    }

    pub fn named_demand_profile(&self, name: &str) -> Result<DemandProfile> {
        Ok(match name {
            "demand1" => DemandProfile::demand1(),
            "demand2" => DemandProfile::demand2(),
            "desk1" => DemandProfile::desk1(),
            "desk2" => DemandProfile::desk2(),
            "zero" => DemandProfile::Zero {
                horizon_s: self.demand.zero_horizon_s,
            },
            "custom" => {
                let d = &self.demand;
                let to_pairs = |v: &Vec<[f64; 2]>| v.iter().map(|r| (r[0], r[1])).collect();
                let ranges = [
                    to_pairs(&d.custom_north),
                    to_pairs(&d.custom_east),
                    to_pairs(&d.custom_south),
                    to_pairs(&d.custom_west),
                ];
                if ranges.iter().any(|r: &Vec<(f64, f64)>| r.is_empty()) {
                    bail!(LabError::Config(
                        "custom demand needs ranges for all four directions".into()
                    ));
                }
                DemandProfile::DirectionTable {
                    window_s: d.custom_window_s,
                    ranges,
                }
            }
            other => bail!(LabError::Config(format!("unknown demand profile {other:?}"))),
        })
    }

    pub fn run_config(&self, horizon_s: u32) -> Result<RunConfig> {
        Ok(RunConfig {
            strategy: self.strategy()?,
            horizon_s,
            interval_s: self.control.interval_s,
            control_period_s: self.control.control_period_s,
            k_p: self.control.k_p,
            k_i: self.control.k_i,
            k_s: self.control.k_s,
            ttt_crit: self.control.ttt_crit,
            green_split: (self.control.green_1, self.control.green_2),
            emission: EmissionCoeffs {
                alpha_g_per_m: self.emission.alpha_g_per_m,
                beta_g_per_s: self.emission.beta_g_per_s,
            },
            log_discharges: false,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            episodes: t.episodes,
            decay_episodes: t.decay_episodes,
            epsilon_floor: t.epsilon_floor,
            epochs_per_episode: t.epochs_per_episode,
            target_refresh: t.target_refresh,
            batch_size: t.batch_size,
            buffer_capacity: t.buffer_capacity,
            gamma: t.gamma,
            learning_rate: t.learning_rate,
            optimizer: self.optimizer()?,
            hidden: t.hidden.clone(),
            clearance_s: self.demand.clearance_s,
            trained_edge: self.trained_edge()?,
            green_split: (self.control.green_1, self.control.green_2),
            seed: self.scenario.seed,
        })
    }

    /// Resolved config as TOML, for the run manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn config_err(e: impl fmt::Display) -> anyhow::Error {
    LabError::Config(e.to_string()).into()
}

/// Recursively overlays `user` onto `base`; user scalars and arrays win.
fn deep_merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => deep_merge(b, u),
            (slot, v) => {
                if let Some(slot) = slot {
                    *slot = v;
                } else {
                    base.insert(k, v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let desk = Config::preset("desk").unwrap();
        assert_eq!(desk.network.rows, 3);
        assert_eq!(desk.scenario.controller, "fixed");
        let paper = Config::preset("paper").unwrap();
        assert_eq!(paper.network.rows, 5);
        assert_eq!(paper.training.hidden, vec![400, 400, 400, 400]);
        assert!((paper.control.ttt_crit - 17000.0).abs() < 1e-9);
    }

    #[test]
    fn user_fields_override_the_preset() {
        let cfg = Config::parse(
            "[scenario]\nprofile = \"desk\"\ncontroller = \"pi\"\nseed = 42\n\
             [control]\nk_s = 123.0\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario.seed, 42);
        assert_eq!(cfg.control.k_s, 123.0);
        // Untouched fields keep preset values.
        assert_eq!(cfg.network.rows, 3);
        assert!(matches!(cfg.strategy().unwrap(), StrategyKind::Pi));
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_names() {
        let err = Config::parse("[scenario]\nprofile=\"desk\"\n[control]\nk_z = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("k_z") || err.contains("unknown field"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for snippet in [
            "[control]\nk_s = -5.0\n",
            "[scenario]\ncontroller = \"maxpressure\"\n",
            "[network]\npn_row0 = 0\n",
            "[control]\ngreen_1 = 17\n",
        ] {
            let text = format!("[scenario]\nprofile = \"desk\"\n{snippet}");
            assert!(Config::parse(&text).is_err(), "{snippet}");
        }
    }

    #[test]
    fn custom_demand_profile_builds() {
        let cfg = Config::parse(
            "[scenario]\nprofile = \"desk\"\n[demand]\nprofile = \"custom\"\n\
             custom_window_s = 300\n\
             custom_north = [[100.0, 200.0]]\ncustom_east = [[100.0, 200.0]]\n\
             custom_south = [[100.0, 200.0]]\ncustom_west = [[100.0, 200.0]]\n",
        )
        .unwrap();
        match cfg.demand_profile().unwrap() {
            DemandProfile::DirectionTable { window_s, .. } => assert_eq!(window_s, 300),
            other => panic!("wrong profile {other:?}"),
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = Config::preset("desk").unwrap();
        let text = cfg.to_toml();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back.network.rows, cfg.network.rows);
        assert_eq!(back.control.k_s, cfg.control.k_s);
    }
}
