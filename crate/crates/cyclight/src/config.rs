//! One serializable struct that pins down an entire experiment: grid,
//! demand, controller, signal grammar, learner shape, seeds, and
//! output cadence.
//!
//! Every field carries a serde default, so a JSON config file only
//! needs the fields it wants to change. [`ExperimentConfig::default`]
//! is the full-scale setup (5×5 grid, 3000 s episodes, 700 of them);
//! [`ExperimentConfig::desk`] shrinks everything to a laptop-friendly
//! size while keeping the same mechanics.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::PdqnSettings;
use crate::baselines::BaselineKind;
use crate::pamdp::{NEIGHBOR_REWARD_WEIGHT, SECONDARY_PENALTY};
use crate::signal::SignalTimingParams;
use crate::{Error, Result};

/// Which policy drives the lights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Static default plan everywhere, never re-timed.
    #[serde(rename = "fixed")]
    FixedTime,
    /// Queue-pressure splits on a fixed 90 s cycle.
    #[serde(rename = "backpressure")]
    BackPressure,
    /// Interval re-timing from measured flow ratios.
    #[serde(rename = "webster")]
    Webster,
    /// The learned controller with neighbor attention.
    #[serde(rename = "cyclight")]
    Cyclight,
    /// The learned controller with communication disabled: every agent
    /// sees only its own intersection and earns only its own reward.
    #[serde(rename = "single-pdqn")]
    SinglePdqn,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::FixedTime,
        ControllerKind::BackPressure,
        ControllerKind::Webster,
        ControllerKind::Cyclight,
        ControllerKind::SinglePdqn,
    ];

    /// The canonical config/CLI string.
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::FixedTime => "fixed",
            ControllerKind::BackPressure => "backpressure",
            ControllerKind::Webster => "webster",
            ControllerKind::Cyclight => "cyclight",
            ControllerKind::SinglePdqn => "single-pdqn",
        }
    }

    /// Does this controller train networks?
    pub fn is_learned(self) -> bool {
        matches!(self, ControllerKind::Cyclight | ControllerKind::SinglePdqn)
    }

    /// The classical controller this maps to, if any.
    pub fn as_baseline(self) -> Option<BaselineKind> {
        match self {
            ControllerKind::FixedTime => Some(BaselineKind::FixedTime),
            ControllerKind::BackPressure => Some(BaselineKind::BackPressure),
            ControllerKind::Webster => Some(BaselineKind::AdaptiveInterval),
            _ => None,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::BadConfig {
                field: "controller",
                reason: format!(
                    "unknown controller `{s}` (choose one of: {})",
                    ControllerKind::ALL.map(|k| k.name()).join(", ")
                ),
            })
    }
}

fn default_rows() -> usize {
    5
}
fn default_cols() -> usize {
    5
}
fn default_link_length() -> f64 {
    300.0
}
fn default_lanes() -> usize {
    2
}
fn default_speed() -> f64 {
    20.0
}
fn default_demand_scale() -> f64 {
    1.0
}
fn default_horizon() -> u32 {
    3000
}
fn default_episodes() -> u32 {
    700
}
fn default_eval_episodes() -> u32 {
    600
}
fn default_controller() -> ControllerKind {
    ControllerKind::Cyclight
}
fn default_neighbor_weight() -> f64 {
    NEIGHBOR_REWARD_WEIGHT
}
fn default_secondary_penalty() -> f64 {
    SECONDARY_PENALTY
}
fn default_transmission_delay() -> u32 {
    0
}
fn default_master_seed() -> u64 {
    1
}
fn default_checkpoint_every() -> u32 {
    50
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// The complete recipe for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Interior intersection rows.
    pub rows: usize,
    /// Interior intersection columns.
    pub cols: usize,
    pub link_length_m: f64,
    pub lanes: usize,
    pub speed_limit_mps: f64,
    /// Multiplier on every flow group's demand bound.
    pub demand_scale: f64,
    /// Episode length in seconds.
    pub horizon_s: u32,
    /// Training episodes.
    pub episodes: u32,
    /// Evaluation episodes (frozen parameters, fresh seeds).
    pub eval_episodes: u32,
    pub controller: ControllerKind,
    /// Cycle grammar and observation timing; `signal.advance_time_s`
    /// moves observations earlier than cycle end.
    pub signal: SignalTimingParams,
    /// Learner architecture and rates (ignored by classical controllers).
    pub learner: PdqnSettings,
    /// One set of network parameters for all intersections instead of
    /// an independent learner per intersection.
    pub share_parameters: bool,
    /// Weight of neighbor rewards in the cooperative return.
    pub neighbor_reward_weight: f64,
    /// Reward penalty per vehicle left over from a served green.
    pub secondary_penalty: f64,
    /// Age of neighbor messages when they become visible.
    pub transmission_delay_s: u32,
    /// Seed for everything; episode seeds are derived from it.
    pub master_seed: u64,
    /// Write a checkpoint every this many episodes (0 = only at end).
    pub checkpoint_every: u32,
    /// Where run artifacts go; the `CYCLIGHT_OUT_ROOT` environment
    /// variable, when set, is prepended to relative paths.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rows: default_rows(),
            cols: default_cols(),
            link_length_m: default_link_length(),
            lanes: default_lanes(),
            speed_limit_mps: default_speed(),
            demand_scale: default_demand_scale(),
            horizon_s: default_horizon(),
            episodes: default_episodes(),
            eval_episodes: default_eval_episodes(),
            controller: default_controller(),
            signal: SignalTimingParams::default(),
            learner: PdqnSettings::default(),
            share_parameters: false,
            neighbor_reward_weight: default_neighbor_weight(),
            secondary_penalty: default_secondary_penalty(),
            transmission_delay_s: default_transmission_delay(),
            master_seed: default_master_seed(),
            checkpoint_every: default_checkpoint_every(),
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    /// A run small enough to train on one core in minutes: 3×3 grid,
    /// half demand, 1500 s episodes, narrow networks, one shared
    /// parameter set, adaptive-moment optimizer.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig {
            rows: 3,
            cols: 3,
            demand_scale: 0.5,
            horizon_s: 1500,
            episodes: 150,
            eval_episodes: 30,
            share_parameters: true,
            ..ExperimentConfig::default()
        };
        cfg.learner.embed = 16;
        cfg.learner.heads = 2;
        cfg.learner.attn = 8;
        cfg.learner.head_out = 8;
        cfg.learner.hidden = 32;
        cfg.learner.batch = 32;
        cfg.learner.replay_capacity = 4096;
        cfg.learner.use_adam = true;
        cfg.learner.eps_decay_decisions = cfg.suggested_eps_decay();
        cfg
    }

    pub fn agents(&self) -> usize {
        self.rows * self.cols
    }

    /// How many independent parameter sets the run maintains.
    pub fn learner_count(&self) -> usize {
        if self.share_parameters {
            1
        } else {
            self.agents()
        }
    }

    /// Exploration decay horizon: 80% of the decisions one learner is
    /// expected to make over the whole run, taking the mid-range cycle
    /// length as the typical decision spacing.
    pub fn suggested_eps_decay(&self) -> u64 {
        let mid = {
            let set = &self.signal.cycle_set;
            (set.first().copied().unwrap_or(60) + set.last().copied().unwrap_or(120)) / 2
        };
        let cycles = self.horizon_s as f64 / mid as f64;
        let per_learner = if self.share_parameters { self.agents() as f64 } else { 1.0 };
        (0.8 * self.episodes as f64 * cycles * per_learner).round() as u64
    }

    /// Episode seed for training episode `e` (zero-based).
    pub fn train_seed(&self, e: u32) -> u64 {
        crate::rng::substream(self.master_seed, "train-episode", &[e as u64])
    }

    /// Episode seed for evaluation episode `e`: consecutive integers in
    /// their own stream, so evaluation demand never repeats training
    /// demand and `eval_seed(e + 1) == eval_seed(e) + 1`.
    pub fn eval_seed(&self, e: u32) -> u64 {
        crate::rng::substream(self.master_seed, "eval-base", &[]).wrapping_add(e as u64)
    }

    /// Resolve the output directory, honoring `CYCLIGHT_OUT_ROOT`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("CYCLIGHT_OUT_ROOT") {
            Some(root) if self.out_dir.is_relative() => Path::new(&root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::BadConfig {
                field: "rows/cols",
                reason: format!("{}x{} interior grid; need at least 2x2", self.rows, self.cols),
            });
        }
        if !(self.demand_scale >= 0.0 && self.demand_scale.is_finite()) {
            return Err(Error::BadConfig {
                field: "demand_scale",
                reason: format!("{} must be finite and non-negative", self.demand_scale),
            });
        }
        if self.horizon_s == 0 {
            return Err(Error::BadConfig { field: "horizon_s", reason: "zero".into() });
        }
        if self.episodes == 0 {
            return Err(Error::BadConfig { field: "episodes", reason: "zero".into() });
        }
        if !(0.0..=1.0).contains(&self.neighbor_reward_weight) {
            return Err(Error::BadConfig {
                field: "neighbor_reward_weight",
                reason: format!("{} outside [0, 1]", self.neighbor_reward_weight),
            });
        }
        if !(self.secondary_penalty >= 0.0 && self.secondary_penalty.is_finite()) {
            return Err(Error::BadConfig {
                field: "secondary_penalty",
                reason: format!("{} must be finite and non-negative", self.secondary_penalty),
            });
        }
        self.signal.validate()?;
        if self.learner.batch == 0 || self.learner.batch > self.learner.replay_capacity {
            return Err(Error::BadConfig {
                field: "learner.batch",
                reason: format!(
                    "batch {} must be in 1..={}",
                    self.learner.batch, self.learner.replay_capacity
                ),
            });
        }
        if self.learner.cycle_set != self.signal.cycle_set {
            return Err(Error::BadConfig {
                field: "learner.cycle_set",
                reason: "learner and signal grammar disagree on admissible cycles".into(),
            });
        }
        if self.learner.n_phases != self.signal.n_phases {
            return Err(Error::BadConfig {
                field: "learner.n_phases",
                reason: "learner and signal grammar disagree on phase count".into(),
            });
        }
        Ok(())
    }

    /// Parse from a JSON file; missing fields take their defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn full_scale_defaults_echo_the_published_setup() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.rows, cfg.cols), (5, 5));
        assert_relative_eq!(cfg.link_length_m, 300.0);
        assert_eq!(cfg.lanes, 2);
        assert_relative_eq!(cfg.speed_limit_mps, 20.0);
        assert_eq!(cfg.horizon_s, 3000);
        assert_eq!(cfg.episodes, 700);
        assert_eq!(cfg.eval_episodes, 600);
        // Learner rates.
        assert_relative_eq!(cfg.learner.lr_critic, 0.001);
        assert_relative_eq!(cfg.learner.lr_actor, 0.001);
        assert_relative_eq!(cfg.learner.gamma, 0.99);
        assert_eq!(cfg.learner.batch, 128);
        assert_eq!(cfg.learner.n_step, 4);
        assert_relative_eq!(cfg.learner.eps_start, 1.0);
        assert_relative_eq!(cfg.learner.eps_end, 0.05);
        assert!(!cfg.learner.use_adam);
        // Decision-process constants.
        assert_relative_eq!(cfg.secondary_penalty, 10.0);
        assert_relative_eq!(cfg.neighbor_reward_weight, 0.9);
        assert_eq!(cfg.signal.g_min_s, 12);
        assert_eq!(cfg.signal.yellow_s, 3);
        assert_eq!(cfg.signal.cycle_set, vec![60, 72, 84, 96, 108, 120]);
        // Independent agents unless sharing is switched on.
        assert!(!cfg.share_parameters);
        assert_eq!(cfg.learner_count(), 25);
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_preset_is_valid_and_small() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.agents(), 9);
        assert_eq!(cfg.learner_count(), 1);
        assert!(cfg.horizon_s <= 1500);
        assert!(cfg.learner.hidden <= 32);
        assert!(cfg.learner.eps_decay_decisions > 0);
    }

    #[test]
    fn partial_json_fills_in_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"controller": "single-pdqn", "rows": 3}"#).unwrap();
        assert_eq!(cfg.controller, ControllerKind::SinglePdqn);
        assert_eq!(cfg.rows, 3);
        assert_eq!(cfg.cols, 5);
        assert_eq!(cfg.episodes, 700);
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let cfg = ExperimentConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn controller_strings_are_pinned() {
        for (kind, s) in [
            (ControllerKind::FixedTime, "fixed"),
            (ControllerKind::BackPressure, "backpressure"),
            (ControllerKind::Webster, "webster"),
            (ControllerKind::Cyclight, "cyclight"),
            (ControllerKind::SinglePdqn, "single-pdqn"),
        ] {
            assert_eq!(kind.name(), s);
            assert_eq!(s.parse::<ControllerKind>().unwrap(), kind);
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{s}\""));
        }
        assert!("sotl".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = ExperimentConfig::desk();
        cfg.rows = 1;
        assert!(matches!(cfg.validate(), Err(Error::BadConfig { field: "rows/cols", .. })));

        let mut cfg = ExperimentConfig::desk();
        cfg.neighbor_reward_weight = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk();
        cfg.signal.advance_time_s = 13;
        assert!(matches!(
            cfg.validate(),
            Err(Error::BadConfig { field: "advance_time_s", .. })
        ));

        let mut cfg = ExperimentConfig::desk();
        cfg.learner.cycle_set = vec![60, 90, 120];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_seeds_are_consecutive_and_disjoint_from_training() {
        let cfg = ExperimentConfig::desk();
        for e in 0..10 {
            assert_eq!(cfg.eval_seed(e + 1), cfg.eval_seed(e) + 1);
        }
        let train: std::collections::HashSet<u64> =
            (0..cfg.episodes).map(|e| cfg.train_seed(e)).collect();
        assert_eq!(train.len(), cfg.episodes as usize);
        for e in 0..cfg.eval_episodes {
            assert!(!train.contains(&cfg.eval_seed(e)));
        }
    }

    #[test]
    fn decay_horizon_scales_with_run_size() {
        let desk = ExperimentConfig::desk();
        // 150 episodes × (1500 / 90) cycles × 9 agents through one
        // shared learner, times 0.8.
        assert_eq!(desk.suggested_eps_decay(), 18_000);
        let mut solo = desk.clone();
        solo.share_parameters = false;
        assert_eq!(solo.suggested_eps_decay(), 2_000);
    }
}
