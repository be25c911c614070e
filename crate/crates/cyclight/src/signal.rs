//! Cycle-level signal timing.
//!
//! A controller emits one hybrid action per cycle: a discrete cycle length
//! drawn from a fixed admissible set plus a continuous split vector on the
//! probability simplex. Decoding spreads the slack beyond the per-phase
//! minimum green across phases in proportion to the splits:
//!
//! ```text
//! L_i = (k - n*g_min - n*y) * l_i + g_min
//! ```
//!
//! so every phase keeps its minimum green and the greens plus yellows tile
//! the cycle exactly. Execution quantizes greens to whole seconds by
//! largest remainder, preserving the tiling.
//!
//! The four phases run in fixed order: north-south through (with right
//! turns), north-south left, east-west through (with right turns),
//! east-west left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Direction, Turn};

pub const DEFAULT_CYCLE_SET: [u32; 6] = [60, 72, 84, 96, 108, 120];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTimingParams {
    /// Admissible cycle lengths in seconds, ascending.
    pub cycle_set: Vec<u32>,
    pub g_min_s: u32,
    pub yellow_s: u32,
    pub n_phases: usize,
    /// Cycle length every intersection runs before its first decision.
    pub default_cycle_s: u32,
    /// Seconds before cycle end at which observations are taken (0 =
    /// standard timing, 5 = advance control).
    pub advance_time_s: u32,
}

impl Default for SignalTimingParams {
    fn default() -> Self {
        SignalTimingParams {
            cycle_set: DEFAULT_CYCLE_SET.to_vec(),
            g_min_s: 12,
            yellow_s: 3,
            n_phases: 4,
            default_cycle_s: 84,
            advance_time_s: 0,
        }
    }
}

impl SignalTimingParams {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_set.is_empty() || self.cycle_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BadConfig {
                field: "cycle_set",
                reason: "must be non-empty and strictly ascending".into(),
            });
        }
        let floor = self.n_phases as u32 * (self.g_min_s + self.yellow_s);
        for &k in &self.cycle_set {
            if k < floor {
                return Err(Error::CycleTooShort {
                    k,
                    phases: self.n_phases,
                    g_min: self.g_min_s,
                    y: self.yellow_s,
                });
            }
        }
        if !self.cycle_set.contains(&self.default_cycle_s) {
            return Err(Error::BadConfig {
                field: "default_cycle_s",
                reason: format!("{} not in the cycle set", self.default_cycle_s),
            });
        }
        if self.advance_time_s >= self.g_min_s {
            return Err(Error::BadConfig {
                field: "advance_time_s",
                reason: format!("{} must stay below the minimum green", self.advance_time_s),
            });
        }
        Ok(())
    }
}

/// One control decision: discrete cycle length plus continuous splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAction {
    pub cycle_s: u32,
    pub splits: Vec<f64>,
}

/// Map raw (unbounded) head outputs onto the simplex via a shifted softmax.
/// An all-zero input yields uniform splits; adding a constant to every
/// component changes nothing.
pub fn normalize_splits(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Executable timing for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub cycle_s: u32,
    /// The simplex splits the greens were decoded from.
    pub splits: Vec<f64>,
    /// Exact real-valued greens.
    pub greens_s: Vec<f64>,
    /// Whole-second execution greens; sums with yellows to the cycle.
    pub green_ticks: Vec<u32>,
    pub yellow_s: u32,
}

/// Decode a hybrid action into a phase plan, enforcing membership of the
/// cycle set and a valid split vector.
pub fn decode_action(params: &SignalTimingParams, action: &HybridAction) -> Result<PhasePlan> {
    if !params.cycle_set.contains(&action.cycle_s) {
        return Err(Error::CycleNotInSet { got: action.cycle_s, set: params.cycle_set.clone() });
    }
    decode_with_cycle(params, action.cycle_s, &action.splits)
}

/// Decode for an arbitrary cycle length that still fits the phase floor.
/// Classical controllers use this to run cycles outside the learned set.
pub fn decode_with_cycle(params: &SignalTimingParams, cycle_s: u32, splits: &[f64]) -> Result<PhasePlan> {
    let n = params.n_phases;
    if splits.len() != n {
        return Err(Error::BadSplits(splits.to_vec(), format!("need {n} components")));
    }
    if splits.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::BadSplits(splits.to_vec(), "negative or non-finite component".into()));
    }
    let sum: f64 = splits.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::BadSplits(splits.to_vec(), format!("components sum to {sum}, not 1")));
    }
    let floor = n as u32 * (params.g_min_s + params.yellow_s);
    if cycle_s < floor {
        return Err(Error::CycleTooShort {
            k: cycle_s,
            phases: n,
            g_min: params.g_min_s,
            y: params.yellow_s,
        });
    }

    let budget = (cycle_s - floor) as f64;
    let greens_s: Vec<f64> = splits.iter().map(|l| budget * (l / sum) + params.g_min_s as f64).collect();
    let green_ticks = round_preserving_sum(&greens_s, cycle_s - n as u32 * params.yellow_s);
    debug_assert!(green_ticks.iter().all(|&g| g >= params.g_min_s));
    debug_assert_eq!(green_ticks.iter().sum::<u32>() + n as u32 * params.yellow_s, cycle_s);

    Ok(PhasePlan {
        cycle_s,
        splits: splits.iter().map(|l| l / sum).collect(),
        greens_s,
        green_ticks,
        yellow_s: params.yellow_s,
    })
}

/// Round each entry down, then hand the leftover seconds to the largest
/// fractional parts (ties to the earliest phase).
fn round_preserving_sum(values: &[f64], target: u32) -> Vec<u32> {
    let mut ticks: Vec<u32> = values.iter().map(|v| v.floor() as u32).collect();
    let assigned: u32 = ticks.iter().sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = values[a] - values[a].floor();
        let fb = values[b] - values[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let n = ticks.len();
    for i in 0..(target.saturating_sub(assigned) as usize) {
        ticks[order[i % n]] += 1;
    }
    ticks
}

/// The default pre-decision plan: default cycle length, uniform splits.
pub fn default_plan(params: &SignalTimingParams) -> PhasePlan {
    let uniform = vec![1.0 / params.n_phases as f64; params.n_phases];
    decode_with_cycle(params, params.default_cycle_s, &uniform)
        .expect("default timing always decodes")
}

/// Which approach-side/turn combinations a phase serves.
pub fn phase_serves(phase: usize, approach_side: Direction, movement: Turn) -> bool {
    use Direction::*;
    let ns = matches!(approach_side, North | South);
    match phase {
        0 => ns && matches!(movement, Turn::Straight | Turn::Right),
        1 => ns && movement == Turn::Left,
        2 => !ns && matches!(movement, Turn::Straight | Turn::Right),
        3 => !ns && movement == Turn::Left,
        _ => false,
    }
}

/// Signal condition over one upcoming one-second interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalState {
    pub phase: usize,
    pub green: bool,
    /// 1-based count of green seconds elapsed at the end of this interval;
    /// only meaningful while green.
    pub green_second: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlEvent {
    /// End of a non-final phase: record a sensor snapshot.
    PhaseSnapshotDue(usize),
    /// Observation moment: final snapshot, state assembly, decision.
    ObservationDue,
    /// Cycle boundary: the caller must `apply_swap` before the next interval.
    PlanSwapDue,
}

/// Per-intersection cycle clock. Each intersection runs its own scheduler;
/// cycles are free to drift apart as lengths differ.
#[derive(Debug, Clone)]
pub struct CycleScheduler {
    plan: PhasePlan,
    pending: Option<PhasePlan>,
    elapsed: u32,
    cycle_index: u64,
    advance_s: u32,
}

impl CycleScheduler {
    pub fn new(params: &SignalTimingParams) -> Self {
        CycleScheduler {
            plan: default_plan(params),
            pending: None,
            elapsed: 0,
            cycle_index: 0,
            advance_s: params.advance_time_s,
        }
    }

    pub fn plan(&self) -> &PhasePlan {
        &self.plan
    }

    pub fn cycle_index(&self) -> u64 {
        self.cycle_index
    }

    /// Seconds until the running cycle ends.
    pub fn remaining_s(&self) -> u32 {
        self.plan.cycle_s - self.elapsed
    }

    /// Queue the plan to install at the next cycle boundary.
    pub fn set_pending(&mut self, plan: PhasePlan) {
        self.pending = Some(plan);
    }

    /// Signal state for the interval about to be simulated.
    pub fn interval_state(&self) -> IntervalState {
        debug_assert!(self.elapsed < self.plan.cycle_s, "swap not applied");
        let mut acc = 0u32;
        for (p, &g) in self.plan.green_ticks.iter().enumerate() {
            if self.elapsed < acc + g {
                return IntervalState { phase: p, green: true, green_second: self.elapsed - acc + 1 };
            }
            acc += g;
            if self.elapsed < acc + self.plan.yellow_s {
                return IntervalState { phase: p, green: false, green_second: 0 };
            }
            acc += self.plan.yellow_s;
        }
        unreachable!("elapsed inside cycle")
    }

    /// Advance the clock past one simulated interval and report the control
    /// events that fall on the new clock value, in handling order.
    pub fn advance(&mut self) -> Vec<ControlEvent> {
        self.elapsed += 1;
        let mut events = Vec::new();
        let mut acc = 0u32;
        for p in 0..self.plan.green_ticks.len() - 1 {
            acc += self.plan.green_ticks[p] + self.plan.yellow_s;
            if self.elapsed == acc {
                events.push(ControlEvent::PhaseSnapshotDue(p));
            }
        }
        if self.elapsed == self.plan.cycle_s - self.advance_s {
            events.push(ControlEvent::ObservationDue);
        }
        if self.elapsed == self.plan.cycle_s {
            events.push(ControlEvent::PlanSwapDue);
        }
        events
    }

    /// Roll into the next cycle: install the pending plan, or repeat the
    /// current one when the controller failed to deliver.
    pub fn apply_swap(&mut self) {
        debug_assert_eq!(self.elapsed, self.plan.cycle_s);
        match self.pending.take() {
            Some(p) => self.plan = p,
            None => {
                log::warn!(
                    "no pending plan at cycle {}; repeating the running {} s plan",
                    self.cycle_index,
                    self.plan.cycle_s
                );
            }
        }
        self.elapsed = 0;
        self.cycle_index += 1;
    }
}
