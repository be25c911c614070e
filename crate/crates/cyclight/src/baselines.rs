//! Classical signal timing to measure the learned controller against:
//! a fixed uniform plan, queue-pressure split allocation on a fixed cycle,
//! and interval-based adaptive timing from measured flow ratios.

use crate::grid::{Direction, GridNetwork, NodeId, DIRECTIONS};
use crate::signal::{decode_with_cycle, default_plan, PhasePlan, SignalTimingParams};
use crate::sim::Simulation;

/// Cycle length the pressure-based controller always runs.
pub const BACKPRESSURE_CYCLE_S: u32 = 90;

/// Measurement interval of the adaptive controller.
pub const ADAPTIVE_INTERVAL_S: u32 = 300;

/// Saturation flow per lane in vehicles per hour (one per two seconds).
pub const SATURATION_VEH_H: f64 = 1800.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// The default plan, forever.
    FixedTime,
    /// Greens proportional to upstream-minus-downstream queue pressure.
    BackPressure,
    /// Flow-ratio timing recomputed every measurement interval.
    AdaptiveInterval,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FixedTime => "fixed",
            BaselineKind::BackPressure => "backpressure",
            BaselineKind::AdaptiveInterval => "webster",
        }
    }
}

/// Queue pressure of each phase at one intersection: for every served
/// movement, the upstream lane queue minus the per-lane queue on the link
/// the movement discharges into, floored at zero and summed.
pub fn phase_pressures(sim: &Simulation, ix: NodeId) -> [f64; 4] {
    let mut p = [0.0; 4];
    for side in DIRECTIONS {
        let queues = sim.approach_queue(ix, side);
        let inner = queues[0] as f64;
        let outer = queues[queues.len() - 1] as f64;
        let heading = side.opposite();
        let through_down = sim.downstream_queue_per_lane(ix, heading);
        let left_down = sim.downstream_queue_per_lane(ix, heading.left());
        let (through_phase, left_phase) = match side {
            Direction::North | Direction::South => (0, 1),
            Direction::East | Direction::West => (2, 3),
        };
        p[through_phase] += (outer - through_down).max(0.0);
        p[left_phase] += (inner - left_down).max(0.0);
    }
    p
}

/// Normalize pressures into splits; uniform when nothing presses.
pub fn splits_from_pressures(pressures: &[f64; 4]) -> Vec<f64> {
    let floored: Vec<f64> = pressures.iter().map(|&p| p.max(0.0)).collect();
    let total: f64 = floored.iter().sum();
    if total <= 0.0 {
        return vec![0.25; 4];
    }
    floored.iter().map(|p| p / total).collect()
}

/// Cycle length and splits from per-phase flow ratios: the classical
/// optimum `(1.5 L + 5) / (1 - Y)` with twelve seconds of lost time,
/// clamped to the admissible range and snapped to the nearest admissible
/// length (ties upward). Saturated demand pins the longest cycle; an empty
/// interval falls back to the shortest cycle with uniform splits.
pub fn adaptive_timing(flow_ratios: &[f64; 4], params: &SignalTimingParams) -> (u32, Vec<f64>) {
    let y_total: f64 = flow_ratios.iter().sum();
    let set = &params.cycle_set;
    let (lo, hi) = (set[0], *set.last().expect("non-empty cycle set"));
    if y_total <= 0.0 {
        return (lo, vec![1.0 / 4.0; 4]);
    }
    if y_total >= 0.95 {
        return (hi, flow_ratios.iter().map(|y| y / y_total).collect());
    }
    let lost = 4.0 * params.yellow_s as f64;
    let c0 = (1.5 * lost + 5.0) / (1.0 - y_total);
    let clamped = c0.clamp(lo as f64, hi as f64);
    let snapped = *set
        .iter()
        .min_by(|&&a, &&b| {
            let da = (a as f64 - clamped).abs();
            let db = (b as f64 - clamped).abs();
            // Ties snap up: prefer the longer cycle.
            da.partial_cmp(&db).unwrap().then(b.cmp(&a))
        })
        .expect("non-empty cycle set");
    (snapped, flow_ratios.iter().map(|y| y / y_total).collect())
}

/// Arrival counters one adaptive intersection remembers between refreshes.
#[derive(Debug, Clone, Default)]
struct IntervalCounters {
    last_refresh_s: u32,
    prev_arrivals: [Vec<u64>; 4],
}

/// A classical controller covering every interior intersection.
pub struct BaselineController {
    pub kind: BaselineKind,
    plans: Vec<PhasePlan>,
    counters: Vec<IntervalCounters>,
}

impl BaselineController {
    pub fn new(kind: BaselineKind, net: &GridNetwork, params: &SignalTimingParams) -> Self {
        BaselineController {
            kind,
            plans: vec![default_plan(params); net.interior_count()],
            counters: vec![IntervalCounters::default(); net.interior_count()],
        }
    }

    /// The plan intersection `ix` should run for its next cycle, decided at
    /// observation time `now_s`.
    pub fn next_plan(
        &mut self,
        sim: &Simulation,
        ix: NodeId,
        now_s: u32,
        params: &SignalTimingParams,
    ) -> PhasePlan {
        match self.kind {
            BaselineKind::FixedTime => self.plans[ix].clone(),
            BaselineKind::BackPressure => {
                let splits = splits_from_pressures(&phase_pressures(sim, ix));
                decode_with_cycle(params, BACKPRESSURE_CYCLE_S, &splits)
                    .expect("pressure splits always decode")
            }
            BaselineKind::AdaptiveInterval => {
                let due = now_s.saturating_sub(self.counters[ix].last_refresh_s) >= ADAPTIVE_INTERVAL_S;
                if due {
                    let ratios = self.measure_flow_ratios(sim, ix, now_s);
                    let (cycle, splits) = adaptive_timing(&ratios, params);
                    self.plans[ix] = decode_with_cycle(params, cycle, &splits)
                        .expect("adaptive splits always decode");
                }
                self.plans[ix].clone()
            }
        }
    }

    /// Per-phase flow ratios from the arrivals since the last refresh: the
    /// busiest served lane's arrival rate against saturation flow.
    fn measure_flow_ratios(&mut self, sim: &Simulation, ix: NodeId, now_s: u32) -> [f64; 4] {
        let c = &mut self.counters[ix];
        let window_s = (now_s - c.last_refresh_s).max(1) as f64;
        let mut ratios = [0.0f64; 4];
        for (si, side) in DIRECTIONS.iter().enumerate() {
            let arrivals = sim.approach_arrivals(ix, *side);
            if c.prev_arrivals[si].is_empty() {
                c.prev_arrivals[si] = vec![0; arrivals.len()];
            }
            let inner_new = arrivals[0] - c.prev_arrivals[si][0];
            let outer_lane = arrivals.len() - 1;
            let outer_new = arrivals[outer_lane] - c.prev_arrivals[si][outer_lane];
            let rate = |n: u64| n as f64 * 3600.0 / window_s / SATURATION_VEH_H;
            let (through_phase, left_phase) = match side {
                Direction::North | Direction::South => (0, 1),
                Direction::East | Direction::West => (2, 3),
            };
            ratios[through_phase] = ratios[through_phase].max(rate(outer_new));
            ratios[left_phase] = ratios[left_phase].max(rate(inner_new));
            c.prev_arrivals[si] = arrivals;
        }
        c.last_refresh_s = now_s;
        ratios
    }
}
