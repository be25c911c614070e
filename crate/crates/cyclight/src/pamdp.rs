//! Observation, reward, and information sharing for cycle-level agents.
//!
//! Each intersection condenses one finished cycle into a 64-value local
//! state: four detector snapshots (taken at the ends of the first three
//! phases and at the observation instant) of 16 normalized lane counts
//! each. Decisions are judged by a per-cycle reward that charges average
//! stopped waiting per detected vehicle plus a tenfold penalty for every
//! vehicle that sat through an entire green. Agents share their state and
//! a small digest of their running action with the four adjacent
//! intersections through a mailbox that can impose a transmission delay,
//! and blend neighbor rewards into a cooperative return.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{CycleWindowStats, SensorSnapshot};
use crate::signal::HybridAction;

/// Lane counts per snapshot: four approaches and four exits, two lanes each.
pub const SNAPSHOT_DIM: usize = 16;
/// Snapshots blended into one local state: three phase ends plus the
/// observation instant.
pub const SNAPSHOTS_PER_STATE: usize = 4;
/// Length of the local state vector.
pub const LOCAL_STATE_DIM: usize = SNAPSHOT_DIM * SNAPSHOTS_PER_STATE;
/// Length of an action digest: cycle one-hot, four splits, elapsed share.
pub const ACTION_DIGEST_DIM: usize = 11;
/// Embedding input per agent slot: local state plus action digest.
pub const SLOT_DIM: usize = LOCAL_STATE_DIM + ACTION_DIGEST_DIM;
/// Neighbor reward share in the cooperative return.
pub const NEIGHBOR_REWARD_WEIGHT: f64 = 0.9;

/// Collects the per-phase detector snapshots that make up one local state.
#[derive(Debug, Clone)]
pub struct SnapshotAccumulator {
    frames: Vec<[f64; SNAPSHOT_DIM]>,
    cap: f64,
}

impl SnapshotAccumulator {
    /// `sensor_cap` is the most vehicles one detector lane can report; all
    /// counts are normalized against it.
    pub fn new(sensor_cap: u32) -> Self {
        SnapshotAccumulator { frames: Vec::with_capacity(SNAPSHOTS_PER_STATE), cap: sensor_cap as f64 }
    }

    pub fn push(&mut self, snap: &SensorSnapshot) {
        let mut frame = [0.0; SNAPSHOT_DIM];
        let mut i = 0;
        for side in 0..4 {
            for lane in 0..2 {
                frame[i] = snap.approach[side][lane] as f64 / self.cap;
                i += 1;
            }
        }
        for side in 0..4 {
            for lane in 0..2 {
                frame[i] = snap.exit[side][lane] as f64 / self.cap;
                i += 1;
            }
        }
        self.frames.push(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Drain the collected frames into one state vector; exactly four
    /// snapshots must have been pushed since the last call.
    pub fn finish(&mut self) -> Result<Vec<f64>> {
        if self.frames.len() != SNAPSHOTS_PER_STATE {
            let got = self.frames.len() * SNAPSHOT_DIM;
            self.frames.clear();
            return Err(Error::StateLength { expected: LOCAL_STATE_DIM, got });
        }
        let mut out = Vec::with_capacity(LOCAL_STATE_DIM);
        for f in self.frames.drain(..) {
            out.extend_from_slice(&f);
        }
        Ok(out)
    }
}

/// Compact description of a running signal plan as neighbors see it:
/// cycle length one-hot over the admissible set, the four splits, and how
/// far along the cycle is (clamped share of the longest admissible cycle).
pub fn action_digest(action: &HybridAction, cycle_set: &[u32], elapsed_s: u32) -> Vec<f64> {
    let mut d = Vec::with_capacity(cycle_set.len() + action.splits.len() + 1);
    for &k in cycle_set {
        d.push(if k == action.cycle_s { 1.0 } else { 0.0 });
    }
    d.extend_from_slice(&action.splits);
    let horizon = *cycle_set.last().expect("non-empty cycle set") as f64;
    d.push((elapsed_s as f64 / horizon).min(1.0));
    d
}

/// Default weight of the residual-queue penalty in the reward.
pub const SECONDARY_PENALTY: f64 = 10.0;

/// Per-cycle reward: negative average stopped waiting per detected vehicle,
/// minus `penalty` for every vehicle that sat through a whole green.
pub fn local_reward(stats: &CycleWindowStats, penalty: f64) -> f64 {
    let wait = if stats.detected == 0 {
        0.0
    } else {
        stats.wait_s as f64 / stats.detected as f64
    };
    -wait - penalty * stats.secondary_queue as f64
}

/// Cooperative return: own reward plus down-weighted neighbor rewards,
/// averaged over the participating intersections.
pub fn cooperative_reward(own: f64, neighbors: &[f64], weight: f64) -> f64 {
    (own + weight * neighbors.iter().sum::<f64>()) / (neighbors.len() as f64 + 1.0)
}

/// Everything one agent sees at a decision instant: its own state and
/// digest, and per-direction neighbor views where a message has arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiAgentState {
    pub own: Vec<f64>,
    pub own_digest: Vec<f64>,
    /// Indexed north, east, south, west; `None` where there is no neighbor
    /// or nothing has been received yet.
    pub neighbors: [Option<NeighborView>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub state: Vec<f64>,
    pub digest: Vec<f64>,
}

impl MultiAgentState {
    /// A state with no neighbor views and a neutral digest — what an
    /// isolated intersection (or one with communication disabled) sees.
    pub fn solo(own: Vec<f64>) -> Self {
        MultiAgentState {
            own,
            own_digest: vec![0.0; ACTION_DIGEST_DIM],
            neighbors: [None, None, None, None],
        }
    }

    /// Own embedding slot: state followed by digest.
    pub fn own_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(SLOT_DIM);
        v.extend_from_slice(&self.own);
        v.extend_from_slice(&self.own_digest);
        v
    }

    /// Four fixed neighbor slots in direction order, zero-padded where no
    /// view exists, with a mask marking the live ones.
    pub fn neighbor_inputs(&self) -> ([Vec<f64>; 4], [bool; 4]) {
        let mut mask = [false; 4];
        let inputs = std::array::from_fn(|i| match &self.neighbors[i] {
            Some(view) => {
                mask[i] = true;
                let mut v = Vec::with_capacity(SLOT_DIM);
                v.extend_from_slice(&view.state);
                v.extend_from_slice(&view.digest);
                v
            }
            None => vec![0.0; SLOT_DIM],
        });
        (inputs, mask)
    }

    pub fn live_neighbor_count(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.own.len() != LOCAL_STATE_DIM {
            return Err(Error::StateLength { expected: LOCAL_STATE_DIM, got: self.own.len() });
        }
        if self.own_digest.len() != ACTION_DIGEST_DIM {
            return Err(Error::StateLength { expected: ACTION_DIGEST_DIM, got: self.own_digest.len() });
        }
        for n in self.neighbors.iter().flatten() {
            if n.state.len() != LOCAL_STATE_DIM {
                return Err(Error::StateLength { expected: LOCAL_STATE_DIM, got: n.state.len() });
            }
            if n.digest.len() != ACTION_DIGEST_DIM {
                return Err(Error::StateLength { expected: ACTION_DIGEST_DIM, got: n.digest.len() });
            }
        }
        Ok(())
    }
}

/// Store-and-forward channel between agents. Each agent publishes its
/// fresh state and the action it is about to run; readers see the newest
/// message that is at least the transmission delay old, with the digest's
/// elapsed component measured from publication to the read instant.
#[derive(Debug, Clone)]
pub struct DigestMailbox {
    delay_s: u32,
    cycle_set: Vec<u32>,
    published: Vec<Vec<(u32, Vec<f64>, HybridAction)>>,
}

impl DigestMailbox {
    pub fn new(agents: usize, delay_s: u32, cycle_set: &[u32]) -> Self {
        DigestMailbox {
            delay_s,
            cycle_set: cycle_set.to_vec(),
            published: vec![Vec::new(); agents],
        }
    }

    /// Record a message sent by `agent` at `now_s`.
    pub fn publish(&mut self, agent: usize, now_s: u32, state: Vec<f64>, action: HybridAction) {
        let inbox = &mut self.published[agent];
        inbox.push((now_s, state, action));
        // A message stays relevant until some newer one has cleared the
        // delay; reads never look further back than that, so drop the rest.
        if let Some(newest_visible) = inbox.iter().rposition(|(sent, _, _)| sent + self.delay_s <= now_s)
        {
            inbox.drain(..newest_visible);
        }
    }

    /// Newest message from `agent` already delivered at `now_s`, if any.
    pub fn latest(&self, agent: usize, now_s: u32) -> Option<NeighborView> {
        self.published[agent]
            .iter()
            .rev()
            .find(|(sent, _, _)| sent + self.delay_s <= now_s)
            .map(|(sent, state, action)| NeighborView {
                state: state.clone(),
                digest: action_digest(action, &self.cycle_set, now_s - sent),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{HybridAction, DEFAULT_CYCLE_SET};
    use approx::assert_relative_eq;

    fn snap(base: u32) -> SensorSnapshot {
        let mut approach = [[0u32; 2]; 4];
        let mut exit = [[0u32; 2]; 4];
        let mut n = base;
        for side in 0..4 {
            for lane in 0..2 {
                approach[side][lane] = n % 14;
                n += 1;
            }
        }
        for side in 0..4 {
            for lane in 0..2 {
                exit[side][lane] = n % 14;
                n += 1;
            }
        }
        SensorSnapshot { approach, exit }
    }

    #[test]
    fn state_flattens_four_snapshots_in_order() {
        let mut acc = SnapshotAccumulator::new(13);
        for base in 0..4 {
            acc.push(&snap(base));
        }
        let s = acc.finish().unwrap();
        assert_eq!(s.len(), LOCAL_STATE_DIM);
        // First frame starts 0,1,2,...; second frame starts at 1.
        assert_relative_eq!(s[0], 0.0);
        assert_relative_eq!(s[1], 1.0 / 13.0);
        assert_relative_eq!(s[7], 7.0 / 13.0);
        assert_relative_eq!(s[8], 8.0 / 13.0, epsilon = 1e-12); // first exit lane
        assert_relative_eq!(s[16], 1.0 / 13.0); // second snapshot begins
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The accumulator drained: next finish without pushes fails.
        assert!(matches!(acc.finish(), Err(Error::StateLength { .. })));
    }

    #[test]
    fn wrong_snapshot_count_is_an_error() {
        let mut acc = SnapshotAccumulator::new(13);
        acc.push(&snap(0));
        acc.push(&snap(1));
        acc.push(&snap(2));
        let err = acc.finish().unwrap_err();
        assert!(matches!(err, Error::StateLength { expected: 64, got: 48 }));
        // And the failed finish cleared the partial buffer.
        assert!(acc.is_empty());
    }

    #[test]
    fn digest_layout_one_hot_splits_elapsed() {
        let a = HybridAction { cycle_s: 96, splits: vec![0.4, 0.3, 0.2, 0.1] };
        let d = action_digest(&a, &DEFAULT_CYCLE_SET, 60);
        assert_eq!(d.len(), ACTION_DIGEST_DIM);
        assert_eq!(&d[..6], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&d[6..10], &[0.4, 0.3, 0.2, 0.1]);
        assert_relative_eq!(d[10], 0.5);
        // Elapsed clamps at the longest admissible cycle.
        let d = action_digest(&a, &DEFAULT_CYCLE_SET, 500);
        assert_relative_eq!(d[10], 1.0);
    }

    #[test]
    fn reward_charges_waiting_and_residual_queues() {
        let stats = CycleWindowStats { detected: 12, wait_s: 120, secondary_queue: 3 };
        assert_relative_eq!(local_reward(&stats, SECONDARY_PENALTY), -10.0 - 30.0);
        // No detections: no waiting term, penalty still applies.
        let stats = CycleWindowStats { detected: 0, wait_s: 0, secondary_queue: 2 };
        assert_relative_eq!(local_reward(&stats, SECONDARY_PENALTY), -20.0);
        // Free-flowing cycle scores zero.
        let stats = CycleWindowStats { detected: 9, wait_s: 0, secondary_queue: 0 };
        assert_relative_eq!(local_reward(&stats, SECONDARY_PENALTY), 0.0);
    }

    #[test]
    fn cooperative_reward_worked_example() {
        // Own -8, two neighbors totalling -16, weight 0.9:
        // (-8 + 0.9 * -16) / 3 = -22.4 / 3.
        let r = cooperative_reward(-8.0, &[-10.0, -6.0], 0.9);
        assert_relative_eq!(r, -22.4 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn cooperative_reward_is_permutation_invariant_and_linear() {
        let ns = [-3.0, 5.0, -7.5, 2.25];
        let perm = [2.25, -7.5, 5.0, -3.0];
        assert_relative_eq!(
            cooperative_reward(-1.5, &ns, 0.9),
            cooperative_reward(-1.5, &perm, 0.9),
            max_relative = 1e-15
        );
        let a = 3.5;
        let scaled: Vec<f64> = ns.iter().map(|r| r * a).collect();
        assert_relative_eq!(
            cooperative_reward(-1.5 * a, &scaled, 0.9),
            a * cooperative_reward(-1.5, &ns, 0.9),
            max_relative = 1e-12
        );
        // Zero weight strips the neighbors' contribution entirely.
        assert_relative_eq!(cooperative_reward(-6.0, &ns, 0.0), -6.0 / 5.0);
        // No neighbors: the reward passes through untouched.
        assert_relative_eq!(cooperative_reward(-6.0, &[], 0.9), -6.0);
    }

    #[test]
    fn neighbor_slots_zero_pad_and_mask() {
        let view = NeighborView { state: vec![0.5; LOCAL_STATE_DIM], digest: vec![0.25; ACTION_DIGEST_DIM] };
        let s = MultiAgentState {
            own: vec![0.1; LOCAL_STATE_DIM],
            own_digest: vec![0.2; ACTION_DIGEST_DIM],
            neighbors: [None, Some(view), None, None],
        };
        s.validate().unwrap();
        assert_eq!(s.live_neighbor_count(), 1);
        assert_eq!(s.own_input().len(), SLOT_DIM);
        let (inputs, mask) = s.neighbor_inputs();
        assert_eq!(mask, [false, true, false, false]);
        assert!(inputs[0].iter().all(|&v| v == 0.0));
        assert_eq!(inputs[1][0], 0.5);
        assert_eq!(inputs[1][LOCAL_STATE_DIM], 0.25);
        assert!(inputs.iter().all(|i| i.len() == SLOT_DIM));
    }

    #[test]
    fn validate_rejects_bad_lengths() {
        let s = MultiAgentState {
            own: vec![0.0; 10],
            own_digest: vec![0.0; ACTION_DIGEST_DIM],
            neighbors: [None, None, None, None],
        };
        assert!(matches!(s.validate(), Err(Error::StateLength { expected: 64, got: 10 })));
    }

    #[test]
    fn mailbox_delivers_after_the_delay() {
        let mut mb = DigestMailbox::new(2, 5, &DEFAULT_CYCLE_SET);
        let a = HybridAction { cycle_s: 60, splits: vec![0.25; 4] };
        mb.publish(0, 10, vec![1.0; LOCAL_STATE_DIM], a.clone());
        assert!(mb.latest(0, 14).is_none(), "still in flight");
        let v = mb.latest(0, 15).expect("delivered at delay");
        assert_relative_eq!(v.digest[10], 5.0 / 120.0);
        assert_eq!(v.state[0], 1.0);
        // Nothing ever published by the other agent.
        assert!(mb.latest(1, 100).is_none());
    }

    #[test]
    fn mailbox_prefers_the_newest_visible_message() {
        let mut mb = DigestMailbox::new(1, 5, &DEFAULT_CYCLE_SET);
        let a60 = HybridAction { cycle_s: 60, splits: vec![0.25; 4] };
        let a96 = HybridAction { cycle_s: 96, splits: vec![0.25; 4] };
        mb.publish(0, 0, vec![0.0; LOCAL_STATE_DIM], a60.clone());
        mb.publish(0, 60, vec![1.0; LOCAL_STATE_DIM], a96.clone());
        // At 62 only the first has cleared the delay.
        let v = mb.latest(0, 62).unwrap();
        assert_eq!(v.digest[0], 1.0, "cycle 60 one-hot");
        assert_relative_eq!(v.digest[10], 62.0 / 120.0);
        // At 65 the newer message takes over, elapsed restarts.
        let v = mb.latest(0, 65).unwrap();
        assert_eq!(v.digest[3], 1.0, "cycle 96 one-hot");
        assert_relative_eq!(v.digest[10], 5.0 / 120.0);
    }

    #[test]
    fn mailbox_with_zero_delay_is_immediate() {
        let mut mb = DigestMailbox::new(1, 0, &DEFAULT_CYCLE_SET);
        let a = HybridAction { cycle_s: 84, splits: vec![0.25; 4] };
        mb.publish(0, 42, vec![0.0; LOCAL_STATE_DIM], a);
        let v = mb.latest(0, 42).unwrap();
        assert_relative_eq!(v.digest[10], 0.0);
    }
}
