//! The parameterized deep Q-learner behind the `cyclight` controller.
//!
//! Each learner holds a pair of networks: an actor maps the multi-agent
//! state to phase splits (the continuous action), and a critic scores
//! each admissible cycle length at those splits (the discrete action),
//! both attending over neighbor slots. A [`Fleet`] runs one independent
//! learner per intersection by default, or a single learner serving all
//! of them when parameter sharing is on. Every intersection keeps its
//! own replay buffer of one-step transitions; multi-step returns are
//! assembled at sample time by chaining consecutive decisions, stopping
//! at episode boundaries. Updates are event-driven: each completed cycle
//! pushes a transition and triggers one gradient step on each network,
//! followed by a Polyak blend into the target copies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::{
    clip_grad_norm, sgd_step, soft_update, AdamState, AttentionNet, NetDims, Tape,
};
use crate::pamdp::{MultiAgentState, ACTION_DIGEST_DIM, SLOT_DIM};
use crate::rng::stream_rng;

/// Everything that shapes the learner: architecture, horizon, rates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PdqnSettings {
    /// Admissible cycle lengths, ascending.
    pub cycle_set: Vec<u32>,
    pub n_phases: usize,
    /// Shared embedding width.
    pub embed: usize,
    pub heads: usize,
    /// Key/query width per head.
    pub attn: usize,
    /// Value width per head.
    pub head_out: usize,
    /// Trunk hidden width.
    pub hidden: usize,
    pub gamma: f64,
    /// Return horizon: rewards chained before bootstrapping.
    pub n_step: usize,
    pub batch: usize,
    pub lr_critic: f64,
    pub lr_actor: f64,
    /// Polyak rate for the target copies.
    pub tau: f64,
    pub grad_clip: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Decisions over which exploration anneals linearly.
    pub eps_decay_decisions: u64,
    pub replay_capacity: usize,
    /// Adaptive optimizer instead of plain gradient descent.
    pub use_adam: bool,
}

impl Default for PdqnSettings {
    fn default() -> Self {
        PdqnSettings {
            cycle_set: crate::signal::DEFAULT_CYCLE_SET.to_vec(),
            n_phases: 4,
            embed: 32,
            heads: 4,
            attn: 16,
            head_out: 16,
            hidden: 64,
            gamma: 0.99,
            n_step: 4,
            batch: 128,
            lr_critic: 0.001,
            lr_actor: 0.001,
            tau: 0.01,
            grad_clip: 10.0,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_decisions: 10_000,
            replay_capacity: 20_000,
            use_adam: false,
        }
    }
}

impl PdqnSettings {
    pub fn critic_dims(&self) -> NetDims {
        NetDims {
            slot_in: SLOT_DIM,
            embed: self.embed,
            heads: self.heads,
            attn: self.attn,
            head_out: self.head_out,
            hidden: self.hidden,
            out: 1,
        }
    }

    pub fn actor_dims(&self) -> NetDims {
        NetDims { out: self.n_phases, ..self.critic_dims() }
    }
}

/// One decision and its outcome, as stored in replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: u32,
    pub agent: usize,
    /// Decision index within the episode; consecutive values chain.
    pub cycle: u32,
    pub state: MultiAgentState,
    /// Index of the executed cycle length in the admissible set.
    pub k_index: usize,
    /// Executed splits (the continuous action, already on the simplex).
    pub splits: Vec<f64>,
    /// Cooperative reward observed for the executed cycle.
    pub reward: f64,
    pub next_state: MultiAgentState,
    /// Episode ended with this cycle: never bootstrap past it.
    pub terminal: bool,
}

/// Fixed-capacity ring of one agent's transitions, in push order.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    cap: usize,
    buf: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        ReplayBuffer { cap, buf: VecDeque::with_capacity(cap.min(4096)) }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    /// Chain up to `n` consecutive decisions starting at `idx`: stops at an
    /// episode boundary or the newest entry. Never empty.
    pub fn window(&self, idx: usize, n: usize) -> Vec<&Transition> {
        let mut chain = vec![&self.buf[idx]];
        while chain.len() < n {
            let cur = chain[chain.len() - 1];
            if cur.terminal {
                break;
            }
            match self.buf.get(idx + chain.len()) {
                Some(next)
                    if next.episode == cur.episode
                        && next.agent == cur.agent
                        && next.cycle == cur.cycle + 1 =>
                {
                    chain.push(next)
                }
                _ => break,
            }
        }
        chain
    }
}

/// Discounted return over chained rewards plus an optional bootstrap value
/// discounted one step further.
pub fn n_step_return(rewards: &[f64], gamma: f64, bootstrap: Option<f64>) -> f64 {
    let mut y = 0.0;
    let mut g = 1.0;
    for r in rewards {
        y += g * r;
        g *= gamma;
    }
    if let Some(v) = bootstrap {
        y += g * v;
    }
    y
}

/// What a decision looked like from the inside; exported for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDiag {
    /// Critic value per admissible cycle length at the chosen splits.
    pub q_values: Vec<f64>,
    /// Mean attention weight, over heads, on the own slot.
    pub attn_own: f64,
    /// Mean attention weight per neighbor direction (zero where absent).
    pub attn_by_dir: [f64; 4],
    pub epsilon: f64,
    pub explored: bool,
}

/// One gradient step's numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Mean negated sum of critic values at the actor's splits.
    pub actor_objective: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
}

/// One actor-critic pair plus the replay buffers it learns from.
#[derive(Debug, Clone)]
pub struct PdqnLearner {
    pub critic: AttentionNet,
    pub critic_target: AttentionNet,
    pub actor: AttentionNet,
    pub actor_target: AttentionNet,
    pub replay: Vec<ReplayBuffer>,
    pub settings: PdqnSettings,
    /// Training decisions taken; drives the exploration schedule.
    pub decisions: u64,
    pub updates: u64,
    adam_critic: Option<AdamState>,
    adam_actor: Option<AdamState>,
    rng: ChaCha8Rng,
}

impl PdqnLearner {
    pub fn new(settings: PdqnSettings, seed: u64, agents: usize) -> Self {
        let critic = AttentionNet::new(settings.critic_dims(), seed, "critic");
        let actor = AttentionNet::new(settings.actor_dims(), seed, "actor");
        let adam_critic = settings.use_adam.then(|| AdamState::new(&critic.params));
        let adam_actor = settings.use_adam.then(|| AdamState::new(&actor.params));
        PdqnLearner {
            critic_target: critic.clone(),
            actor_target: actor.clone(),
            critic,
            actor,
            replay: (0..agents).map(|_| ReplayBuffer::new(settings.replay_capacity)).collect(),
            settings,
            decisions: 0,
            updates: 0,
            adam_critic,
            adam_actor,
            rng: stream_rng(seed, "explore", &[]),
        }
    }

    /// Position of the exploration noise stream, for exact resume.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Current exploration rate: linear from start to end over the decay
    /// horizon, then flat.
    pub fn epsilon(&self) -> f64 {
        let s = &self.settings;
        if s.eps_decay_decisions == 0 {
            return s.eps_end;
        }
        let frac = (self.decisions as f64 / s.eps_decay_decisions as f64).min(1.0);
        s.eps_start + (s.eps_end - s.eps_start) * frac
    }

    /// Critic own-slot input for a candidate action: the observed state
    /// with the candidate's cycle one-hot and splits in the digest slots,
    /// keeping the observed elapsed share.
    fn candidate_slot(&self, state: &MultiAgentState, k_index: usize, splits: &[f64]) -> Vec<f64> {
        let mut slot = Vec::with_capacity(SLOT_DIM);
        slot.extend_from_slice(&state.own);
        for i in 0..self.settings.cycle_set.len() {
            slot.push(if i == k_index { 1.0 } else { 0.0 });
        }
        slot.extend_from_slice(splits);
        slot.push(state.own_digest[ACTION_DIGEST_DIM - 1]);
        slot
    }

    /// Actor splits and per-cycle critic values for `state` under the given
    /// networks (online or target).
    fn evaluate(
        &self,
        actor: &AttentionNet,
        critic: &AttentionNet,
        state: &MultiAgentState,
    ) -> (Vec<f64>, Vec<f64>, f64, [f64; 4]) {
        let (neighbor_inputs, mask) = state.neighbor_inputs();
        let mut tape = Tape::new();

        let actor_nodes = actor.register(&mut tape);
        let pi = actor.forward(&mut tape, &actor_nodes, &state.own_input(), &neighbor_inputs, mask);
        let logits = pi.out;
        let splits_node = tape.softmax(logits);
        let splits = tape.value(splits_node).to_vec();

        let critic_nodes = critic.register(&mut tape);
        let pool = critic.embed_neighbors(&mut tape, &critic_nodes, &neighbor_inputs, mask);
        let mut q_values = Vec::with_capacity(self.settings.cycle_set.len());
        let mut attn_own = 0.0;
        let mut attn_by_dir = [0.0; 4];
        let mut best = 0usize;
        for k in 0..self.settings.cycle_set.len() {
            let slot = self.candidate_slot(state, k, &splits);
            let slot_node = tape.leaf(&slot);
            let f = critic.forward_pooled(&mut tape, &critic_nodes, &pool, slot_node);
            let q = tape.value(f.out)[0];
            if q > q_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) {
                best = k;
            }
            q_values.push(q);
            if k == best {
                // Keep the attention pattern of the current best candidate.
                attn_own = 0.0;
                attn_by_dir = [0.0; 4];
                for alpha in &f.attn {
                    let a = tape.value(*alpha);
                    attn_own += a[0] / f.attn.len() as f64;
                    for (slot_i, &dir) in pool.live.iter().enumerate() {
                        attn_by_dir[dir] += a[slot_i + 1] / f.attn.len() as f64;
                    }
                }
            }
        }
        (splits, q_values, attn_own, attn_by_dir)
    }

    /// Greedy cycle index among ties: the shortest cycle wins.
    fn argmax_smallest(q_values: &[f64]) -> usize {
        let mut best = 0;
        for (i, &q) in q_values.iter().enumerate() {
            if q > q_values[best] {
                best = i;
            }
        }
        best
    }

    /// Choose an action for `state`. With `explore` the selection is
    /// epsilon-greedy and advances the schedule; without, it is the pure
    /// greedy policy and leaves all training state untouched.
    pub fn select_action(&mut self, state: &MultiAgentState, explore: bool) -> (usize, Vec<f64>, ActionDiag) {
        let (splits, q_values, attn_own, attn_by_dir) =
            self.evaluate(&self.actor, &self.critic, state);
        let epsilon = if explore { self.epsilon() } else { 0.0 };
        let mut explored = false;
        let (k_index, splits) = if explore {
            self.decisions += 1;
            if self.rng.gen::<f64>() < epsilon {
                explored = true;
                let k = self.rng.gen_range(0..self.settings.cycle_set.len());
                // Uniform on the simplex: normalized exponentials.
                let mut x: Vec<f64> =
                    (0..self.settings.n_phases).map(|_| -self.rng.gen::<f64>().ln()).collect();
                let z: f64 = x.iter().sum();
                for v in &mut x {
                    *v /= z;
                }
                (k, x)
            } else {
                (Self::argmax_smallest(&q_values), splits)
            }
        } else {
            (Self::argmax_smallest(&q_values), splits)
        };
        let diag = ActionDiag { q_values, attn_own, attn_by_dir, epsilon, explored };
        (k_index, splits, diag)
    }

    /// Critic values at the actor's splits; diagnostics and tests.
    pub fn q_values(&self, state: &MultiAgentState) -> Vec<f64> {
        self.evaluate(&self.actor, &self.critic, state).1
    }

    pub fn push_transition(&mut self, t: Transition) {
        debug_assert!(t.agent < self.replay.len());
        debug_assert_eq!(t.splits.len(), self.settings.n_phases);
        self.replay[t.agent].push(t);
    }

    /// Multi-step target for one sampled chain, scored by the target nets.
    fn target_return(&self, chain: &[&Transition]) -> f64 {
        let rewards: Vec<f64> = chain.iter().map(|t| t.reward).collect();
        let last = chain[chain.len() - 1];
        let bootstrap = if last.terminal {
            None
        } else {
            let (_, q_values, _, _) =
                self.evaluate(&self.actor_target, &self.critic_target, &last.next_state);
            Some(q_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        n_step_return(&rewards, self.settings.gamma, bootstrap)
    }

    /// One event-driven gradient step fed by `agent`'s replay; `None` until
    /// the buffer holds a full batch.
    pub fn update(&mut self, agent: usize) -> Result<Option<UpdateStats>> {
        let s = self.settings.clone();
        if self.replay[agent].len() < s.batch {
            return Ok(None);
        }
        let idxs: Vec<usize> =
            (0..s.batch).map(|_| self.rng.gen_range(0..self.replay[agent].len())).collect();

        // Targets first, against the frozen copies.
        let targets: Vec<f64> = {
            let buf = &self.replay[agent];
            idxs.iter().map(|&i| self.target_return(&buf.window(i, s.n_step))).collect()
        };

        // Critic pass: mean squared Bellman error over the batch.
        let mut tape = Tape::new();
        let critic_nodes = self.critic.register(&mut tape);
        let mut sample_losses = Vec::with_capacity(s.batch);
        for (&i, &y) in idxs.iter().zip(&targets) {
            let t = &self.replay[agent].buf[i];
            let (neighbor_inputs, mask) = t.state.neighbor_inputs();
            let pool = self.critic.embed_neighbors(&mut tape, &critic_nodes, &neighbor_inputs, mask);
            let slot = self.candidate_slot(&t.state, t.k_index, &t.splits);
            let slot_node = tape.leaf(&slot);
            let f = self.critic.forward_pooled(&mut tape, &critic_nodes, &pool, slot_node);
            let diff = tape.affine_const(f.out, 1.0, -y);
            let sq = tape.square(diff);
            let half = tape.affine_const(sq, 0.5, 0.0);
            sample_losses.push(half);
        }
        let critic_loss_node = tape.mean(&sample_losses);
        let critic_loss = tape.scalar(critic_loss_node);
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        tape.backward(critic_loss_node);
        let mut critic_grads = self.critic.params.zeros_like();
        self.critic.accumulate_grads(&tape, &critic_nodes, &mut critic_grads);
        let critic_grad_norm = clip_grad_norm(&mut critic_grads, s.grad_clip);

        // Actor pass: push critic values up through the splits, batch mean
        // of the negated sum over cycle lengths. The critic's parameters
        // participate in the graph but only the actor moves.
        let mut tape = Tape::new();
        let actor_nodes = self.actor.register(&mut tape);
        let critic_nodes = self.critic.register(&mut tape);
        let mut sample_objs = Vec::with_capacity(s.batch);
        for &i in &idxs {
            let t = &self.replay[agent].buf[i];
            let (neighbor_inputs, mask) = t.state.neighbor_inputs();

            let pi = self.actor.forward(&mut tape, &actor_nodes, &t.state.own_input(), &neighbor_inputs, mask);
            let splits_node = tape.softmax(pi.out);

            let pool = self.critic.embed_neighbors(&mut tape, &critic_nodes, &neighbor_inputs, mask);
            let own_state = tape.leaf(&t.state.own);
            let elapsed = tape.leaf(&t.state.own_digest[ACTION_DIGEST_DIM - 1..]);
            let mut q_nodes = Vec::with_capacity(s.cycle_set.len());
            for k in 0..s.cycle_set.len() {
                let onehot: Vec<f64> =
                    (0..s.cycle_set.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
                let onehot_node = tape.leaf(&onehot);
                let slot = tape.concat(&[own_state, onehot_node, splits_node, elapsed]);
                let f = self.critic.forward_pooled(&mut tape, &critic_nodes, &pool, slot);
                q_nodes.push(f.out);
            }
            let stacked = tape.concat(&q_nodes);
            let total = tape.sum(stacked);
            sample_objs.push(tape.affine_const(total, -1.0, 0.0));
        }
        let actor_obj_node = tape.mean(&sample_objs);
        let actor_objective = tape.scalar(actor_obj_node);
        if !actor_objective.is_finite() {
            return Err(Error::NonFinite("actor objective"));
        }
        tape.backward(actor_obj_node);
        let mut actor_grads = self.actor.params.zeros_like();
        self.actor.accumulate_grads(&tape, &actor_nodes, &mut actor_grads);
        let actor_grad_norm = clip_grad_norm(&mut actor_grads, s.grad_clip);

        match &mut self.adam_critic {
            Some(a) => a.step(&mut self.critic.params, &critic_grads, s.lr_critic),
            None => sgd_step(&mut self.critic.params, &critic_grads, s.lr_critic),
        }
        match &mut self.adam_actor {
            Some(a) => a.step(&mut self.actor.params, &actor_grads, s.lr_actor),
            None => sgd_step(&mut self.actor.params, &actor_grads, s.lr_actor),
        }
        soft_update(&mut self.critic_target.params, &self.critic.params, s.tau);
        soft_update(&mut self.actor_target.params, &self.actor.params, s.tau);
        self.updates += 1;

        Ok(Some(UpdateStats { critic_loss, actor_objective, critic_grad_norm, actor_grad_norm }))
    }
}

/// The learners driving a grid: an independent parameter set per
/// intersection by default, or one set shared by all of them when
/// `shared` is on (each intersection keeps its own replay buffer
/// either way).
#[derive(Debug, Clone)]
pub struct Fleet {
    pub learners: Vec<PdqnLearner>,
    pub shared: bool,
    agents: usize,
}

impl Fleet {
    pub fn new(settings: PdqnSettings, master_seed: u64, agents: usize, shared: bool) -> Self {
        assert!(agents > 0, "fleet needs at least one intersection");
        let learners = if shared {
            vec![PdqnLearner::new(settings, master_seed, agents)]
        } else {
            (0..agents)
                .map(|i| {
                    let seed = crate::rng::substream(master_seed, "learner", &[i as u64]);
                    PdqnLearner::new(settings.clone(), seed, 1)
                })
                .collect()
        };
        Fleet { learners, shared, agents }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// (learner index, replay-buffer index) serving this intersection.
    fn route(&self, agent: usize) -> (usize, usize) {
        debug_assert!(agent < self.agents, "agent {agent} out of range");
        if self.shared {
            (0, agent)
        } else {
            (agent, 0)
        }
    }

    pub fn learner(&self, agent: usize) -> &PdqnLearner {
        &self.learners[self.route(agent).0]
    }

    pub fn select_action(
        &mut self,
        agent: usize,
        state: &MultiAgentState,
        explore: bool,
    ) -> (usize, Vec<f64>, ActionDiag) {
        let (l, _) = self.route(agent);
        self.learners[l].select_action(state, explore)
    }

    pub fn push_transition(&mut self, mut t: Transition) {
        let (l, buffer) = self.route(t.agent);
        t.agent = buffer;
        self.learners[l].push_transition(t);
    }

    pub fn update(&mut self, agent: usize) -> Result<Option<UpdateStats>> {
        let (l, buffer) = self.route(agent);
        self.learners[l].update(buffer)
    }

    pub fn total_decisions(&self) -> u64 {
        self.learners.iter().map(|l| l.decisions).sum()
    }

    pub fn total_updates(&self) -> u64 {
        self.learners.iter().map(|l| l.updates).sum()
    }

    /// Hash of every parameter bit in every learner; unchanged hash
    /// means untouched parameters.
    pub fn param_hash(&self) -> u64 {
        let mut h = crate::rng::fnv1a(b"fleet-params");
        for learner in &self.learners {
            for set in [
                &learner.critic.params,
                &learner.critic_target.params,
                &learner.actor.params,
                &learner.actor_target.params,
            ] {
                for t in &set.tensors {
                    for v in &t.data {
                        h = crate::rng::fnv1a_extend(h, &v.to_le_bytes());
                    }
                }
            }
        }
        h
    }
}
