//! Attention-pooled networks over agent slots, their parameters, and the
//! optimizer steps that train them.
//!
//! Both learned heads share one shape: every slot (the agent's own
//! observation-plus-digest vector and one per live neighbor) passes through
//! a shared dense embedding; multi-head dot-product attention, with the
//! agent's own embedding as the query, pools the slots into one context
//! vector; a two-layer trunk on the concatenated own embedding and context
//! produces the output — a scalar action value or the phase-split logits.
//! Neighbor embeddings, keys, and values can be built once and shared
//! across several forwards that differ only in the agent's own slot, which
//! is how the candidate cycle lengths are scored cheaply.

use rand::Rng;

use crate::nn::tape::{NodeId, Tape};
use crate::rng::stream_rng;

/// One named parameter block, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An ordered collection of named tensors; the unit the optimizer,
/// target-blend, and checkpoint code all operate on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(self.index(name).is_none(), "duplicate tensor {name}");
        self.tensors.push(Tensor { name: name.to_string(), rows, cols, data });
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.index(name).unwrap_or_else(|| panic!("no tensor {name}"))]
    }

    /// Total scalar parameter count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same names and shapes, all zeros; the gradient buffer shape.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), rows: t.rows, cols: t.cols, data: vec![0.0; t.len()] })
                .collect(),
        }
    }

    /// One line per tensor, name and shape; the architecture fingerprint
    /// input.
    pub fn schema(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!("{}:{}x{};", t.name, t.rows, t.cols));
        }
        s
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn same_shape(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols)
    }
}

/// Scale gradients down to `max_norm` if they exceed it; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for t in &mut grads.tensors {
            for v in &mut t.data {
                *v *= f;
            }
        }
    }
    norm
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) {
    debug_assert!(params.same_shape(grads), "gradient shape mismatch");
    for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
}

/// Polyak blend toward the online parameters:
/// `target = (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) {
    debug_assert!(target.same_shape(online), "target shape mismatch");
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        for (tv, ov) in t.data.iter_mut().zip(&o.data) {
            *tv = (1.0 - tau) * *tv + tau * ov;
        }
    }
}

/// First/second-moment state for the adaptive optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamState {
    pub fn new(shape: &ParamSet) -> Self {
        AdamState { m: shape.zeros_like(), v: shape.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        debug_assert!(params.same_shape(grads), "gradient shape mismatch");
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(&mut self.v.tensors))
        {
            for i in 0..p.data.len() {
                m.data[i] = B1 * m.data[i] + (1.0 - B1) * g.data[i];
                v.data[i] = B2 * v.data[i] + (1.0 - B2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Shape of one attention network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    /// Length of every slot input.
    pub slot_in: usize,
    /// Embedding width shared by all slots.
    pub embed: usize,
    /// Attention heads.
    pub heads: usize,
    /// Key and query width per head.
    pub attn: usize,
    /// Value width per head.
    pub head_out: usize,
    /// Trunk hidden width.
    pub hidden: usize,
    /// Output width: 1 for an action value, phase count for split logits.
    pub out: usize,
}

impl NetDims {
    pub fn pooled(&self) -> usize {
        self.heads * self.head_out
    }

    pub fn trunk_in(&self) -> usize {
        self.embed + self.pooled()
    }
}

/// Negative-side slope of every rectifier in the crate.
pub const LEAK: f64 = 0.01;

/// Embedding, attention, and trunk parameters plus the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet {
    pub dims: NetDims,
    pub params: ParamSet,
}

/// Tape leaves for one registration of a network's parameters, aligned
/// with `params.tensors`.
pub struct NetNodes {
    pub leaves: Vec<NodeId>,
}

/// Candidate-invariant half of a forward pass: embeddings, keys, and
/// values of the live neighbor slots, plus which directions they came from.
pub struct NeighborPool {
    /// Direction indices of the live slots, in slot order.
    pub live: Vec<usize>,
    embeds: Vec<NodeId>,
    /// `keys[head][slot]`, aligned with `live`.
    keys: Vec<Vec<NodeId>>,
    vals: Vec<Vec<NodeId>>,
}

/// A completed forward: the output node and the attention distribution
/// per head over `[own, live neighbors...]`.
pub struct ForwardOut {
    pub out: NodeId,
    pub attn: Vec<NodeId>,
}

impl AttentionNet {
    /// Fresh network with uniform He-style initialization, deterministic in
    /// `seed` and `label` (one random stream per tensor).
    pub fn new(dims: NetDims, seed: u64, label: &str) -> Self {
        let mut params = ParamSet::default();
        let dense = |p: &mut ParamSet, name: &str, rows: usize, cols: usize, idx: &mut u64| {
            let lim = (6.0 / cols as f64).sqrt();
            let mut rng = stream_rng(seed, &format!("init/{label}"), &[*idx]);
            *idx += 1;
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect();
            p.push(name, rows, cols, data);
            p.push(&name.replace(".w", ".b"), rows, 1, vec![0.0; rows]);
        };

        let mut idx = 0;
        dense(&mut params, "embed.w", dims.embed, dims.slot_in, &mut idx);
        for h in 0..dims.heads {
            let lim = (6.0 / dims.embed as f64).sqrt();
            for (part, rows) in [("wq", dims.attn), ("wk", dims.attn), ("wv", dims.head_out)] {
                let mut rng = stream_rng(seed, &format!("init/{label}"), &[idx]);
                idx += 1;
                let data: Vec<f64> = (0..rows * dims.embed).map(|_| rng.gen_range(-lim..lim)).collect();
                params.push(&format!("attn{h}.{part}"), rows, dims.embed, data);
            }
        }
        dense(&mut params, "trunk.w1", dims.hidden, dims.trunk_in(), &mut idx);
        dense(&mut params, "trunk.w2", dims.hidden, dims.hidden, &mut idx);
        dense(&mut params, "trunk.w3", dims.out, dims.hidden, &mut idx);

        AttentionNet { dims, params }
    }

    /// Rebuild from stored parameters; shapes must match `dims`.
    pub fn from_params(dims: NetDims, params: ParamSet) -> crate::Result<Self> {
        let expect = AttentionNet::new(dims, 0, "shape-probe");
        if !expect.params.same_shape(&params) {
            return Err(crate::Error::ShapeMismatch {
                expected: expect.params.schema(),
                got: params.schema(),
            });
        }
        Ok(AttentionNet { dims, params })
    }

    /// Put every parameter tensor on the tape once.
    pub fn register(&self, tape: &mut Tape) -> NetNodes {
        NetNodes { leaves: self.params.tensors.iter().map(|t| tape.leaf(&t.data)).collect() }
    }

    fn node(&self, nodes: &NetNodes, name: &str) -> NodeId {
        nodes.leaves[self.params.index(name).unwrap_or_else(|| panic!("no tensor {name}"))]
    }

    fn embed_slot(&self, tape: &mut Tape, nodes: &NetNodes, slot: NodeId) -> NodeId {
        let w = self.node(nodes, "embed.w");
        let b = self.node(nodes, "embed.b");
        let a = tape.affine(w, slot, b, self.dims.embed);
        tape.leaky_relu(a, LEAK)
    }

    /// Embed the live neighbor slots and precompute their per-head keys
    /// and values, shared by every forward against this pool.
    pub fn embed_neighbors(
        &self,
        tape: &mut Tape,
        nodes: &NetNodes,
        inputs: &[Vec<f64>; 4],
        mask: [bool; 4],
    ) -> NeighborPool {
        let mut pool = NeighborPool {
            live: Vec::new(),
            embeds: Vec::new(),
            keys: vec![Vec::new(); self.dims.heads],
            vals: vec![Vec::new(); self.dims.heads],
        };
        for dir in 0..4 {
            if !mask[dir] {
                continue;
            }
            debug_assert_eq!(inputs[dir].len(), self.dims.slot_in, "slot shape mismatch");
            let slot = tape.leaf(&inputs[dir]);
            let e = self.embed_slot(tape, nodes, slot);
            for h in 0..self.dims.heads {
                let k = tape.matvec(self.node(nodes, &format!("attn{h}.wk")), e, self.dims.attn);
                let v = tape.matvec(self.node(nodes, &format!("attn{h}.wv")), e, self.dims.head_out);
                pool.keys[h].push(k);
                pool.vals[h].push(v);
            }
            pool.live.push(dir);
            pool.embeds.push(e);
        }
        pool
    }

    /// Run the head given an own-slot node already on the tape (so
    /// gradients can flow into a generated part of the input) and a
    /// prepared neighbor pool.
    pub fn forward_pooled(
        &self,
        tape: &mut Tape,
        nodes: &NetNodes,
        pool: &NeighborPool,
        own_slot: NodeId,
    ) -> ForwardOut {
        let e_own = self.embed_slot(tape, nodes, own_slot);

        let mut heads = Vec::with_capacity(self.dims.heads);
        let mut attn = Vec::with_capacity(self.dims.heads);
        for h in 0..self.dims.heads {
            let q = tape.matvec(self.node(nodes, &format!("attn{h}.wq")), e_own, self.dims.attn);
            let k_own = tape.matvec(self.node(nodes, &format!("attn{h}.wk")), e_own, self.dims.attn);
            let v_own = tape.matvec(self.node(nodes, &format!("attn{h}.wv")), e_own, self.dims.head_out);

            let mut scores = vec![tape.dot(k_own, q)];
            for &k in &pool.keys[h] {
                scores.push(tape.dot(k, q));
            }
            let stacked = tape.concat(&scores);
            let alpha = tape.softmax(stacked);

            let mut values = vec![v_own];
            values.extend_from_slice(&pool.vals[h]);
            heads.push(tape.weighted_sum(alpha, &values));
            attn.push(alpha);
        }

        let pooled = tape.concat(&heads);
        let u = tape.concat(&[e_own, pooled]);
        let z1a = tape.affine(self.node(nodes, "trunk.w1"), u, self.node(nodes, "trunk.b1"), self.dims.hidden);
        let z1 = tape.leaky_relu(z1a, LEAK);
        let z2a = tape.affine(self.node(nodes, "trunk.w2"), z1, self.node(nodes, "trunk.b2"), self.dims.hidden);
        let z2 = tape.leaky_relu(z2a, LEAK);
        let out = tape.affine(self.node(nodes, "trunk.w3"), z2, self.node(nodes, "trunk.b3"), self.dims.out);
        ForwardOut { out, attn }
    }

    /// Whole forward pass from raw slot data.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &NetNodes,
        own: &[f64],
        neighbors: &[Vec<f64>; 4],
        mask: [bool; 4],
    ) -> ForwardOut {
        debug_assert_eq!(own.len(), self.dims.slot_in, "own slot shape mismatch");
        let pool = self.embed_neighbors(tape, nodes, neighbors, mask);
        let own_slot = tape.leaf(own);
        self.forward_pooled(tape, nodes, &pool, own_slot)
    }

    /// Copy gradients off the tape into a parameter-shaped buffer,
    /// accumulating into `grads`.
    pub fn accumulate_grads(&self, tape: &Tape, nodes: &NetNodes, grads: &mut ParamSet) {
        debug_assert!(grads.same_shape(&self.params));
        for (t, &leaf) in grads.tensors.iter_mut().zip(&nodes.leaves) {
            for (g, &tg) in t.data.iter_mut().zip(tape.grad(leaf)) {
                *g += tg;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> NetDims {
        NetDims { slot_in: 75, embed: 8, heads: 2, attn: 4, head_out: 4, hidden: 8, out: 1 }
    }

    fn random_slots(seed: u64) -> (Vec<f64>, [Vec<f64>; 4]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let own = vec(75);
        let neighbors = [vec(75), vec(75), vec(75), vec(75)];
        (own, neighbors)
    }

    #[test]
    fn parameter_layout_and_count() {
        let net = AttentionNet::new(small_dims(), 1, "q");
        let names: Vec<&str> = net.params.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "embed.w", "embed.b", "attn0.wq", "attn0.wk", "attn0.wv", "attn1.wq", "attn1.wk",
                "attn1.wv", "trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2", "trunk.w3", "trunk.b3",
            ]
        );
        // 8x75+8 embed, 2 heads x (4x8 + 4x8 + 4x8), 8x16+8, 8x8+8, 1x8+1.
        assert_eq!(net.params.len(), 608 + 192 + 136 + 72 + 9);
        assert!(net.params.tensor("embed.b").data.iter().all(|&v| v == 0.0));
        let lim = (6.0f64 / 75.0).sqrt();
        assert!(net.params.tensor("embed.w").data.iter().all(|&v| v.abs() < lim));
        assert!(net.params.tensor("embed.w").data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_deterministic_and_label_separated() {
        let a = AttentionNet::new(small_dims(), 9, "q");
        let b = AttentionNet::new(small_dims(), 9, "q");
        assert_eq!(a.params, b.params);
        let c = AttentionNet::new(small_dims(), 9, "pi");
        assert_ne!(a.params.tensor("embed.w").data, c.params.tensor("embed.w").data);
        let d = AttentionNet::new(small_dims(), 10, "q");
        assert_ne!(a.params.tensor("embed.w").data, d.params.tensor("embed.w").data);
    }

    #[test]
    fn from_params_checks_shape() {
        let net = AttentionNet::new(small_dims(), 1, "q");
        assert!(AttentionNet::from_params(small_dims(), net.params.clone()).is_ok());
        let mut wrong = net.params.clone();
        wrong.tensors[0].rows = 9;
        wrong.tensors[0].cols = 75;
        wrong.tensors[0].data = vec![0.0; 9 * 75];
        assert!(AttentionNet::from_params(small_dims(), wrong).is_err());
    }

    #[test]
    fn masked_neighbors_never_touch_the_output() {
        let net = AttentionNet::new(small_dims(), 3, "q");
        let (own, mut neighbors) = random_slots(5);
        let mask = [true, false, true, false];
        let run = |own: &[f64], nb: &[Vec<f64>; 4]| {
            let mut tape = Tape::new();
            let nodes = net.register(&mut tape);
            let f = net.forward(&mut tape, &nodes, own, nb, mask);
            tape.value(f.out).to_vec()
        };
        let base = run(&own, &neighbors);
        neighbors[1] = vec![99.0; 75];
        neighbors[3] = vec![-42.0; 75];
        assert_eq!(base, run(&own, &neighbors), "masked slots must be inert, bit for bit");
    }

    #[test]
    fn fully_masked_pool_reduces_to_self_attention() {
        let net = AttentionNet::new(small_dims(), 3, "q");
        let (own, neighbors) = random_slots(6);
        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let f = net.forward(&mut tape, &nodes, &own, &neighbors, [false; 4]);
        assert!(tape.value(f.out)[0].is_finite());
        for alpha in &f.attn {
            assert_eq!(tape.value(*alpha), &[1.0], "single-slot softmax is a point mass");
        }
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let net = AttentionNet::new(small_dims(), 4, "q");
        let (own, neighbors) = random_slots(7);
        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let f = net.forward(&mut tape, &nodes, &own, &neighbors, [true; 4]);
        for alpha in &f.attn {
            let a = tape.value(*alpha);
            assert_eq!(a.len(), 5, "own slot plus four neighbors");
            assert!(a.iter().all(|&v| v > 0.0));
            assert_relative_eq!(a.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn pooled_forward_matches_unshared_forward() {
        // Scoring several own-slot candidates against one shared neighbor
        // pool must agree exactly with independent full forwards.
        let net = AttentionNet::new(small_dims(), 8, "q");
        let (own_a, neighbors) = random_slots(9);
        let (own_b, _) = random_slots(10);
        let mask = [true, true, false, true];

        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let pool = net.embed_neighbors(&mut tape, &nodes, &neighbors, mask);
        let slot_a = tape.leaf(&own_a);
        let slot_b = tape.leaf(&own_b);
        let fa = net.forward_pooled(&mut tape, &nodes, &pool, slot_a);
        let fb = net.forward_pooled(&mut tape, &nodes, &pool, slot_b);
        let shared = (tape.value(fa.out)[0], tape.value(fb.out)[0]);

        let solo = |own: &[f64]| {
            let mut t = Tape::new();
            let n = net.register(&mut t);
            let f = net.forward(&mut t, &n, own, &neighbors, mask);
            t.value(f.out)[0]
        };
        assert_eq!(shared.0, solo(&own_a));
        assert_eq!(shared.1, solo(&own_b));
    }

    /// Straight-line reimplementation of the forward pass with plain loops;
    /// the independent reference the taped version must reproduce.
    fn reference_forward(
        net: &AttentionNet,
        own: &[f64],
        neighbors: &[Vec<f64>; 4],
        mask: [bool; 4],
    ) -> Vec<f64> {
        let d = net.dims;
        let mat = |name: &str| net.params.tensor(name);
        let mv = |t: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..t.rows)
                .map(|r| (0..t.cols).map(|c| t.data[r * t.cols + c] * x[c]).sum())
                .collect()
        };
        let leaky = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter().map(|x| if x > 0.0 { x } else { LEAK * x }).collect()
        };
        let embed = |slot: &[f64]| -> Vec<f64> {
            let mut h = mv(mat("embed.w"), slot);
            for (i, b) in mat("embed.b").data.iter().enumerate() {
                h[i] += b;
            }
            leaky(h)
        };

        let e_own = embed(own);
        let pool: Vec<Vec<f64>> = (0..4).filter(|&i| mask[i]).map(|i| embed(&neighbors[i])).collect();

        let mut u = e_own.clone();
        let mut pooled = Vec::new();
        for h in 0..d.heads {
            let q = mv(mat(&format!("attn{h}.wq")), &e_own);
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for e in std::iter::once(&e_own).chain(&pool) {
                let k = mv(mat(&format!("attn{h}.wk")), e);
                scores.push(k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>());
                values.push(mv(mat(&format!("attn{h}.wv")), e));
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut head = vec![0.0; d.head_out];
            for (e, v) in exps.iter().zip(&values) {
                for (hv, vv) in head.iter_mut().zip(v) {
                    *hv += e / z * vv;
                }
            }
            pooled.extend_from_slice(&head);
        }
        u.extend_from_slice(&pooled);

        let mut z1 = mv(mat("trunk.w1"), &u);
        for (i, b) in mat("trunk.b1").data.iter().enumerate() {
            z1[i] += b;
        }
        let z1 = leaky(z1);
        let mut z2 = mv(mat("trunk.w2"), &z1);
        for (i, b) in mat("trunk.b2").data.iter().enumerate() {
            z2[i] += b;
        }
        let z2 = leaky(z2);
        let mut out = mv(mat("trunk.w3"), &z2);
        for (i, b) in mat("trunk.b3").data.iter().enumerate() {
            out[i] += b;
        }
        out
    }

    #[test]
    fn taped_forward_matches_straight_line_reference() {
        for seed in 0..5 {
            let dims = NetDims { slot_in: 75, embed: 8, heads: 2, attn: 4, head_out: 4, hidden: 8, out: 4 };
            let net = AttentionNet::new(dims, 20 + seed, "q");
            let (own, neighbors) = random_slots(seed);
            let mask = [seed % 2 == 0, true, seed % 3 == 0, false];
            let mut tape = Tape::new();
            let nodes = net.register(&mut tape);
            let f = net.forward(&mut tape, &nodes, &own, &neighbors, mask);
            let reference = reference_forward(&net, &own, &neighbors, mask);
            let taped = tape.value(f.out);
            assert_eq!(taped.len(), 4);
            for (a, b) in taped.iter().zip(&reference) {
                assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let dims = NetDims { slot_in: 10, embed: 6, heads: 2, attn: 3, head_out: 3, hidden: 6, out: 1 };
        let mut net = AttentionNet::new(dims, 31, "q");
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let own = vec(10);
        let neighbors = [vec(10), vec(10), vec(10), vec(10)];
        let mask = [true, true, false, true];

        let eval = |net: &AttentionNet| -> (f64, ParamSet) {
            let mut tape = Tape::new();
            let nodes = net.register(&mut tape);
            let f = net.forward(&mut tape, &nodes, &own, &neighbors, mask);
            let root = f.out;
            tape.backward(root);
            let mut grads = net.params.zeros_like();
            net.accumulate_grads(&tape, &nodes, &mut grads);
            (tape.scalar(root), grads)
        };

        let (_, analytic) = eval(&net);
        let h = 1e-6;
        for ti in 0..net.params.tensors.len() {
            // Probe a spread of coordinates in every tensor.
            let n = net.params.tensors[ti].data.len();
            for i in (0..n).step_by(7.max(n / 5)) {
                let orig = net.params.tensors[ti].data[i];
                net.params.tensors[ti].data[i] = orig + h;
                let (hi, _) = eval(&net);
                net.params.tensors[ti].data[i] = orig - h;
                let (lo, _) = eval(&net);
                net.params.tensors[ti].data[i] = orig;
                let fd = (hi - lo) / (2.0 * h);
                assert_relative_eq!(
                    analytic.tensors[ti].data[i],
                    fd,
                    max_relative = 1e-5,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn optimizer_steps_do_what_they_say() {
        let mut p = ParamSet::default();
        p.push("a", 1, 2, vec![1.0, -2.0]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![0.5, 1.0];

        let mut sgd = p.clone();
        sgd_step(&mut sgd, &g, 0.1);
        assert_eq!(sgd.tensors[0].data, vec![1.0 - 0.05, -2.0 - 0.1]);

        // Norm sqrt(1.25) stays under 10: untouched, norm reported.
        let norm = clip_grad_norm(&mut g, 10.0);
        assert_relative_eq!(norm, 1.25f64.sqrt());
        assert_eq!(g.tensors[0].data, vec![0.5, 1.0]);
        // Cap at 0.5: rescaled to that norm.
        let norm = clip_grad_norm(&mut g, 0.5);
        assert_relative_eq!(norm, 1.25f64.sqrt());
        assert_relative_eq!(g.l2_norm(), 0.5, max_relative = 1e-12);

        let mut target = p.zeros_like();
        soft_update(&mut target, &p, 0.01);
        assert_relative_eq!(target.tensors[0].data[0], 0.01);
        assert_relative_eq!(target.tensors[0].data[1], -0.02);
        soft_update(&mut target, &p, 1.0);
        assert_eq!(target.tensors[0].data, p.tensors[0].data);
    }

    #[test]
    fn adam_first_step_is_signwise() {
        let mut p = ParamSet::default();
        p.push("a", 1, 3, vec![0.0, 0.0, 0.0]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![3.0, -0.2, 0.0];
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 0.001);
        // Bias-corrected first step moves by ~lr in the gradient direction.
        assert_relative_eq!(p.tensors[0].data[0], -0.001, max_relative = 1e-6);
        assert_relative_eq!(p.tensors[0].data[1], 0.001, max_relative = 1e-6);
        assert_eq!(p.tensors[0].data[2], 0.0);
    }
}
