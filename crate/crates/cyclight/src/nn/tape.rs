//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation evaluates eagerly, appends its result to one contiguous
//! value arena, and records how to push gradients back to its inputs. A
//! single backward sweep over the recorded nodes then fills a parallel
//! gradient arena. The op set is exactly what the networks in this crate
//! need: dense affine maps, leaky rectifiers, dot-product attention pieces
//! (dot, softmax, weighted sum), concatenation, and the scalar glue that
//! assembles losses.

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Parameter or input; gradients accumulate but nothing propagates.
    Leaf,
    /// Row-major `rows x cols` matrix (leaf or node) times a vector.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    /// Elementwise sum of two same-length vectors.
    Add { a: NodeId, b: NodeId },
    /// max(x, 0) + slope * min(x, 0).
    LeakyRelu { x: NodeId, slope: f64 },
    /// Vectors laid end to end.
    Concat { parts: Vec<NodeId> },
    /// Scalar product of two same-length vectors.
    Dot { a: NodeId, b: NodeId },
    /// Numerically stable softmax over the whole input.
    Softmax { x: NodeId },
    /// `sum_i weights[i] * items[i]` over same-length item vectors.
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    /// `a * x + c` was computed; only the slope matters going back.
    AffineConst { x: NodeId, a: f64 },
    /// Elementwise square.
    Square { x: NodeId },
    /// Scalar sum of all components.
    Sum { x: NodeId },
    /// Scalar mean of scalar nodes; the batch reducer.
    Mean { parts: Vec<NodeId> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// Gradient tape: build a computation with the op methods, call
/// [`Tape::backward`] on a scalar root, then read gradients off any node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        let node = &self.nodes[n];
        &self.values[node.off..node.off + node.len]
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        let v = self.value(n);
        debug_assert_eq!(v.len(), 1, "scalar read from a vector node");
        v[0]
    }

    /// Gradient of the last backward root with respect to node `n`.
    pub fn grad(&self, n: NodeId) -> &[f64] {
        debug_assert_eq!(self.grads.len(), self.values.len(), "backward not run");
        let node = &self.nodes[n];
        &self.grads[node.off..node.off + node.len]
    }

    fn push(&mut self, op: Op, data: Vec<f64>) -> NodeId {
        let off = self.values.len();
        let len = data.len();
        self.values.extend_from_slice(&data);
        self.nodes.push(Node { op, off, len });
        self.nodes.len() - 1
    }

    /// A leaf holding external data: an input or a parameter.
    pub fn leaf(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf, data.to_vec())
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize) -> NodeId {
        let cols = self.nodes[x].len;
        assert_eq!(self.nodes[w].len, rows * cols, "matrix shape mismatch");
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            out[r] = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec { w, x, rows, cols }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].len, self.nodes[b].len, "add shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add { a, b }, out)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        self.push(Op::LeakyRelu { x, slope }, out)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(Op::Concat { parts: parts.to_vec() }, out)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].len, self.nodes[b].len, "dot shape mismatch");
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Op::Dot { a, b }, vec![s])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        self.push(Op::Softmax { x }, out)
    }

    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        assert_eq!(self.nodes[weights].len, items.len(), "one weight per item");
        let d = self.nodes[items[0]].len;
        let mut out = vec![0.0; d];
        for (i, &item) in items.iter().enumerate() {
            assert_eq!(self.nodes[item].len, d, "item shape mismatch");
            let w = self.value(weights)[i];
            for (o, v) in out.iter_mut().zip(self.value(item)) {
                *o += w * v;
            }
        }
        self.push(Op::WeightedSum { weights, items: items.to_vec() }, out)
    }

    pub fn affine_const(&mut self, x: NodeId, a: f64, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| a * v + c).collect();
        self.push(Op::AffineConst { x, a }, out)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * v).collect();
        self.push(Op::Square { x }, out)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::Sum { x }, vec![s])
    }

    pub fn mean(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut s = 0.0;
        for &p in parts {
            debug_assert_eq!(self.nodes[p].len, 1, "mean expects scalar parts");
            s += self.value(p)[0];
        }
        self.push(Op::Mean { parts: parts.to_vec() }, vec![s / parts.len() as f64])
    }

    /// Dense affine layer: `W x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId, rows: usize) -> NodeId {
        let wx = self.matvec(w, x, rows);
        self.add(wx, b)
    }

    /// Backpropagate from a scalar root; gradients of every node become
    /// readable through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root].len, 1, "backward needs a scalar root");
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        self.grads[self.nodes[root].off] = 1.0;

        for id in (0..=root).rev() {
            let Node { op, off, len } = self.nodes[id].clone();
            match op {
                Op::Leaf => {}
                Op::MatVec { w, x, rows, cols } => {
                    let woff = self.nodes[w].off;
                    let xoff = self.nodes[x].off;
                    for r in 0..rows {
                        let g = self.grads[off + r];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            self.grads[woff + r * cols + c] += g * self.values[xoff + c];
                            self.grads[xoff + c] += g * self.values[woff + r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (ao, bo) = (self.nodes[a].off, self.nodes[b].off);
                    for i in 0..len {
                        let g = self.grads[off + i];
                        self.grads[ao + i] += g;
                        self.grads[bo + i] += g;
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xo = self.nodes[x].off;
                    for i in 0..len {
                        let pass = if self.values[xo + i] > 0.0 { 1.0 } else { slope };
                        self.grads[xo + i] += self.grads[off + i] * pass;
                    }
                }
                Op::Concat { parts } => {
                    let mut cursor = off;
                    for p in parts {
                        let (po, pl) = (self.nodes[p].off, self.nodes[p].len);
                        for i in 0..pl {
                            self.grads[po + i] += self.grads[cursor + i];
                        }
                        cursor += pl;
                    }
                }
                Op::Dot { a, b } => {
                    let g = self.grads[off];
                    let (ao, bo) = (self.nodes[a].off, self.nodes[b].off);
                    let n = self.nodes[a].len;
                    for i in 0..n {
                        self.grads[ao + i] += g * self.values[bo + i];
                        self.grads[bo + i] += g * self.values[ao + i];
                    }
                }
                Op::Softmax { x } => {
                    let xo = self.nodes[x].off;
                    let mut inner = 0.0;
                    for i in 0..len {
                        inner += self.grads[off + i] * self.values[off + i];
                    }
                    for i in 0..len {
                        let y = self.values[off + i];
                        self.grads[xo + i] += y * (self.grads[off + i] - inner);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wo = self.nodes[weights].off;
                    for (i, item) in items.iter().enumerate() {
                        let io = self.nodes[*item].off;
                        let w = self.values[wo + i];
                        let mut dw = 0.0;
                        for j in 0..len {
                            let g = self.grads[off + j];
                            dw += g * self.values[io + j];
                            self.grads[io + j] += w * g;
                        }
                        self.grads[wo + i] += dw;
                    }
                }
                Op::AffineConst { x, a } => {
                    let xo = self.nodes[x].off;
                    for i in 0..len {
                        self.grads[xo + i] += a * self.grads[off + i];
                    }
                }
                Op::Square { x } => {
                    let xo = self.nodes[x].off;
                    for i in 0..len {
                        self.grads[xo + i] += 2.0 * self.values[xo + i] * self.grads[off + i];
                    }
                }
                Op::Sum { x } => {
                    let g = self.grads[off];
                    let (xo, xl) = (self.nodes[x].off, self.nodes[x].len);
                    for i in 0..xl {
                        self.grads[xo + i] += g;
                    }
                }
                Op::Mean { parts } => {
                    let g = self.grads[off] / parts.len() as f64;
                    for p in parts {
                        self.grads[self.nodes[p].off] += g;
                    }
                }
            }
        }
    }
}
