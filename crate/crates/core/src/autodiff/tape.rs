use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities entering the cross-entropy are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`, unless they come straight out of a sigmoid,
/// in which case the loss is computed from the logits and needs no clamp.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    /// `a + b` with `b` either the same shape as `a` or one row broadcast.
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Sub { a: NodeId, b: NodeId, broadcast: bool },
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    PairConv {
        x: NodeId,
        mean: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    WeightedMean {
        points: NodeId,
        weights: NodeId,
        denom: f64,
    },
    MaskedBce {
        probs: NodeId,
        targets: Vec<f64>,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of an eagerly evaluated computation.
///
/// Every builder method runs the forward rule immediately and caches the
/// result, so parents always precede children and [`Tape::backward`] can
/// walk the node list in reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter on a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_shape(op: &'static str, node: usize, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            node,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next_index(&self) -> usize {
        self.nodes.len()
    }

    /// A constant input; no gradient is kept for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable input; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Forward value of `id`, computed when the node was recorded.
    pub fn evaluate(&self, id: NodeId) -> Result<Tensor> {
        Ok(self.node(id)?.value.clone())
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id.0).map(|n| &n.op), Some(Op::Param))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                node: self.next_index(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let (a_vals, b_vals) = (av.values(), bv.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a_vals[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let b_row = &b_vals[p * n..(p + 1) * n];
                for (o, &y) in out_row.iter_mut().zip(b_row) {
                    *o += x * y;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    fn binary_broadcast(&mut self, a: NodeId, b: NodeId, sub: bool) -> Result<NodeId> {
        let name = if sub { "sub" } else { "add" };
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let broadcast = if av.shape() == bv.shape() {
            false
        } else if av.shape().len() == 2 && bv.len() == av.cols() && bv.rows() == 1 {
            true
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                node: self.next_index(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        let sign = if sub { -1.0 } else { 1.0 };
        let cols = av.cols();
        let bvals = bv.values();
        let values: Vec<f64> = av
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { bvals[i % cols] } else { bvals[i] };
                x + sign * y
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), values)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let op = if sub {
            Op::Sub { a, b, broadcast }
        } else {
            Op::Add { a, b, broadcast }
        };
        Ok(self.push(op, value, rg))
    }

    /// Elementwise `a + b`; `b` may also be a single row added to every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, false)
    }

    /// Elementwise `a - b`; `b` may also be a single row subtracted from every row of `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, true)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape("mul", self.next_index(), av, bv)?;
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), values)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        let values = av.values().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), values)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Sigmoid(a), value, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a)?.value;
        let values = av.values().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(av.shape().to_vec(), values)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Relu(a), value, rg))
    }

    /// Shared 2x1 filter over `(x[d], mean[d])` pairs:
    /// `out[i, d] = w0 * x[i, d] + w1 * mean[d] + bias[d]`.
    pub fn pair_conv(
        &mut self,
        x: NodeId,
        mean: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let node = self.next_index();
        let xv = &self.node(x)?.value;
        let mv = &self.node(mean)?.value;
        let wv = &self.node(weight)?.value;
        let bv = &self.node(bias)?.value;
        let n = xv.cols();
        let mismatch = |right: &Tensor| Error::ShapeMismatch {
            op: "pair_conv",
            node,
            left: xv.shape().to_vec(),
            right: right.shape().to_vec(),
        };
        if xv.shape().len() != 2 {
            return Err(mismatch(xv));
        }
        if mv.len() != n || mv.rows() != 1 {
            return Err(mismatch(mv));
        }
        if bv.len() != n {
            return Err(mismatch(bv));
        }
        if wv.len() != 2 {
            return Err(mismatch(wv));
        }
        let (w0, w1) = (wv.values()[0], wv.values()[1]);
        let shift: Vec<f64> = mv
            .values()
            .iter()
            .zip(bv.values())
            .map(|(m, b)| w1 * m + b)
            .collect();
        let values = xv
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| w0 * v + shift[i % n])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), values)?;
        let rg = [x, mean, weight, bias]
            .iter()
            .any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(
            Op::PairConv {
                x,
                mean,
                weight,
                bias,
            },
            value,
            rg,
        ))
    }

    /// `sum_i w_i x_i / (sum_i w_i + guard)` over the rows of `points`.
    pub fn weighted_mean(&mut self, points: NodeId, weights: NodeId, guard: f64) -> Result<NodeId> {
        let pv = &self.node(points)?.value;
        let wv = &self.node(weights)?.value;
        if pv.shape().len() != 2 || wv.len() != pv.rows() {
            return Err(Error::ShapeMismatch {
                op: "weighted_mean",
                node: self.next_index(),
                left: pv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let n = pv.cols();
        let mut num = vec![0.0; n];
        let mut total = 0.0;
        for (row, &w) in pv.iter_rows().zip(wv.values()) {
            total += w;
            for (acc, &x) in num.iter_mut().zip(row) {
                *acc += w * x;
            }
        }
        let denom = total + guard;
        for v in &mut num {
            *v /= denom;
        }
        let rg = self.nodes[points.0].requires_grad || self.nodes[weights.0].requires_grad;
        Ok(self.push(
            Op::WeightedMean {
                points,
                weights,
                denom,
            },
            Tensor::vector(num),
            rg,
        ))
    }

    /// `-sum_{mask} [y ln p + (1 - y) ln(1 - p)]` with clamped `p`.
    pub fn masked_bce(&mut self, probs: NodeId, targets: &[f64], mask: &[bool]) -> Result<NodeId> {
        let pv = &self.node(probs)?.value;
        if targets.len() != pv.len() || mask.len() != pv.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_bce",
                node: self.next_index(),
                left: pv.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let mut loss = 0.0;
        if let Some(z) = self.sigmoid_input(probs) {
            // ln p = -softplus(-z), ln(1 - p) = -softplus(z)
            for ((&z, &y), &m) in self.nodes[z.0].value.values().iter().zip(targets).zip(mask) {
                if m {
                    loss += y * softplus(-z) + (1.0 - y) * softplus(z);
                }
            }
        } else {
            for ((&p, &y), &m) in pv.values().iter().zip(targets).zip(mask) {
                if m {
                    let p = clamp_prob(p);
                    loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                }
            }
        }
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            Op::MaskedBce {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Which side of every non-smooth switch (rectifier inputs, probability
    /// clamps) the recorded computation sits on. Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn switch_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    pattern.extend(self.nodes[a.0].value.values().iter().map(|&x| x > 0.0))
                }
                Op::MaskedBce { probs, .. } if self.sigmoid_input(*probs).is_some() => {}
                Op::MaskedBce { probs, mask, .. } => {
                    let p = self.nodes[probs.0].value.values();
                    pattern.extend(
                        p.iter()
                            .zip(mask)
                            .filter(|(_, &m)| m)
                            .map(|(&p, _)| p == clamp_prob(p)),
                    );
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar output. Returns one gradient per
    /// parameter node; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    result.grads.insert(NodeId(idx), t);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].requires_grad {
                        let bvals = bv.values();
                        self.accumulate(&mut grads, *a, |ga| {
                            for i in 0..m {
                                let g_row = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let b_row = &bvals[p * n..(p + 1) * n];
                                    ga[i * k + p] +=
                                        g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        });
                    }
                    if self.nodes[b.0].requires_grad {
                        let avals = av.values();
                        self.accumulate(&mut grads, *b, |gb| {
                            for i in 0..m {
                                let g_row = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let x = avals[i * k + p];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                        *o += x * y;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) {
                        -1.0
                    } else {
                        1.0
                    };
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(&mut grads, *a, |ga| {
                            for (o, &x) in ga.iter_mut().zip(&g) {
                                *o += x;
                            }
                        });
                    }
                    if self.nodes[b.0].requires_grad {
                        let cols = node.value.cols();
                        let broadcast = *broadcast;
                        self.accumulate(&mut grads, *b, |gb| {
                            for (i, &x) in g.iter().enumerate() {
                                let j = if broadcast { i % cols } else { i };
                                gb[j] += sign * x;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.values();
                    let bv = self.nodes[b.0].value.values();
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(&mut grads, *a, |ga| {
                            for ((o, &x), &y) in ga.iter_mut().zip(&g).zip(bv) {
                                *o += x * y;
                            }
                        });
                    }
                    if self.nodes[b.0].requires_grad {
                        self.accumulate(&mut grads, *b, |gb| {
                            for ((o, &x), &y) in gb.iter_mut().zip(&g).zip(av) {
                                *o += x * y;
                            }
                        });
                    }
                }
                Op::Sigmoid(a) => {
                    let s = node.value.values();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((o, &x), &s) in ga.iter_mut().zip(&g).zip(s) {
                            *o += x * s * (1.0 - s);
                        }
                    });
                }
                Op::Relu(a) => {
                    let input = self.nodes[a.0].value.values();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((o, &x), &z) in ga.iter_mut().zip(&g).zip(input) {
                            if z > 0.0 {
                                *o += x;
                            }
                        }
                    });
                }
                Op::PairConv {
                    x,
                    mean,
                    weight,
                    bias,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let mv = self.nodes[mean.0].value.values();
                    let wv = self.nodes[weight.0].value.values();
                    let n = xv.cols();
                    let (w0, w1) = (wv[0], wv[1]);
                    // column sums of the upstream gradient feed mean and bias
                    let mut col = vec![0.0; n];
                    for (i, &v) in g.iter().enumerate() {
                        col[i % n] += v;
                    }
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(&mut grads, *x, |gx| {
                            for (o, &v) in gx.iter_mut().zip(&g) {
                                *o += w0 * v;
                            }
                        });
                    }
                    if self.nodes[mean.0].requires_grad {
                        self.accumulate(&mut grads, *mean, |gm| {
                            for (o, &c) in gm.iter_mut().zip(&col) {
                                *o += w1 * c;
                            }
                        });
                    }
                    if self.nodes[bias.0].requires_grad {
                        self.accumulate(&mut grads, *bias, |gb| {
                            for (o, &c) in gb.iter_mut().zip(&col) {
                                *o += c;
                            }
                        });
                    }
                    if self.nodes[weight.0].requires_grad {
                        let d0: f64 = g.iter().zip(xv.values()).map(|(a, b)| a * b).sum();
                        let d1: f64 = col.iter().zip(mv).map(|(a, b)| a * b).sum();
                        self.accumulate(&mut grads, *weight, |gw| {
                            gw[0] += d0;
                            gw[1] += d1;
                        });
                    }
                }
                Op::WeightedMean {
                    points,
                    weights,
                    denom,
                } => {
                    let pv = &self.nodes[points.0].value;
                    let wv = self.nodes[weights.0].value.values();
                    let mean = node.value.values();
                    let n = pv.cols();
                    if self.nodes[weights.0].requires_grad {
                        self.accumulate(&mut grads, *weights, |gw| {
                            for (i, row) in pv.iter_rows().enumerate() {
                                let dot: f64 = row
                                    .iter()
                                    .zip(mean)
                                    .zip(&g)
                                    .map(|((x, m), gd)| (x - m) * gd)
                                    .sum();
                                gw[i] += dot / denom;
                            }
                        });
                    }
                    if self.nodes[points.0].requires_grad {
                        self.accumulate(&mut grads, *points, |gp| {
                            for (i, &w) in wv.iter().enumerate() {
                                let scale = w / denom;
                                for d in 0..n {
                                    gp[i * n + d] += scale * g[d];
                                }
                            }
                        });
                    }
                }
                Op::MaskedBce {
                    probs,
                    targets,
                    mask,
                } => {
                    let pv = self.nodes[probs.0].value.values();
                    let upstream = g[0];
                    if let Some(z) = self.sigmoid_input(*probs) {
                        self.accumulate(&mut grads, z, |gz| {
                            for i in 0..pv.len() {
                                if mask[i] {
                                    gz[i] += upstream * (pv[i] - targets[i]);
                                }
                            }
                        });
                        continue;
                    }
                    self.accumulate(&mut grads, *probs, |gp| {
                        for i in 0..pv.len() {
                            let p = pv[i];
                            if !mask[i] || p != clamp_prob(p) {
                                continue;
                            }
                            let y = targets[i];
                            gp[i] += upstream * (-(y / p) + (1.0 - y) / (1.0 - p));
                        }
                    });
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                result
                    .grads
                    .entry(NodeId(idx))
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(result)
    }

    fn sigmoid_input(&self, id: NodeId) -> Option<NodeId> {
        match self.nodes[id.0].op {
            Op::Sigmoid(z) => Some(z),
            _ => None,
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        let len = self.nodes[id.0].value.len();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.5, -2.0, 3.0, 4.25]).unwrap());
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.evaluate(out).unwrap(), *tape.value(a));
    }

    #[test]
    fn sigmoid_midpoint_and_slope() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).values(), &[0.5]);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[0.25]);
    }

    #[test]
    fn bce_on_saturated_sigmoid_keeps_its_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![-60.0, 60.0, 0.0]));
        let p = tape.sigmoid(z).unwrap();
        let loss = tape.masked_bce(p, &[1.0, 0.0, 1.0], &[true, true, false]).unwrap();
        assert!((tape.value(loss).values()[0] - 120.0).abs() < 1e-9);
        let g = tape.backward(loss).unwrap();
        let g = g.get(z).unwrap().values().to_vec();
        assert!((g[0] + 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn product_rule_leaf() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.leaf(Tensor::scalar(5.0));
        let p = tape.mul(a, b).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(a).unwrap().values(), &[5.0]);
        // constants never show up in the gradient map
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn weighted_mean_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![0.0, 1.0, 10.0]).unwrap());
        let w = tape.leaf(Tensor::vector(vec![1.0, 1.0, 0.0]));
        let m = tape.weighted_mean(x, w, 1e-12).unwrap();
        assert!((tape.value(m).values()[0] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn weighted_mean_one_hot_is_exact_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 2, vec![0.25, 1.0, -3.5, 7.0, 2.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
        // without a guard the division is by exactly one
        let m = tape.weighted_mean(x, w, 0.0).unwrap();
        assert_eq!(tape.value(m).values(), &[-3.5, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_node_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch {
                op,
                node,
                left,
                right,
            }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sigmoid(a).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::NotScalar(_))));
        let other = Tape::new();
        assert!(matches!(other.backward(s), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = a*a + a consumed three times; dy/da = 2a + 1.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(1.75));
        let sq = tape.mul(a, a).unwrap();
        let y = tape.add(sq, a).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().values(), &[2.0 * 1.75 + 1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sigmoid(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().values(), &[0.0, 0.0]);
    }
}
