//! Reverse-mode record of one scalar loss evaluation.
//!
//! The tape is a small typed expression list over batched scalars and
//! 3-vectors (one lane per batch element). Network evaluations enter as a
//! primitive whose reverse rule is [`FieldNetwork::backward_batch`], so a
//! loss that consumes `∇f` at positions that themselves depend on the
//! parameters (the projected points) backpropagates exactly, including
//! the mixed second-derivative terms.
//!
//! Buffers are 64-bit; the network primitive converts at its boundary and
//! sums in the documented lane order, so backward passes are
//! deterministic and repeatable: running [`Tape::backward`] twice yields
//! identical gradients.

use crate::field::{EPS_GRAD, FALLBACK_NORMAL};
use crate::geom::Vec3;
use crate::net::{BatchCache, FieldNetwork, ParamGrad};

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValRef(usize);

#[derive(Debug, Clone)]
enum Payload {
    S(Vec<f64>),
    V(Vec<Vec3>),
}

impl Payload {
    fn lanes(&self) -> usize {
        match self {
            Payload::S(v) => v.len(),
            Payload::V(v) => v.len(),
        }
    }

    fn zeros_like(&self) -> Payload {
        match self {
            Payload::S(v) => Payload::S(vec![0.0; v.len()]),
            Payload::V(v) => Payload::V(vec![Vec3::zeros(); v.len()]),
        }
    }

    fn as_s(&self) -> &[f64] {
        match self {
            Payload::S(v) => v,
            Payload::V(_) => panic!("expected scalar payload"),
        }
    }

    fn as_v(&self) -> &[Vec3] {
        match self {
            Payload::V(v) => v,
            Payload::S(_) => panic!("expected vector payload"),
        }
    }
}

#[derive(Debug)]
enum Op {
    ConstS,
    ConstV,
    /// Batched field evaluation; `grad_node` is the paired gradient output.
    NetValue { x: ValRef, cache: usize, grad_node: usize },
    NetGrad,
    Add(ValRef, ValRef),
    Sub(ValRef, ValRef),
    Mul(ValRef, ValRef),
    Scale(ValRef, f64),
    AddConst(ValRef, f64),
    Neg(ValRef),
    Abs(ValRef),
    Exp(ValRef),
    Square(ValRef),
    AddV(ValRef, ValRef),
    SubV(ValRef, ValRef),
    ScaleV { s: ValRef, v: ValRef },
    Dot(ValRef, ValRef),
    Norm(ValRef),
    /// Unit vector with a constant fallback direction below `eps`.
    UnitOrConst { v: ValRef, eps: f64, degenerate: Vec<bool> },
    /// Unit vector falling back to another node's lane below `eps`.
    UnitOrOther { v: ValRef, other: ValRef, eps: f64, degenerate: Vec<bool> },
    GatherS { src: ValRef, idx: Vec<usize> },
    GatherV { src: ValRef, idx: Vec<usize> },
    /// Sum of the first `count` lanes, yielding one lane.
    SumPrefix { src: ValRef, count: usize },
    /// Weighted sum of single-lane scalars, yielding one lane.
    WeightedSum(Vec<(ValRef, f64)>),
}

struct Node {
    op: Op,
    out: Payload,
}

/// Counters for degenerate events observed while building the tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DegeneracyCounts {
    /// Lanes where a field gradient fell below `EPS_GRAD`.
    pub zero_gradient: usize,
    /// Lanes where an averaged normal fell back because the two unit
    /// normals were opposed.
    pub opposed_normals: usize,
}

/// Reverse-mode record of one loss evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    caches: Vec<BatchCache>,
    output: Option<ValRef>,
    /// Lanes at or beyond this limit do not count degeneracy events
    /// (used to avoid double counting re-evaluated guest lanes in shards).
    count_limit: usize,
    pub counts: DegeneracyCounts,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            caches: Vec::new(),
            output: None,
            count_limit: usize::MAX,
            counts: DegeneracyCounts::default(),
        }
    }

    /// Restricts degeneracy counting to the first `limit` lanes.
    pub fn set_count_limit(&mut self, limit: usize) {
        self.count_limit = limit;
    }

    fn push(&mut self, op: Op, out: Payload) -> ValRef {
        self.nodes.push(Node { op, out });
        ValRef(self.nodes.len() - 1)
    }

    pub fn lanes(&self, r: ValRef) -> usize {
        self.nodes[r.0].out.lanes()
    }

    /// Scalar lane values of a node.
    pub fn scalars(&self, r: ValRef) -> &[f64] {
        self.nodes[r.0].out.as_s()
    }

    /// Vector lane values of a node.
    pub fn vectors(&self, r: ValRef) -> &[Vec3] {
        self.nodes[r.0].out.as_v()
    }

    /// Value of a single-lane scalar node.
    pub fn scalar(&self, r: ValRef) -> f64 {
        let s = self.scalars(r);
        assert_eq!(s.len(), 1, "expected a single-lane scalar");
        s[0]
    }

    pub fn set_output(&mut self, r: ValRef) {
        assert_eq!(self.lanes(r), 1, "loss output must be a single lane");
        self.output = Some(r);
    }

    pub fn const_s(&mut self, v: Vec<f64>) -> ValRef {
        self.push(Op::ConstS, Payload::S(v))
    }

    pub fn const_v(&mut self, v: Vec<Vec3>) -> ValRef {
        self.push(Op::ConstV, Payload::V(v))
    }

    /// Evaluates the network on the lanes of `x`; returns (value, gradient).
    pub fn net_eval(&mut self, net: &FieldNetwork, x: ValRef) -> (ValRef, ValRef) {
        let xs = self.vectors(x).to_vec();
        let (eval, cache) = net.eval_batch_cached(&xs);
        self.caches.push(cache);
        let cache_id = self.caches.len() - 1;
        let value_node = self.nodes.len();
        let grad_node = value_node + 1;
        let f = self.push(
            Op::NetValue { x, cache: cache_id, grad_node },
            Payload::S(eval.values),
        );
        let g = self.push(Op::NetGrad, Payload::V(eval.grads));
        (f, g)
    }

    fn zip_s(&mut self, a: ValRef, b: ValRef, op: Op, f: impl Fn(f64, f64) -> f64) -> ValRef {
        let out: Vec<f64> = self
            .scalars(a)
            .iter()
            .zip(self.scalars(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        assert_eq!(self.lanes(a), self.lanes(b));
        self.push(op, Payload::S(out))
    }

    pub fn add(&mut self, a: ValRef, b: ValRef) -> ValRef {
        self.zip_s(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: ValRef, b: ValRef) -> ValRef {
        self.zip_s(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: ValRef, b: ValRef) -> ValRef {
        self.zip_s(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: ValRef, k: f64) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), Payload::S(out))
    }

    pub fn add_const(&mut self, a: ValRef, k: f64) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| x + k).collect();
        self.push(Op::AddConst(a, k), Payload::S(out))
    }

    pub fn neg(&mut self, a: ValRef) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| -x).collect();
        self.push(Op::Neg(a), Payload::S(out))
    }

    pub fn abs(&mut self, a: ValRef) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), Payload::S(out))
    }

    pub fn exp(&mut self, a: ValRef) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), Payload::S(out))
    }

    pub fn square(&mut self, a: ValRef) -> ValRef {
        let out: Vec<f64> = self.scalars(a).iter().map(|x| x * x).collect();
        self.push(Op::Square(a), Payload::S(out))
    }

    pub fn add_v(&mut self, a: ValRef, b: ValRef) -> ValRef {
        assert_eq!(self.lanes(a), self.lanes(b));
        let out: Vec<Vec3> =
            self.vectors(a).iter().zip(self.vectors(b)).map(|(x, y)| x + y).collect();
        self.push(Op::AddV(a, b), Payload::V(out))
    }

    pub fn sub_v(&mut self, a: ValRef, b: ValRef) -> ValRef {
        assert_eq!(self.lanes(a), self.lanes(b));
        let out: Vec<Vec3> =
            self.vectors(a).iter().zip(self.vectors(b)).map(|(x, y)| x - y).collect();
        self.push(Op::SubV(a, b), Payload::V(out))
    }

    pub fn scale_v(&mut self, s: ValRef, v: ValRef) -> ValRef {
        assert_eq!(self.lanes(s), self.lanes(v));
        let out: Vec<Vec3> =
            self.scalars(s).iter().zip(self.vectors(v)).map(|(k, x)| x * *k).collect();
        self.push(Op::ScaleV { s, v }, Payload::V(out))
    }

    pub fn dot(&mut self, a: ValRef, b: ValRef) -> ValRef {
        assert_eq!(self.lanes(a), self.lanes(b));
        let out: Vec<f64> =
            self.vectors(a).iter().zip(self.vectors(b)).map(|(x, y)| x.dot(y)).collect();
        self.push(Op::Dot(a, b), Payload::S(out))
    }

    pub fn norm(&mut self, a: ValRef) -> ValRef {
        let out: Vec<f64> = self.vectors(a).iter().map(|x| x.norm()).collect();
        self.push(Op::Norm(a), Payload::S(out))
    }

    /// Unit direction with the documented constant fallback; counts
    /// degenerate lanes as zero-gradient events.
    pub fn unit_or_const(&mut self, v: ValRef) -> ValRef {
        let vals = self.vectors(v);
        let mut degenerate = vec![false; vals.len()];
        let mut out = Vec::with_capacity(vals.len());
        for (i, x) in vals.iter().enumerate() {
            let n = x.norm();
            if n < EPS_GRAD {
                degenerate[i] = true;
                if i < self.count_limit {
                    self.counts.zero_gradient += 1;
                }
                out.push(Vec3::from(FALLBACK_NORMAL));
            } else {
                out.push(x / n);
            }
        }
        self.push(Op::UnitOrConst { v, eps: EPS_GRAD, degenerate }, Payload::V(out))
    }

    /// Unit direction of `v`, falling back to `other`'s lane when the norm
    /// is below `eps`; counts fallbacks as opposed-normal events.
    pub fn unit_or_other(&mut self, v: ValRef, other: ValRef, eps: f64) -> ValRef {
        assert_eq!(self.lanes(v), self.lanes(other));
        let vals = self.vectors(v);
        let fallback = self.vectors(other);
        let mut degenerate = vec![false; vals.len()];
        let mut out = Vec::with_capacity(vals.len());
        for (i, x) in vals.iter().enumerate() {
            let n = x.norm();
            if n < eps {
                degenerate[i] = true;
                if i < self.count_limit {
                    self.counts.opposed_normals += 1;
                }
                out.push(fallback[i]);
            } else {
                out.push(x / n);
            }
        }
        self.push(Op::UnitOrOther { v, other, eps, degenerate }, Payload::V(out))
    }

    pub fn gather_s(&mut self, src: ValRef, idx: Vec<usize>) -> ValRef {
        let vals = self.scalars(src);
        let out: Vec<f64> = idx.iter().map(|i| vals[*i]).collect();
        self.push(Op::GatherS { src, idx }, Payload::S(out))
    }

    pub fn gather_v(&mut self, src: ValRef, idx: Vec<usize>) -> ValRef {
        let vals = self.vectors(src);
        let out: Vec<Vec3> = idx.iter().map(|i| vals[*i]).collect();
        self.push(Op::GatherV { src, idx }, Payload::V(out))
    }

    /// Sum of the first `count` lanes.
    pub fn sum_prefix(&mut self, src: ValRef, count: usize) -> ValRef {
        assert!(count <= self.lanes(src));
        let total: f64 = self.scalars(src)[..count].iter().sum();
        self.push(Op::SumPrefix { src, count }, Payload::S(vec![total]))
    }

    pub fn sum(&mut self, src: ValRef) -> ValRef {
        let count = self.lanes(src);
        self.sum_prefix(src, count)
    }

    pub fn mean(&mut self, src: ValRef) -> ValRef {
        let n = self.lanes(src);
        let s = self.sum(src);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of single-lane scalars.
    pub fn weighted_sum(&mut self, terms: Vec<(ValRef, f64)>) -> ValRef {
        let mut total = 0.0;
        for (r, w) in &terms {
            total += self.scalar(*r) * w;
        }
        self.push(Op::WeightedSum(terms), Payload::S(vec![total]))
    }

    /// Reverse pass: gradient of the output with respect to every network
    /// parameter. The network must be the one the tape was built against.
    pub fn backward(&self, net: &FieldNetwork) -> ParamGrad {
        let output = self.output.expect("tape output not set");
        let mut grad = ParamGrad::zeros_like(net);
        let mut adj: Vec<Option<Payload>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Payload::S(vec![1.0]));

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            let bar = match adj[id].take() {
                Some(b) => b,
                None => continue,
            };
            match &node.op {
                Op::ConstS | Op::ConstV | Op::NetGrad => {}
                Op::NetValue { x, cache, grad_node } => {
                    let vbar = bar.as_s().to_vec();
                    let zero = vec![Vec3::zeros(); vbar.len()];
                    let gbar = match adj[*grad_node].take() {
                        Some(p) => p.as_v().to_vec(),
                        None => zero,
                    };
                    let xbar = net.backward_batch(&self.caches[*cache], &vbar, &gbar, &mut grad);
                    if !matches!(self.nodes[x.0].op, Op::ConstS | Op::ConstV) {
                        let slot = Self::slot(&mut adj, &self.nodes[x.0].out, x.0);
                        if let Payload::V(acc) = slot {
                            for (a, d) in acc.iter_mut().zip(xbar.iter()) {
                                *a += d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let s = bar.as_s();
                    self.accum_s(&mut adj, *a, s, |x| x);
                    self.accum_s(&mut adj, *b, s, |x| x);
                }
                Op::Sub(a, b) => {
                    let s = bar.as_s();
                    self.accum_s(&mut adj, *a, s, |x| x);
                    self.accum_s(&mut adj, *b, s, |x| -x);
                }
                Op::Mul(a, b) => {
                    let s = bar.as_s();
                    let av = self.scalars(*a).to_vec();
                    let bv = self.scalars(*b).to_vec();
                    self.accum_s_lanes(&mut adj, *a, s, |i, x| x * bv[i]);
                    self.accum_s_lanes(&mut adj, *b, s, |i, x| x * av[i]);
                }
                Op::Scale(a, k) => {
                    let s = bar.as_s();
                    let k = *k;
                    self.accum_s(&mut adj, *a, s, move |x| x * k);
                }
                Op::AddConst(a, _) => {
                    self.accum_s(&mut adj, *a, bar.as_s(), |x| x);
                }
                Op::Neg(a) => {
                    self.accum_s(&mut adj, *a, bar.as_s(), |x| -x);
                }
                Op::Abs(a) => {
                    let av = self.scalars(*a).to_vec();
                    self.accum_s_lanes(&mut adj, *a, bar.as_s(), |i, x| {
                        if av[i] > 0.0 {
                            x
                        } else if av[i] < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = node.out.as_s().to_vec();
                    self.accum_s_lanes(&mut adj, *a, bar.as_s(), |i, x| x * out[i]);
                }
                Op::Square(a) => {
                    let av = self.scalars(*a).to_vec();
                    self.accum_s_lanes(&mut adj, *a, bar.as_s(), |i, x| 2.0 * av[i] * x);
                }
                Op::AddV(a, b) => {
                    let v = bar.as_v();
                    self.accum_v(&mut adj, *a, v, |x| x);
                    self.accum_v(&mut adj, *b, v, |x| x);
                }
                Op::SubV(a, b) => {
                    let v = bar.as_v();
                    self.accum_v(&mut adj, *a, v, |x| x);
                    self.accum_v(&mut adj, *b, v, |x| -x);
                }
                Op::ScaleV { s, v } => {
                    let out_bar = bar.as_v();
                    let sv = self.scalars(*s).to_vec();
                    let vv = self.vectors(*v).to_vec();
                    let sbar: Vec<f64> =
                        out_bar.iter().zip(vv.iter()).map(|(d, x)| d.dot(x)).collect();
                    self.accum_s(&mut adj, *s, &sbar, |x| x);
                    self.accum_v_lanes(&mut adj, *v, out_bar, |i, d| d * sv[i]);
                }
                Op::Dot(a, b) => {
                    let s = bar.as_s();
                    let av = self.vectors(*a).to_vec();
                    let bv = self.vectors(*b).to_vec();
                    let abar: Vec<Vec3> = s.iter().zip(bv.iter()).map(|(k, y)| y * *k).collect();
                    let bbar: Vec<Vec3> = s.iter().zip(av.iter()).map(|(k, x)| x * *k).collect();
                    self.accum_v(&mut adj, *a, &abar, |x| x);
                    self.accum_v(&mut adj, *b, &bbar, |x| x);
                }
                Op::Norm(a) => {
                    let s = bar.as_s();
                    let av = self.vectors(*a);
                    let vbar: Vec<Vec3> = s
                        .iter()
                        .zip(av.iter())
                        .map(|(k, x)| {
                            let n = x.norm();
                            if n < 1e-12 {
                                Vec3::zeros()
                            } else {
                                x / n * *k
                            }
                        })
                        .collect();
                    self.accum_v(&mut adj, *a, &vbar, |x| x);
                }
                Op::UnitOrConst { v, degenerate, .. } => {
                    let nbar = bar.as_v();
                    let vv = self.vectors(*v);
                    let out = node.out.as_v();
                    let vbar: Vec<Vec3> = (0..vv.len())
                        .map(|i| {
                            if degenerate[i] {
                                Vec3::zeros()
                            } else {
                                let n = vv[i].norm();
                                (nbar[i] - out[i] * out[i].dot(&nbar[i])) / n
                            }
                        })
                        .collect();
                    self.accum_v(&mut adj, *v, &vbar, |x| x);
                }
                Op::UnitOrOther { v, other, degenerate, .. } => {
                    let nbar = bar.as_v();
                    let vv = self.vectors(*v);
                    let out = node.out.as_v();
                    let mut vbar = vec![Vec3::zeros(); vv.len()];
                    let mut obar = vec![Vec3::zeros(); vv.len()];
                    for i in 0..vv.len() {
                        if degenerate[i] {
                            obar[i] = nbar[i];
                        } else {
                            let n = vv[i].norm();
                            vbar[i] = (nbar[i] - out[i] * out[i].dot(&nbar[i])) / n;
                        }
                    }
                    self.accum_v(&mut adj, *v, &vbar, |x| x);
                    self.accum_v(&mut adj, *other, &obar, |x| x);
                }
                Op::GatherS { src, idx } => {
                    let s = bar.as_s();
                    let slot = Self::slot(&mut adj, &self.nodes[src.0].out, src.0);
                    if let Payload::S(acc) = slot {
                        for (k, &i) in idx.iter().enumerate() {
                            acc[i] += s[k];
                        }
                    }
                }
                Op::GatherV { src, idx } => {
                    let v = bar.as_v();
                    let slot = Self::slot(&mut adj, &self.nodes[src.0].out, src.0);
                    if let Payload::V(acc) = slot {
                        for (k, &i) in idx.iter().enumerate() {
                            acc[i] += v[k];
                        }
                    }
                }
                Op::SumPrefix { src, count } => {
                    let k = bar.as_s()[0];
                    let slot = Self::slot(&mut adj, &self.nodes[src.0].out, src.0);
                    if let Payload::S(acc) = slot {
                        for a in acc.iter_mut().take(*count) {
                            *a += k;
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let k = bar.as_s()[0];
                    for (r, w) in terms {
                        let slot = Self::slot(&mut adj, &self.nodes[r.0].out, r.0);
                        if let Payload::S(acc) = slot {
                            acc[0] += k * w;
                        }
                    }
                }
            }
        }
        grad
    }

    fn slot<'a>(
        adj: &'a mut [Option<Payload>],
        template: &Payload,
        id: usize,
    ) -> &'a mut Payload {
        adj[id].get_or_insert_with(|| template.zeros_like())
    }

    fn accum_s(
        &self,
        adj: &mut [Option<Payload>],
        target: ValRef,
        bar: &[f64],
        f: impl Fn(f64) -> f64,
    ) {
        let slot = Self::slot(adj, &self.nodes[target.0].out, target.0);
        if let Payload::S(acc) = slot {
            for (a, b) in acc.iter_mut().zip(bar.iter()) {
                *a += f(*b);
            }
        }
    }

    fn accum_s_lanes(
        &self,
        adj: &mut [Option<Payload>],
        target: ValRef,
        bar: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let slot = Self::slot(adj, &self.nodes[target.0].out, target.0);
        if let Payload::S(acc) = slot {
            for (i, (a, b)) in acc.iter_mut().zip(bar.iter()).enumerate() {
                *a += f(i, *b);
            }
        }
    }

    fn accum_v(
        &self,
        adj: &mut [Option<Payload>],
        target: ValRef,
        bar: &[Vec3],
        f: impl Fn(Vec3) -> Vec3,
    ) {
        let slot = Self::slot(adj, &self.nodes[target.0].out, target.0);
        if let Payload::V(acc) = slot {
            for (a, b) in acc.iter_mut().zip(bar.iter()) {
                *a += f(*b);
            }
        }
    }

    fn accum_v_lanes(
        &self,
        adj: &mut [Option<Payload>],
        target: ValRef,
        bar: &[Vec3],
        f: impl Fn(usize, Vec3) -> Vec3,
    ) {
        let slot = Self::slot(adj, &self.nodes[target.0].out, target.0);
        if let Payload::V(acc) = slot {
            for (i, (a, b)) in acc.iter_mut().zip(bar.iter()).enumerate() {
                *a += f(i, *b);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::oracle;
    use crate::rng::{standard_normal, stream};

    fn tiny_net(seed: u64) -> FieldNetwork {
        let config = NetConfig {
            hidden_width: 16,
            hidden_layers: 3,
            skip_at: 1,
            beta: 100.0,
            ..NetConfig::default()
        };
        FieldNetwork::init_geometric(&config, seed).unwrap()
    }

    fn rand_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut r = stream(seed, "tape-pts", 0);
        (0..n)
            .map(|_| {
                Vec3::new(
                    standard_normal(&mut r) * 0.4,
                    standard_normal(&mut r) * 0.4,
                    standard_normal(&mut r) * 0.4,
                )
            })
            .collect()
    }

    /// loss = mean_i f(x_i)^2
    fn value_squared_tape(net: &FieldNetwork, pts: &[Vec3]) -> Tape {
        let mut tape = Tape::new();
        let x = tape.const_v(pts.to_vec());
        let (f, _g) = tape.net_eval(net, x);
        let sq = tape.square(f);
        let m = tape.mean(sq);
        tape.set_output(m);
        tape
    }

    /// loss = mean_i ‖∇f(x_i)‖^2
    fn grad_squared_tape(net: &FieldNetwork, pts: &[Vec3]) -> Tape {
        let mut tape = Tape::new();
        let x = tape.const_v(pts.to_vec());
        let (_f, g) = tape.net_eval(net, x);
        let sq = tape.dot(g, g);
        let m = tape.mean(sq);
        tape.set_output(m);
        tape
    }

    fn fd_check(
        net: &FieldNetwork,
        grad: &ParamGrad,
        loss_of: impl Fn(&FieldNetwork) -> f64,
        n_params: usize,
        seed: u64,
        tol: f64,
    ) {
        let flat = grad.flat();
        let base = net.params_flat();
        let scale = flat.iter().fold(0.0f64, |m, g| m.max(g.abs() as f64));
        let mut r = stream(seed, "fd-idx", 0);
        for _ in 0..n_params {
            let j = (r.next_u64() % base.len() as u64) as usize;
            let h = 1e-3f32.max(base[j].abs() * 1e-3);
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut p = base.clone();
            p[j] += h;
            plus.set_params_flat(&p);
            p[j] = base[j] - h;
            minus.set_params_flat(&p);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
            let an = flat[j] as f64;
            let err = (fd - an).abs();
            let floor = 1e-4 * scale.max(1e-8);
            assert!(
                err <= tol * an.abs().max(fd.abs()).max(floor),
                "param {j}: fd {fd} vs analytic {an}"
            );
        }
    }

    use rand::RngCore;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = tiny_net(1);
        let mut tape = Tape::new();
        let c = tape.const_s(vec![1.0]);
        let out = tape.scale(c, 1.0);
        tape.set_output(out);
        let grad = tape.backward(&net);
        assert!(grad.flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn value_squared_matches_finite_differences() {
        let net = tiny_net(2);
        let pts = rand_points(8, 3);
        let tape = value_squared_tape(&net, &pts);
        let grad = tape.backward(&net);
        let loss_of = |n: &FieldNetwork| {
            let vals = oracle::RefNet::from(n).values(&pts);
            vals.iter().map(|v| v * v).sum::<f64>() / pts.len() as f64
        };
        fd_check(&net, &grad, loss_of, 25, 11, 1e-2);
    }

    #[test]
    fn grad_squared_matches_finite_differences() {
        let net = tiny_net(4);
        let pts = rand_points(8, 5);
        let tape = grad_squared_tape(&net, &pts);
        let grad = tape.backward(&net);
        let loss_of = |n: &FieldNetwork| {
            let rn = oracle::RefNet::from(n);
            pts.iter().map(|p| rn.grad_fd(p).norm_squared()).sum::<f64>() / pts.len() as f64
        };
        fd_check(&net, &grad, loss_of, 25, 13, 1e-2);
    }

    #[test]
    fn double_backward_is_identical() {
        let net = tiny_net(6);
        let pts = rand_points(5, 7);
        let tape = grad_squared_tape(&net, &pts);
        let a = tape.backward(&net).flat();
        let b = tape.backward(&net).flat();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn projection_chain_matches_finite_differences() {
        // loss = mean f(q')^2 with q' = q - f(q) n_q exercises the
        // x-adjoint path through a parameter-dependent position.
        let net = tiny_net(8);
        let pts = rand_points(6, 9);
        let mut tape = Tape::new();
        let q = tape.const_v(pts.clone());
        let (fq, gq) = tape.net_eval(&net, q);
        let nq = tape.unit_or_const(gq);
        let step = tape.scale_v(fq, nq);
        let qp = tape.sub_v(q, step);
        let (fqp, _) = tape.net_eval(&net, qp);
        let sq = tape.square(fqp);
        let m = tape.mean(sq);
        tape.set_output(m);
        let grad = tape.backward(&net);

        let loss_of = |n: &FieldNetwork| {
            let rn = oracle::RefNet::from(n);
            let mut total = 0.0;
            for p in &pts {
                let v = rn.value(p);
                let g = rn.grad_fd(p);
                let unit = g / g.norm();
                let qp = p - unit * v;
                total += rn.value(&qp).powi(2);
            }
            total / pts.len() as f64
        };
        fd_check(&net, &grad, loss_of, 25, 15, 1e-2);
    }
}
