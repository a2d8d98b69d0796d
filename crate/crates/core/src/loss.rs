//! Training losses.
//!
//! Four terms drive the fit, all computed on a query batch against the raw
//! cloud:
//!
//! - signed-distance attraction: `mean(w·f(q')² + f(q)² + f(p)²)` with a
//!   larger weight on the projected (surface) points;
//! - projection distance: for each batch raw point, its nearest projected
//!   query contributes `‖q'−p‖ + |(q'−p)·n_p| + |(q'−p)·n_q'|` (the plain
//!   and the two normal-projected distances);
//! - gradient consistency between levels: `mean((1 − n_q'·n_q)·w)` with
//!   confidence `w = exp(−rho·|f(q)|)`;
//! - gradient orientation within a level: the displacement `f(q)·n̄`
//!   against multi-scale centroid offsets `H_j(q)`.
//!
//! The composite is `L = L_sd + L_v + λ1·L_d + λ2·L_n`. Each term can be
//! disabled for ablations, with the projection distance further split into
//! its plain (`ld`) and projected (`pd`) parts.
//!
//! Pure per-record functions are provided for analytic mock fields; the
//! tape builder produces the differentiable path used in training. Both
//! compute the same values, which the tests cross-check.

use crate::field::{unit_or_fallback, SignedField};
use crate::geom::{NeighborIndex, PointCloud, QueryBatch, Vec3};
use crate::net::{FieldNetwork, ParamGrad};
use crate::tape::{Tape, ValRef};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm threshold below which two summed unit normals count as opposed.
pub const EPS_OPPOSED: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid scale set: {0}")]
    InvalidScales(String),
}

/// Weight factors of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the projection-distance term.
    pub lambda1: f64,
    /// Weight of the gradient-consistency term.
    pub lambda2: f64,
    /// Confidence sharpness in `exp(-rho·|f(q)|)`.
    pub rho: f64,
    /// Relative weight of `|f(q')|²` inside the signed-distance term.
    pub surface_sd_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.01, rho: 60.0, surface_sd_weight: 10.0 }
    }
}

/// Ordered neighborhood sizes for the multi-scale offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub scales: Vec<usize>,
}

impl Default for ScaleSet {
    fn default() -> Self {
        // {1, K/2, K} with K = 8.
        Self { scales: vec![1, 4, 8] }
    }
}

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self, LossError> {
        let s = Self { scales };
        s.validate(usize::MAX)?;
        Ok(s)
    }

    pub fn validate(&self, cloud_size: usize) -> Result<(), LossError> {
        if self.scales.is_empty() {
            return Err(LossError::InvalidScales("scale set is empty".into()));
        }
        if self.scales[0] == 0 {
            return Err(LossError::InvalidScales("scales must be positive".into()));
        }
        for w in self.scales.windows(2) {
            if w[1] <= w[0] {
                return Err(LossError::InvalidScales(format!(
                    "scales must be strictly increasing, got {:?}",
                    self.scales
                )));
            }
        }
        let max = *self.scales.last().unwrap();
        if cloud_size != usize::MAX && max >= cloud_size {
            return Err(LossError::InvalidScales(format!(
                "max scale {max} must be smaller than the point count {cloud_size}"
            )));
        }
        Ok(())
    }

    pub fn max_scale(&self) -> usize {
        *self.scales.last().unwrap()
    }
}

/// Per-term enable switches for the ablation studies. The projection
/// distance splits into its plain (`ld`) and projected (`pd`) parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub ld: bool,
    pub pd: bool,
    pub sd: bool,
    pub n: bool,
    pub v: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { ld: true, pd: true, sd: true, n: true, v: true }
    }
}

/// Loss term values for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sd: f64,
    pub l_d: f64,
    pub l_n: f64,
    pub l_v: f64,
    pub total: f64,
    pub degenerate_gradient_count: usize,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "iteration,l_sd,l_d,l_n,l_v,total,degenerate_count"
    }

    pub fn csv_row(&self, iteration: usize) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            iteration,
            self.l_sd,
            self.l_d,
            self.l_n,
            self.l_v,
            self.total,
            self.degenerate_gradient_count
        )
    }

    pub fn is_finite(&self) -> bool {
        self.l_sd.is_finite() && self.l_d.is_finite() && self.l_n.is_finite()
            && self.l_v.is_finite()
            && self.total.is_finite()
    }
}

/// One query's projection data.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionRecord {
    pub q: Vec3,
    pub f_q: f64,
    pub n_q: Vec3,
    pub q_prime: Vec3,
    pub f_qprime: f64,
    pub n_qprime: Vec3,
    /// `(n_q + n_q')/‖n_q + n_q'‖`, falling back to `n_q` when opposed.
    pub n_bar: Vec3,
    pub degenerate_gradient: bool,
    pub opposed_normals: bool,
}

/// Projects a query one step along the field gradient: `q' = q − f(q)·n_q`.
pub fn project<F: SignedField + ?Sized>(field: &F, q: &Vec3) -> ProjectionRecord {
    let (f_q, g_q) = field.value_grad(q);
    let (n_q, degenerate_q) = unit_or_fallback(&g_q);
    let q_prime = q - n_q * f_q;
    let (f_qprime, g_qp) = field.value_grad(&q_prime);
    let (n_qprime, degenerate_qp) = unit_or_fallback(&g_qp);
    let sum = n_q + n_qprime;
    let (n_bar, opposed) =
        if sum.norm() < EPS_OPPOSED { (n_q, true) } else { (sum / sum.norm(), false) };
    ProjectionRecord {
        q: *q,
        f_q,
        n_q,
        q_prime,
        f_qprime,
        n_qprime,
        n_bar,
        degenerate_gradient: degenerate_q || degenerate_qp,
        opposed_normals: opposed,
    }
}

/// Signed-distance attraction: `mean(w·f(q')² + f(q)² + f(p)²)`.
pub fn loss_sd<F: SignedField + ?Sized>(
    field: &F,
    p_batch: &[Vec3],
    q: &[Vec3],
    q_prime: &[Vec3],
    surface_weight: f64,
) -> f64 {
    assert_eq!(p_batch.len(), q.len());
    assert_eq!(q.len(), q_prime.len());
    let n = p_batch.len() as f64;
    let mut total = 0.0;
    for i in 0..p_batch.len() {
        let fp = field.value(&p_batch[i]);
        let fq = field.value(&q[i]);
        let fqp = field.value(&q_prime[i]);
        total += surface_weight * fqp * fqp + fq * fq + fp * fp;
    }
    total / n
}

/// Projection distance over matched pairs; `paired[i]` is `(p, n_p)` for
/// `records[i]`.
pub fn loss_d(records: &[ProjectionRecord], paired: &[(Vec3, Vec3)]) -> f64 {
    assert_eq!(records.len(), paired.len());
    let n = records.len() as f64;
    let mut total = 0.0;
    for (r, (p, n_p)) in records.iter().zip(paired.iter()) {
        let diff = r.q_prime - p;
        total += diff.norm() + diff.dot(n_p).abs() + diff.dot(&r.n_qprime).abs();
    }
    total / n
}

/// Gradient consistency between a query's level set and its projection's.
pub fn loss_n(records: &[ProjectionRecord], rho: f64) -> f64 {
    let n = records.len() as f64;
    let mut total = 0.0;
    for r in records {
        let w = (-rho * r.f_q.abs()).exp();
        total += (1.0 - r.n_qprime.dot(&r.n_q)) * w;
    }
    total / n
}

/// Offset from the centroid of the `k` nearest raw points: `q − p̄`.
pub fn local_offset(q: &Vec3, index: &NeighborIndex, k: usize) -> Vec3 {
    let nn = index.knn(q, k);
    let mut centroid = Vec3::zeros();
    for (i, _) in &nn {
        centroid += *index.point(*i);
    }
    q - centroid / nn.len() as f64
}

/// Multi-scale orientation loss: `Σ_j mean ‖f(q)·n̄ − H_j(q)‖`.
pub fn loss_v<F: SignedField + ?Sized>(
    field: &F,
    queries: &[Vec3],
    index: &NeighborIndex,
    scales: &ScaleSet,
) -> f64 {
    let n = queries.len() as f64;
    let records: Vec<ProjectionRecord> = queries.iter().map(|q| project(field, q)).collect();
    let mut total = 0.0;
    for &k in &scales.scales {
        let mut sum = 0.0;
        for (q, r) in queries.iter().zip(records.iter()) {
            let h = local_offset(q, index, k);
            sum += (r.n_bar * r.f_q - h).norm();
        }
        total += sum / n;
    }
    total
}

/// Composite-loss configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub scales: ScaleSet,
    pub flags: AblationFlags,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            scales: ScaleSet::default(),
            flags: AblationFlags::default(),
        }
    }
}

/// The reverse-mode records of one composite-loss evaluation, one tape per
/// shard. Backward passes combine shard gradients in shard order, so the
/// result is bit-stable for a fixed shard count.
pub struct LossTape {
    pub shards: Vec<Tape>,
}

impl LossTape {
    pub fn backward(&self, net: &FieldNetwork) -> ParamGrad {
        let mut acc = ParamGrad::zeros_like(net);
        for tape in &self.shards {
            let g = tape.backward(net);
            acc.add_assign(&g);
        }
        acc
    }
}

/// Composite loss over a query batch, single shard.
pub fn total_loss(
    net: &FieldNetwork,
    cloud: &PointCloud,
    index: &NeighborIndex,
    batch: &QueryBatch,
    cfg: &LossConfig,
) -> (LossBreakdown, LossTape) {
    total_loss_sharded(net, cloud, index, batch, cfg, 1)
}

/// Composite loss with the batch split into `shards` contiguous pieces.
/// Each shard evaluates its own lanes (plus re-evaluated guest lanes its
/// pairings reach into) and yields a partial gradient; the partials sum to
/// the single-shard gradient up to float reordering.
pub fn total_loss_sharded(
    net: &FieldNetwork,
    cloud: &PointCloud,
    index: &NeighborIndex,
    batch: &QueryBatch,
    cfg: &LossConfig,
    shards: usize,
) -> (LossBreakdown, LossTape) {
    assert!(shards >= 1, "shard count must be positive");
    let b_total = batch.len();
    assert!(b_total > 0, "empty batch");
    cfg.scales.validate(cloud.len()).expect("scales validated by caller");

    let ps: Vec<Vec3> = batch.source_indices.iter().map(|s| cloud.points[*s]).collect();

    // Multi-scale centroid offsets are constants of the iteration (they
    // depend only on query positions and the raw cloud).
    let need_v = cfg.flags.v;
    let max_scale = cfg.scales.max_scale();
    let mut offsets: Vec<Vec<Vec3>> = vec![Vec::new(); cfg.scales.scales.len()];
    if need_v {
        for q in &batch.queries {
            let nn = index.knn(q, max_scale);
            let mut acc = Vec3::zeros();
            let mut upto = 0usize;
            let mut scale_iter = cfg.scales.scales.iter().enumerate();
            let mut current = scale_iter.next();
            for (rank, (pi, _)) in nn.iter().enumerate() {
                acc += *index.point(*pi);
                upto = rank + 1;
                while let Some((si, &scale)) = current {
                    if scale == upto {
                        offsets[si].push(q - acc / scale as f64);
                        current = scale_iter.next();
                    } else {
                        break;
                    }
                }
            }
            // Scales beyond the cloud size were rejected by validate().
            debug_assert_eq!(upto, max_scale.min(cloud.len()));
        }
    }

    // Pairing needs every projected position. With one shard the tape
    // computes them; with several we precompute them once outside.
    let pairing_src: Option<Vec<Vec3>> = if shards > 1 && (cfg.flags.ld || cfg.flags.pd) {
        let (values, grads) = net.eval_batch(&batch.queries);
        Some(
            (0..b_total)
                .map(|i| {
                    let (n, _) = unit_or_fallback(&grads[i]);
                    batch.queries[i] - n * values[i]
                })
                .collect(),
        )
    } else {
        None
    };

    let ranges = shard_ranges(b_total, shards);
    let mut tapes = Vec::with_capacity(ranges.len());
    let mut sums = TermSums::default();
    let mut degenerate = 0usize;

    for range in &ranges {
        let own: Vec<usize> = (range.start..range.end).collect();
        let own_count = own.len();

        let shard = build_shard_tape(
            net,
            batch,
            &ps,
            &offsets,
            cfg,
            &own,
            pairing_src.as_deref(),
            b_total,
        );
        sums.add(&shard.sums);
        degenerate += shard.tape.counts.zero_gradient;
        let _ = own_count;
        tapes.push(shard.tape);
    }

    let n = b_total as f64;
    let w = &cfg.weights;
    let l_sd = if cfg.flags.sd {
        (w.surface_sd_weight * sums.sq_qp + sums.sq_q + sums.sq_p) / n
    } else {
        0.0
    };
    let l_d = if cfg.flags.ld || cfg.flags.pd { (sums.ld + sums.pd) / n } else { 0.0 };
    let l_n = if cfg.flags.n { sums.n / n } else { 0.0 };
    let l_v = if cfg.flags.v { sums.v / n } else { 0.0 };
    let total = l_sd + l_v + w.lambda1 * l_d + w.lambda2 * l_n;

    (
        LossBreakdown {
            l_sd,
            l_d,
            l_n,
            l_v,
            total,
            degenerate_gradient_count: degenerate,
        },
        LossTape { shards: tapes },
    )
}

fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.min(n).max(1);
    let base = n / shards;
    let extra = n % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[derive(Default, Clone, Copy)]
struct TermSums {
    sq_qp: f64,
    sq_q: f64,
    sq_p: f64,
    ld: f64,
    pd: f64,
    n: f64,
    v: f64,
}

impl TermSums {
    fn add(&mut self, other: &TermSums) {
        self.sq_qp += other.sq_qp;
        self.sq_q += other.sq_q;
        self.sq_p += other.sq_p;
        self.ld += other.ld;
        self.pd += other.pd;
        self.n += other.n;
        self.v += other.v;
    }
}

struct ShardTape {
    tape: Tape,
    sums: TermSums,
}

#[allow(clippy::too_many_arguments)]
fn build_shard_tape(
    net: &FieldNetwork,
    batch: &QueryBatch,
    ps: &[Vec3],
    offsets: &[Vec<Vec3>],
    cfg: &LossConfig,
    own: &[usize],
    pairing_src: Option<&[Vec3]>,
    b_total: usize,
) -> ShardTape {
    let own_count = own.len();
    let w = &cfg.weights;
    let inv_n = 1.0 / b_total as f64;
    let need_d = cfg.flags.ld || cfg.flags.pd;

    let mut tape = Tape::new();
    tape.set_count_limit(own_count);

    // Lane layout: own lanes first; guest lanes (projected positions of
    // queries outside this shard that the pairing selects) appended. With
    // one shard the pairing always lands inside, so guests are empty.
    let mut lanes: Vec<usize> = own.to_vec();
    let mut pair_local: Vec<usize> = Vec::new();

    if need_d {
        if let Some(all_qp) = pairing_src {
            let pair_index = NeighborIndex::build(all_qp);
            let mut local_of = std::collections::BTreeMap::new();
            for (li, gi) in lanes.iter().enumerate() {
                local_of.insert(*gi, li);
            }
            for &i in own {
                let (j, _) = pair_index.nearest(&ps[i]);
                let li = *local_of.entry(j).or_insert_with(|| {
                    lanes.push(j);
                    lanes.len() - 1
                });
                pair_local.push(li);
            }
        }
    }

    let q_pts: Vec<Vec3> = lanes.iter().map(|i| batch.queries[*i]).collect();
    let qv = tape.const_v(q_pts);
    let (f_q, g_q) = tape.net_eval(net, qv);
    let n_q = tape.unit_or_const(g_q);
    let step = tape.scale_v(f_q, n_q);
    let qp = tape.sub_v(qv, step);
    let (f_qp, g_qp) = tape.net_eval(net, qp);
    let n_qp = tape.unit_or_const(g_qp);

    // Single shard: pairing against the tape's own projected positions.
    if need_d && pairing_src.is_none() {
        let qp_vals = tape.vectors(qp);
        let pair_index = NeighborIndex::build(qp_vals);
        for &i in own {
            let (j, _) = pair_index.nearest(&ps[i]);
            pair_local.push(j);
        }
    }

    let p_pts: Vec<Vec3> = own.iter().map(|i| ps[*i]).collect();
    let pv = tape.const_v(p_pts);
    let (f_p, g_p) = tape.net_eval(net, pv);

    let mut terms: Vec<(ValRef, f64)> = Vec::new();
    let mut sums = TermSums::default();

    if cfg.flags.sd {
        let sq_qp = tape.square(f_qp);
        let sq_q = tape.square(f_q);
        let sq_p = tape.square(f_p);
        let s1 = tape.sum_prefix(sq_qp, own_count);
        let s2 = tape.sum_prefix(sq_q, own_count);
        let s3 = tape.sum(sq_p);
        sums.sq_qp = tape.scalar(s1);
        sums.sq_q = tape.scalar(s2);
        sums.sq_p = tape.scalar(s3);
        terms.push((s1, w.surface_sd_weight * inv_n));
        terms.push((s2, inv_n));
        terms.push((s3, inv_n));
    }

    if need_d {
        let qp_sel = tape.gather_v(qp, pair_local.clone());
        let diff = tape.sub_v(qp_sel, pv);
        if cfg.flags.ld {
            let d = tape.norm(diff);
            let s = tape.sum(d);
            sums.ld = tape.scalar(s);
            terms.push((s, w.lambda1 * inv_n));
        }
        if cfg.flags.pd {
            let n_p = tape.unit_or_const(g_p);
            let n_qp_sel = tape.gather_v(n_qp, pair_local);
            let d1 = tape.dot(diff, n_p);
            let d1 = tape.abs(d1);
            let d2 = tape.dot(diff, n_qp_sel);
            let d2 = tape.abs(d2);
            let both = tape.add(d1, d2);
            let s = tape.sum(both);
            sums.pd = tape.scalar(s);
            terms.push((s, w.lambda1 * inv_n));
        }
    }

    if cfg.flags.n {
        let cos = tape.dot(n_qp, n_q);
        let neg = tape.neg(cos);
        let mis = tape.add_const(neg, 1.0);
        let absf = tape.abs(f_q);
        let scaled = tape.scale(absf, -w.rho);
        let conf = tape.exp(scaled);
        let weighted = tape.mul(mis, conf);
        let s = tape.sum_prefix(weighted, own_count);
        sums.n = tape.scalar(s);
        terms.push((s, w.lambda2 * inv_n));
    }

    if cfg.flags.v {
        let sum_normals = tape.add_v(n_q, n_qp);
        let n_bar = tape.unit_or_other(sum_normals, n_q, EPS_OPPOSED);
        let disp = tape.scale_v(f_q, n_bar);
        for per_scale in offsets {
            let mut h: Vec<Vec3> = own.iter().map(|i| per_scale[*i]).collect();
            h.resize(lanes.len(), Vec3::zeros());
            let hv = tape.const_v(h);
            let err = tape.sub_v(disp, hv);
            let dist = tape.norm(err);
            let s = tape.sum_prefix(dist, own_count);
            sums.v += tape.scalar(s);
            terms.push((s, inv_n));
        }
    }

    let total = tape.weighted_sum(terms);
    tape.set_output(total);
    ShardTape { tape, sums }
}
