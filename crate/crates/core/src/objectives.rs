//! Training losses: holistic sigmoid contrast, coordination ranking,
//! fine-grained variance contrast, the weighted total and an InfoNCE baseline.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{
    compose, estimate_uncertainty, ones, query_graph, target_graph, EncoderVariant, ModelDims,
    ModelParams, QueryGraph, TargetGraph,
};
use crate::error::{HugError, Result};
use crate::params::Graph;
use crate::tensor::{grad_check_many, Axis, GradCheckReport, Stencil, Tape, Tensor, Var};

/// Row-aligned reference images, texts and target images.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub x_r: Tensor,
    pub x_t: Tensor,
    pub x_c: Tensor,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.x_r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Argument order inside the coordination sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CordSign {
    /// `-log s(mismatched - matched)`: matched pairs learn lower uncertainty.
    Intent,
    /// `-log s(matched - mismatched)`.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Same side and instance, other components.
    Component,
    /// Same side, other instances, any component.
    Instance,
    /// Opposite side, any instance and component.
    Modality,
}

impl NegativeStrategy {
    pub const ALL: [NegativeStrategy; 3] = [Self::Component, Self::Instance, Self::Modality];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Query,
    Target,
}

/// One variance vector in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub side: Side,
    pub instance: usize,
    pub component: usize,
}

impl Slot {
    /// Row of this slot in the stacked `[query; target]` variance matrix.
    pub fn row(&self, n: usize, k: usize) -> usize {
        let base = match self.side {
            Side::Query => 0,
            Side::Target => n * k,
        };
        base + self.instance * k + self.component
    }
}

/// Per-strategy negative count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolCount {
    Off,
    /// `K-1` component, `2(B-1)` instance, `2B` modality negatives.
    Auto,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcPools {
    pub component: PoolCount,
    pub instance: PoolCount,
    pub modality: PoolCount,
}

impl FcPools {
    pub const NONE: FcPools = FcPools {
        component: PoolCount::Off,
        instance: PoolCount::Off,
        modality: PoolCount::Off,
    };
    pub const ALL: FcPools = FcPools {
        component: PoolCount::Auto,
        instance: PoolCount::Auto,
        modality: PoolCount::Auto,
    };

    pub fn get(&self, strategy: NegativeStrategy) -> PoolCount {
        match strategy {
            NegativeStrategy::Component => self.component,
            NegativeStrategy::Instance => self.instance,
            NegativeStrategy::Modality => self.modality,
        }
    }

    /// Resolved count for a batch of `n` instances with `k` components; `None` when off.
    pub fn count(&self, strategy: NegativeStrategy, n: usize, k: usize) -> Option<usize> {
        match self.get(strategy) {
            PoolCount::Off => None,
            PoolCount::Fixed(c) => Some(c),
            PoolCount::Auto => Some(match strategy {
                NegativeStrategy::Component => k.saturating_sub(1),
                NegativeStrategy::Instance => 2 * n.saturating_sub(1),
                NegativeStrategy::Modality => 2 * n,
            }),
        }
    }

    pub fn any(&self) -> bool {
        NegativeStrategy::ALL
            .iter()
            .any(|&s| self.get(s) != PoolCount::Off)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_fc: f64,
    pub lambda_cord: f64,
    pub cord_sign: CordSign,
    /// Mismatched texts per anchor in the coordination loss; 0 uses all `B-1`.
    pub cord_pairs: usize,
    pub pools: FcPools,
    /// InfoNCE temperature for point embeddings.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_fc: 0.5,
            lambda_cord: 0.1,
            cord_sign: CordSign::Intent,
            cord_pairs: 0,
            pools: FcPools::ALL,
            temperature: 1.0,
        }
    }
}

fn square_batch(tape: &Tape, dist: Var, op: &'static str) -> Result<usize> {
    let t = tape.value(dist);
    if t.rank() != 2 || t.rows() != t.cols() {
        return Err(HugError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![t.rows(), t.rows()],
        });
    }
    if t.rows() < 2 {
        return Err(HugError::invalid(format!(
            "{op}: batch size {} < 2",
            t.rows()
        )));
    }
    Ok(t.rows())
}

fn eye(n: usize, v: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = v;
    }
    t
}

/// Sums each row of an `m x c` matrix into `m x 1`.
fn row_sums(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.value(x).cols();
    let o = tape.constant(ones(c, 1));
    tape.matmul(x, o)
}

/// Per-instance mean of an `(n*k) x d` field, as `n x 1`.
pub fn instance_means(tape: &mut Tape, field: Var, n: usize) -> Result<Var> {
    let len = tape.value(field).len();
    let flat = tape.reshape(field, &[n, len / n])?;
    let s = row_sums(tape, flat)?;
    Ok(tape.scale(s, n as f64 / len as f64))
}

/// Holistic distances between `m` queries and `n` targets as an `m x n` matrix.
///
/// Means are `(m*k) x d` and `(n*k) x d`; absent variances count as zero.
pub fn distance_matrix(
    tape: &mut Tape,
    q_mu: Var,
    q_var: Option<Var>,
    c_mu: Var,
    c_var: Option<Var>,
    m: usize,
    n: usize,
) -> Result<Var> {
    let width = tape.value(q_mu).len() / m;
    let q = tape.reshape(q_mu, &[m, width])?;
    let c = tape.reshape(c_mu, &[n, width])?;

    let qq = tape.mul(q, q)?;
    let mut dq = row_sums(tape, qq)?;
    if let Some(v) = q_var {
        let v = tape.reshape(v, &[m, width])?;
        let s = row_sums(tape, v)?;
        dq = tape.add(dq, s)?;
    }
    let cc = tape.mul(c, c)?;
    let mut dc = row_sums(tape, cc)?;
    if let Some(v) = c_var {
        let v = tape.reshape(v, &[n, width])?;
        let s = row_sums(tape, v)?;
        dc = tape.add(dc, s)?;
    }
    let ones_row = tape.constant(ones(1, n));
    let left = tape.matmul(dq, ones_row)?;
    let ones_col = tape.constant(ones(m, 1));
    let dc_t = tape.transpose(dc)?;
    let right = tape.matmul(ones_col, dc_t)?;
    let c_t = tape.transpose(c)?;
    let cross = tape.matmul(q, c_t)?;
    let cross = tape.scale(cross, -2.0);
    let d = tape.add(left, right)?;
    tape.add(d, cross)
}

/// Sigmoid contrast over a `B x B` distance matrix (diagonal = positives).
///
/// `mean_i softplus(a d_ii + b) + 2B * mean_{i != j} softplus(-(a d_ij + b))`;
/// the factor covers both the query-to-targets and target-to-queries directions.
pub fn holistic_contrast_loss(tape: &mut Tape, dist: Var, a: Var, b: Var) -> Result<Var> {
    let n = square_batch(tape, dist, "holistic_contrast_loss")?;
    let ab = tape.broadcast(a, &[n, n])?;
    let bb = tape.broadcast(b, &[n, n])?;
    let z = tape.mul(ab, dist)?;
    let z = tape.add(z, bb)?;
    let pos = tape.softplus(z);
    let nz = tape.neg(z);
    let neg = tape.softplus(nz);

    let pos_mask = tape.constant(eye(n, 1.0 / n as f64));
    let mut off = Tensor::full(&[n, n], 2.0 / (n as f64 - 1.0));
    for i in 0..n {
        off.data_mut()[i * n + i] = 0.0;
    }
    let neg_mask = tape.constant(off);
    let p = tape.mul(pos, pos_mask)?;
    let p = tape.sum(p);
    let q = tape.mul(neg, neg_mask)?;
    let q = tape.sum(q);
    tape.add(p, q)
}

/// Query-to-target InfoNCE on logits `-d / temperature`.
pub fn info_nce_loss(tape: &mut Tape, dist: Var, temperature: f64) -> Result<Var> {
    let n = square_batch(tape, dist, "info_nce_loss")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(HugError::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = tape.scale(dist, -1.0 / temperature);
    let ls = tape.row_log_softmax(logits)?;
    let mask = tape.constant(eye(n, -1.0 / n as f64));
    let picked = tape.mul(ls, mask)?;
    Ok(tape.sum(picked))
}

/// Ordered `(image, text)` mismatches. With `per_anchor == 0` or at least
/// `n - 1`, all `n(n-1)` pairs; otherwise `per_anchor` texts drawn per image.
pub fn mismatch_pairs<R: Rng + ?Sized>(
    n: usize,
    per_anchor: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        if per_anchor == 0 || per_anchor >= others.len() {
            pairs.extend(others.iter().map(|&j| (i, j)));
        } else {
            pairs.extend(
                index::sample(rng, others.len(), per_anchor)
                    .iter()
                    .map(|x| (i, others[x])),
            );
        }
    }
    pairs
}

/// Ranking loss over coordination uncertainties.
///
/// `matched` is `B x 1` (one mean per aligned query), `mismatched` is `P x 1`
/// aligned with `pairs`, whose first index selects the anchor.
pub fn coordination_loss(
    tape: &mut Tape,
    matched: Var,
    mismatched: Var,
    pairs: &[(usize, usize)],
    sign: CordSign,
) -> Result<Var> {
    let n = tape.value(matched).rows();
    if n < 2 {
        return Err(HugError::invalid(format!(
            "coordination_loss: batch size {n} < 2"
        )));
    }
    if pairs.is_empty() || tape.value(mismatched).rows() != pairs.len() {
        return Err(HugError::ShapeMismatch {
            op: "coordination_loss",
            lhs: tape.value(mismatched).shape().to_vec(),
            rhs: vec![pairs.len(), 1],
        });
    }
    let mut sel = Tensor::zeros(&[pairs.len(), n]);
    for (p, &(i, _)) in pairs.iter().enumerate() {
        sel.data_mut()[p * n + i] = 1.0;
    }
    let sel = tape.constant(sel);
    let anchor = tape.matmul(sel, matched)?;
    let diff = match sign {
        CordSign::Intent => tape.sub(anchor, mismatched)?,
        CordSign::Printed => tape.sub(mismatched, anchor)?,
    };
    let terms = tape.softplus(diff);
    Ok(tape.mean(terms))
}

/// Every candidate negative of `anchor` under `strategy` in a batch of `n`
/// instances with `k` components each.
pub fn negative_pool(anchor: Slot, strategy: NegativeStrategy, n: usize, k: usize) -> Vec<Slot> {
    let mut pool = Vec::new();
    match strategy {
        NegativeStrategy::Component => {
            for c in (0..k).filter(|&c| c != anchor.component) {
                pool.push(Slot {
                    component: c,
                    ..anchor
                });
            }
        }
        NegativeStrategy::Instance => {
            for i in (0..n).filter(|&i| i != anchor.instance) {
                for c in 0..k {
                    pool.push(Slot {
                        side: anchor.side,
                        instance: i,
                        component: c,
                    });
                }
            }
        }
        NegativeStrategy::Modality => {
            let side = match anchor.side {
                Side::Query => Side::Target,
                Side::Target => Side::Query,
            };
            for i in 0..n {
                for c in 0..k {
                    pool.push(Slot {
                        side,
                        instance: i,
                        component: c,
                    });
                }
            }
        }
    }
    pool
}

/// Uniform draw without replacement from the strategy's pool; the whole pool
/// when `count` reaches its size.
pub fn sample_fine_grained_negatives<R: Rng + ?Sized>(
    anchor: Slot,
    strategy: NegativeStrategy,
    n: usize,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Slot> {
    let pool = negative_pool(anchor, strategy, n, k);
    if count >= pool.len() {
        return pool;
    }
    index::sample(rng, pool.len(), count)
        .iter()
        .map(|i| pool[i])
        .collect()
}

/// Fine-grained variance contrast over `(n*k) x d` query and target fields.
///
/// Each anchor averages `softplus(-(a' ||v_a - v_s||^2 + b'))` over the union
/// of its sampled negatives; anchors are then averaged.
#[allow(clippy::too_many_arguments)]
pub fn fine_grained_contrast_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    var_q: Var,
    var_c: Var,
    n: usize,
    k: usize,
    a_fc: Var,
    b_fc: Var,
    pools: &FcPools,
    rng: &mut R,
) -> Result<Var> {
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    let mut anchors = 0usize;
    for side in [Side::Query, Side::Target] {
        for instance in 0..n {
            for component in 0..k {
                let anchor = Slot {
                    side,
                    instance,
                    component,
                };
                let mut negs = Vec::new();
                for s in NegativeStrategy::ALL {
                    if let Some(count) = pools.count(s, n, k) {
                        negs.extend(sample_fine_grained_negatives(anchor, s, n, k, count, rng));
                    }
                }
                if negs.is_empty() {
                    continue;
                }
                anchors += 1;
                let a = anchor.row(n, k);
                let w = 1.0 / negs.len() as f64;
                for s in negs {
                    edges.push((a, s.row(n, k)));
                    weights.push(w);
                }
            }
        }
    }
    if anchors == 0 {
        return Err(HugError::invalid(
            "fine_grained_contrast_loss: every negative pool is empty",
        ));
    }
    let scale = 1.0 / anchors as f64;
    weights.iter_mut().for_each(|w| *w *= scale);

    let e = edges.len();
    let v = tape.concat(&[var_q, var_c], Axis::Rows)?;
    let d = tape.pair_sq_dist(v, &edges)?;
    let ab = tape.broadcast(a_fc, &[e, 1])?;
    let bb = tape.broadcast(b_fc, &[e, 1])?;
    let z = tape.mul(ab, d)?;
    let z = tape.add(z, bb)?;
    let nz = tape.neg(z);
    let terms = tape.softplus(nz);
    let w = tape.constant(Tensor::matrix(e, 1, weights));
    let weighted = tape.mul(terms, w)?;
    Ok(tape.sum(weighted))
}

/// Raw loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Holistic contrast, or InfoNCE for point embeddings.
    pub hc: f64,
    pub fc: Option<f64>,
    pub cord: Option<f64>,
    pub total: f64,
}

/// Graph nodes of one batch loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub hc: Var,
    pub fc: Option<Var>,
    pub cord: Option<Var>,
    pub query: QueryGraph,
    pub target: TargetGraph,
}

/// Encodes `batch` and builds `hc + lambda_fc * fc + lambda_cord * cord`.
///
/// Point models use InfoNCE in place of the holistic contrast. The
/// fine-grained term needs unpooled variances and an enabled pool; the
/// coordination term needs the multi-modal head. Terms with zero weight are
/// not built.
pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &ModelParams,
    batch: &TripletBatch,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(LossTerms, LossBreakdown)> {
    let n = batch.len();
    if n < 2 {
        return Err(HugError::invalid(format!("batch size {n} < 2")));
    }
    let (k, variant) = (model.dims.k, model.variant);
    let x_r = g.constant(batch.x_r.clone());
    let x_t = g.constant(batch.x_t.clone());
    let x_c = g.constant(batch.x_c.clone());
    let query = query_graph(g, model, x_r, x_t)?;
    let target = target_graph(g, model, x_c)?;
    let dist = distance_matrix(
        &mut g.tape,
        query.mu,
        query.var_q,
        target.mu,
        target.var,
        n,
        n,
    )?;

    let hc = if variant.probabilistic() {
        let a = g.p(model.scalars.a);
        let b = g.p(model.scalars.b);
        holistic_contrast_loss(&mut g.tape, dist, a, b)?
    } else {
        info_nce_loss(&mut g.tape, dist, cfg.temperature)?
    };

    let fc = match (query.var_q, target.var) {
        (Some(vq), Some(vc)) if !variant.pooled && cfg.pools.any() && cfg.lambda_fc != 0.0 => {
            let a = g.p(model.scalars.a_fc);
            let b = g.p(model.scalars.b_fc);
            Some(fine_grained_contrast_loss(
                &mut g.tape,
                vq,
                vc,
                n,
                k,
                a,
                b,
                &cfg.pools,
                rng,
            )?)
        }
        _ => None,
    };

    let cord = match (&model.g_m, query.var_m) {
        (Some(g_m), Some(vm)) if cfg.lambda_cord != 0.0 => {
            let pairs = mismatch_pairs(n, cfg.cord_pairs, rng);
            let gather = |src: &Tensor, pick: fn(&(usize, usize)) -> usize| {
                let c = src.cols();
                Tensor::matrix(
                    pairs.len(),
                    c,
                    pairs
                        .iter()
                        .flat_map(|p| src.row(pick(p)).to_vec())
                        .collect(),
                )
            };
            let pr = g.constant(gather(&batch.x_r, |p| p.0));
            let pt = g.constant(gather(&batch.x_t, |p| p.1));
            let mu = compose(g, &model.composer, &model.dims, Some(pt), Some(pr))?;
            let vm_pairs = estimate_uncertainty(g, g_m, &model.dims, mu)?;
            let mismatched = instance_means(&mut g.tape, vm_pairs, pairs.len())?;
            let matched = instance_means(&mut g.tape, vm, n)?;
            Some(coordination_loss(
                &mut g.tape,
                matched,
                mismatched,
                &pairs,
                cfg.cord_sign,
            )?)
        }
        _ => None,
    };

    let mut total = hc;
    if let Some(f) = fc {
        let w = g.tape.scale(f, cfg.lambda_fc);
        total = g.tape.add(total, w)?;
    }
    if let Some(c) = cord {
        let w = g.tape.scale(c, cfg.lambda_cord);
        total = g.tape.add(total, w)?;
    }
    let breakdown = LossBreakdown {
        hc: g.tape.scalar_value(hc),
        fc: fc.map(|v| g.tape.scalar_value(v)),
        cord: cord.map(|v| g.tape.scalar_value(v)),
        total: g.tape.scalar_value(total),
    };
    Ok((
        LossTerms {
            total,
            hc,
            fc,
            cord,
            query,
            target,
        },
        breakdown,
    ))
}

/// Which loss a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Hc,
    Fc,
    Cord,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [Self::Hc, Self::Fc, Self::Cord, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Hc => "holistic_contrast",
            LossTerm::Fc => "fine_grained_contrast",
            LossTerm::Cord => "coordination",
            LossTerm::Total => "total",
        }
    }
}

/// Finite-difference check of one loss term with respect to every model
/// parameter. The sampler is reseeded for each evaluation so all probes see
/// the same negatives.
/// Spread of the perturbation applied by [`perturbed_model`].
pub const GRAD_CHECK_SCALE: f64 = 0.3;

/// Freshly initialized parameters plus independent `N(0, scale^2)` noise on every coordinate.
///
/// At initialization the attention projections have gradients near 1e-9,
/// below the rounding floor of central differences, so gradient checks use
/// this model instead.
pub fn perturbed_model(
    dims: ModelDims,
    variant: EncoderVariant,
    seed: u64,
    scale: f64,
) -> Result<ModelParams> {
    let mut model = ModelParams::new(dims, variant, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for x in model.store.get_mut(id).data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += scale * z;
        }
    }
    Ok(model)
}

pub fn check_model_gradients(
    model: &ModelParams,
    batch: &TripletBatch,
    cfg: &LossConfig,
    term: LossTerm,
    sampler_seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut reports = check_model_gradients_many(model, batch, cfg, &[term], sampler_seed, step)?;
    Ok(reports.remove(0))
}

/// Checks several loss terms against one shared finite-difference sweep.
pub fn check_model_gradients_many(
    model: &ModelParams,
    batch: &TripletBatch,
    cfg: &LossConfig,
    terms: &[LossTerm],
    sampler_seed: u64,
    step: f64,
) -> Result<Vec<GradCheckReport>> {
    let values: Vec<Tensor> = model.store.iter().map(|(_, e)| e.value.clone()).collect();
    grad_check_many(
        |tape, vars| {
            let mut g = Graph::with_vars(std::mem::take(tape), &model.store, vars)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
            let (parts, _) = total_loss(&mut g, model, batch, cfg, &mut rng)?;
            *tape = g.tape;
            terms
                .iter()
                .map(|term| {
                    match term {
                        LossTerm::Hc => Some(parts.hc),
                        LossTerm::Fc => parts.fc,
                        LossTerm::Cord => parts.cord,
                        LossTerm::Total => Some(parts.total),
                    }
                    .ok_or_else(|| {
                        HugError::invalid(format!(
                            "loss term `{}` is not active for this model",
                            term.name()
                        ))
                    })
                })
                .collect()
        },
        &values,
        step,
        Stencil::FivePoint,
    )
}
