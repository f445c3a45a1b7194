//! Retrieval metrics, the fusion bound checker and uncertainty probes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{holistic_distance, EntryId, FineGrainedGaussian};
use crate::encoder::{
    encode_query, encode_target, ModelParams, QueryFusion, QueryUncertaintyBundle,
};
use crate::error::{HugError, Result};
use crate::synthdata::{stack, Gallery, TripletExample};
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const SUBSET_SIZE: usize = 6;
/// Minimum sample for the bound checker.
pub const MIN_BOUND_SAMPLE: usize = 100;

/// Mean over components of the summed variance.
pub fn overall_uncertainty(g: &FineGrainedGaussian) -> f64 {
    field_overall(g.var())
}

fn field_overall(var: &Tensor) -> f64 {
    var.sum() / var.rows() as f64
}

fn rank_of(ranking: &[EntryId], truth: EntryId) -> Option<usize> {
    ranking.iter().position(|&id| id == truth)
}

/// Fraction of rankings whose ground truth is within the first `k` entries.
pub fn recall_at_k(rankings: &[Vec<EntryId>], truth: &[EntryId], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() || rankings.is_empty() {
        return Err(HugError::invalid(format!(
            "recall_at_k: {} rankings for {} ground-truth ids",
            rankings.len(),
            truth.len()
        )));
    }
    let mut hits = 0usize;
    for (q, (r, &t)) in rankings.iter().zip(truth).enumerate() {
        let pos = rank_of(r, t).ok_or_else(|| {
            HugError::invalid(format!(
                "query {q}: ground truth {} not in its ranking",
                t.0
            ))
        })?;
        hits += usize::from(pos < k);
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Recall within six-candidate subsets; each ranking must be a permutation of its subset.
pub fn subset_recall_at_k(rankings: &[Vec<EntryId>], truth: &[EntryId], k: usize) -> Result<f64> {
    for (q, r) in rankings.iter().enumerate() {
        if r.len() != SUBSET_SIZE {
            return Err(HugError::invalid(format!(
                "query {q}: subset has {} candidates, expected {SUBSET_SIZE}",
                r.len()
            )));
        }
        let mut ids: Vec<u64> = r.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != SUBSET_SIZE {
            return Err(HugError::invalid(format!(
                "query {q}: subset has duplicate candidates"
            )));
        }
    }
    recall_at_k(rankings, truth, k)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Target plus its five nearest gallery neighbours under clean-feature distance.
pub fn nearest_subset(gallery: &Gallery, target: EntryId) -> Result<Vec<EntryId>> {
    let pos = gallery
        .position(target)
        .ok_or_else(|| HugError::invalid(format!("target {} not in gallery", target.0)))?;
    if gallery.ids.len() < SUBSET_SIZE {
        return Err(HugError::invalid("gallery smaller than a subset"));
    }
    let anchor = gallery.images.row(pos);
    let mut order: Vec<(f64, usize)> = (0..gallery.ids.len())
        .filter(|&i| i != pos)
        .map(|i| (sq_dist(anchor, gallery.images.row(i)), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut subset = vec![target];
    subset.extend(
        order[..SUBSET_SIZE - 1]
            .iter()
            .map(|&(_, i)| gallery.ids[i]),
    );
    Ok(subset)
}

/// Orders `candidates` (indices into `encoded`) by holistic distance to `q`, stable.
fn rank_indices(
    q: &FineGrainedGaussian,
    encoded: &[FineGrainedGaussian],
    candidates: &[usize],
) -> Result<Vec<usize>> {
    let mut scored = candidates
        .iter()
        .map(|&i| Ok((holistic_distance(q, &encoded[i])?, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub queries: usize,
    /// `(k, Recall@k)` for k in 1, 5, 10, 50.
    pub recall: Vec<(usize, f64)>,
    /// `(k, subset Recall@k)` for k in 1, 2, 3.
    pub subset_recall: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|&(_, r)| r)
    }

    /// Mean of Recall@1, @5 and @10.
    pub fn recall_avg(&self) -> f64 {
        [1, 5, 10]
            .iter()
            .filter_map(|&k| self.recall_at(k))
            .sum::<f64>()
            / 3.0
    }
}

/// Encodes every gallery image once.
pub fn encode_gallery(model: &ModelParams, gallery: &Gallery) -> Result<Vec<FineGrainedGaussian>> {
    encode_target(model, &gallery.images)
}

pub fn encode_queries(
    model: &ModelParams,
    examples: &[TripletExample],
) -> Result<Vec<(FineGrainedGaussian, Option<QueryUncertaintyBundle>)>> {
    if examples.is_empty() {
        return Err(HugError::invalid("no examples to encode"));
    }
    let (x_r, x_t, _) = stack(examples);
    encode_query(model, &x_r, &x_t)
}

/// Full-gallery Recall@{1,5,10,50} and subset Recall@{1,2,3}.
pub fn evaluate_retrieval(
    model: &ModelParams,
    examples: &[TripletExample],
    gallery: &Gallery,
) -> Result<RetrievalReport> {
    let encoded = encode_gallery(model, gallery)?;
    let queries = encode_queries(model, examples)?;
    let all: Vec<usize> = (0..gallery.ids.len()).collect();
    let mut full = Vec::with_capacity(examples.len());
    let mut subsets = Vec::with_capacity(examples.len());
    let mut truth = Vec::with_capacity(examples.len());
    for (ex, (q, _)) in examples.iter().zip(&queries) {
        let target = ex.labels.target_id;
        truth.push(target);
        full.push(
            rank_indices(q, &encoded, &all)?
                .into_iter()
                .map(|i| gallery.ids[i])
                .collect(),
        );
        let subset: Vec<usize> = nearest_subset(gallery, target)?
            .iter()
            .map(|&id| {
                gallery
                    .position(id)
                    .expect("subset ids come from the gallery")
            })
            .collect();
        subsets.push(
            rank_indices(q, &encoded, &subset)?
                .into_iter()
                .map(|i| gallery.ids[i])
                .collect(),
        );
    }
    Ok(RetrievalReport {
        queries: examples.len(),
        recall: RECALL_KS
            .iter()
            .map(|&k| Ok((k, recall_at_k(&full, &truth, k)?)))
            .collect::<Result<_>>()?,
        subset_recall: SUBSET_KS
            .iter()
            .map(|&k| Ok((k, subset_recall_at_k(&subsets, &truth, k)?)))
            .collect::<Result<_>>()?,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Probability that a random positive scores above a random negative, ties counting half.
/// `None` without both classes.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let ranks = average_ranks(scores);
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Mean AUC over `shuffles` seeded permutations of `labels`.
pub fn shuffled_auc(scores: &[f64], labels: &[bool], shuffles: usize, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..shuffles.max(1) {
        let mut l = labels.to_vec();
        l.shuffle(&mut rng);
        total += auc(scores, &l)?;
    }
    Some(total / shuffles.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModalityBound {
    pub mean_weight: f64,
    pub mean_loss: f64,
    pub cov: f64,
    pub pearson: Option<f64>,
    /// `|E[w l] - E[w] E[l] - Cov(w, l)|`.
    pub identity_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub samples: usize,
    /// Order: reference image, text, coordination.
    pub modalities: [ModalityBound; 3],
    pub rhs_dynamic: f64,
    pub rhs_static: f64,
    pub static_weights: [f64; 3],
    pub cov_sum: f64,
    pub max_identity_residual: f64,
    pub convexity_passed: bool,
    pub cov_negative: bool,
    pub weights_matched: bool,
}

/// Bound terms from paired weight and variance samples, one array per modality.
///
/// `loss` maps a variance to the probe loss. The convexity probe draws
/// `probe_pairs` variance pairs from the sample.
pub fn bound_from_samples(
    weights: &[Vec<f64>; 3],
    variances: &[Vec<f64>; 3],
    loss: impl Fn(f64) -> f64,
    probe_pairs: usize,
    seed: u64,
) -> Result<BoundReport> {
    let n = weights[0].len();
    if n < MIN_BOUND_SAMPLE {
        return Err(HugError::invalid(format!(
            "bound check needs at least {MIN_BOUND_SAMPLE} samples, got {n}"
        )));
    }
    if weights.iter().chain(variances).any(|v| v.len() != n) {
        return Err(HugError::invalid("bound check: ragged sample arrays"));
    }
    let modality = |w: &[f64], v: &[f64]| {
        let l: Vec<f64> = v.iter().map(|&s| loss(s)).collect();
        let (ew, el) = (mean(w), mean(&l));
        let ewl = w.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let cov = w
            .iter()
            .zip(&l)
            .map(|(a, b)| (a - ew) * (b - el))
            .sum::<f64>()
            / n as f64;
        ModalityBound {
            mean_weight: ew,
            mean_loss: el,
            cov,
            pearson: pearson(w, &l),
            identity_residual: (ewl - ew * el - cov).abs(),
        }
    };
    let modalities = [
        modality(&weights[0], &variances[0]),
        modality(&weights[1], &variances[1]),
        modality(&weights[2], &variances[2]),
    ];
    let static_weights = [
        modalities[0].mean_weight,
        modalities[1].mean_weight,
        modalities[2].mean_weight,
    ];
    let rhs_dynamic: f64 = modalities
        .iter()
        .map(|m| m.mean_weight * m.mean_loss + m.cov)
        .sum();
    let rhs_static: f64 = modalities
        .iter()
        .zip(&static_weights)
        .map(|(m, w)| w * m.mean_loss)
        .sum();
    let cov_sum: f64 = modalities.iter().map(|m| m.cov).sum();

    let pool: Vec<f64> = variances.iter().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convexity_passed = (0..probe_pairs).all(|_| {
        let s1 = pool[rng.gen_range(0..pool.len())];
        let s2 = pool[rng.gen_range(0..pool.len())];
        let mid = loss(0.5 * (s1 + s2));
        let chord = 0.5 * (loss(s1) + loss(s2));
        mid <= chord + 1e-12 * chord.abs().max(1.0)
    });
    let weight_sum: f64 = static_weights.iter().sum();
    Ok(BoundReport {
        samples: n,
        max_identity_residual: modalities
            .iter()
            .map(|m| m.identity_residual)
            .fold(0.0, f64::max),
        modalities,
        rhs_dynamic,
        rhs_static,
        static_weights,
        cov_sum,
        convexity_passed,
        cov_negative: cov_sum < 0.0,
        weights_matched: (weight_sum - 1.0).abs() < 1e-9,
    })
}

/// Probe loss `softplus(a s + b)`.
pub fn probe_loss(a: f64, b: f64) -> impl Fn(f64) -> f64 {
    move |s| {
        let x = a * s + b;
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    }
}

/// Bound terms over every `(query, component, dim)` element of the encoded
/// examples, with the probe loss using the model's holistic-contrast scalars.
pub fn check_bound(
    model: &ModelParams,
    examples: &[TripletExample],
    seed: u64,
) -> Result<BoundReport> {
    if model.variant.fusion != QueryFusion::Dynamic {
        return Err(HugError::invalid(
            "bound check requires a dynamic-fusion model",
        ));
    }
    if examples.len() < MIN_BOUND_SAMPLE {
        return Err(HugError::invalid(format!(
            "bound check needs at least {MIN_BOUND_SAMPLE} queries, got {}",
            examples.len()
        )));
    }
    let encoded = encode_queries(model, examples)?;
    let mut weights: [Vec<f64>; 3] = Default::default();
    let mut variances: [Vec<f64>; 3] = Default::default();
    for (_, bundle) in &encoded {
        let b = bundle.as_ref().expect("dynamic model carries bundles");
        let vm = b
            .var_m
            .as_ref()
            .expect("dynamic model has a coordination field");
        let w = b.weights.data();
        for (e, ((r, t), m)) in b
            .var_r
            .data()
            .iter()
            .zip(b.var_t.data())
            .zip(vm.data())
            .enumerate()
        {
            for (x, v) in [*r, *t, *m].into_iter().enumerate() {
                weights[x].push(w[3 * e + x]);
                variances[x].push(v);
            }
        }
    }
    let (a, b) = (model.scalar(model.scalars.a), model.scalar(model.scalars.b));
    bound_from_samples(&weights, &variances, probe_loss(a, b), 1000, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCorrelation {
    pub rho_img: Option<f64>,
    pub rho_txt: Option<f64>,
    pub auc_coord: Option<f64>,
    /// Coordination AUC averaged over label shuffles.
    pub auc_coord_shuffled: Option<f64>,
}

/// Per-query overall uncertainties `(var_r, var_t, mean var_m)`.
pub fn query_uncertainties(
    model: &ModelParams,
    examples: &[TripletExample],
) -> Result<Vec<(f64, f64, Option<f64>)>> {
    if !model.variant.probabilistic() {
        return Err(HugError::invalid("point embeddings carry no uncertainty"));
    }
    Ok(encode_queries(model, examples)?
        .iter()
        .map(|(_, b)| {
            let b = b.as_ref().expect("probabilistic model carries bundles");
            (
                field_overall(&b.var_r),
                field_overall(&b.var_t),
                b.mean_coord_uncertainty,
            )
        })
        .collect())
}

/// Rank correlations of labelled noise with uncertainty and the coordination AUC.
pub fn uncertainty_noise_correlation(
    model: &ModelParams,
    examples: &[TripletExample],
    shuffles: usize,
    seed: u64,
) -> Result<NoiseCorrelation> {
    let u = query_uncertainties(model, examples)?;
    let noise_img: Vec<f64> = examples.iter().map(|e| e.labels.noise_img).collect();
    let noise_txt: Vec<f64> = examples.iter().map(|e| e.labels.noise_txt).collect();
    let mismatch: Vec<bool> = examples.iter().map(|e| e.labels.coord_mismatch).collect();
    let var_r: Vec<f64> = u.iter().map(|x| x.0).collect();
    let var_t: Vec<f64> = u.iter().map(|x| x.1).collect();
    let coord: Option<Vec<f64>> = u.iter().map(|x| x.2).collect();
    Ok(NoiseCorrelation {
        rho_img: spearman(&noise_img, &var_r),
        rho_txt: spearman(&noise_txt, &var_t),
        auc_coord: coord.as_ref().and_then(|c| auc(c, &mismatch)),
        auc_coord_shuffled: coord
            .as_ref()
            .and_then(|c| shuffled_auc(c, &mismatch, shuffles, seed)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Exemplar {
    pub index: usize,
    /// Summed reference-image variance at the probed component.
    pub component_var: f64,
    pub overall: f64,
    pub ref_values: Vec<usize>,
    pub ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExemplarReport {
    pub component: usize,
    pub pool: usize,
    pub top: Vec<Exemplar>,
    pub bottom: Vec<Exemplar>,
    pub truncated: bool,
}

/// Highest- and lowest-variance instances at `component` of the reference-image
/// field, after dropping the top decile by overall uncertainty.
pub fn component_exemplars(
    model: &ModelParams,
    examples: &[TripletExample],
    component: usize,
    count: usize,
) -> Result<ExemplarReport> {
    if component >= model.dims.k {
        return Err(HugError::invalid(format!(
            "component {component} out of range for K = {}",
            model.dims.k
        )));
    }
    if !model.variant.probabilistic() {
        return Err(HugError::invalid("point embeddings carry no uncertainty"));
    }
    let encoded = encode_queries(model, examples)?;
    let mut items: Vec<Exemplar> = encoded
        .iter()
        .zip(examples)
        .enumerate()
        .map(|(i, ((_, b), ex))| {
            let var_r = &b
                .as_ref()
                .expect("probabilistic model carries bundles")
                .var_r;
            Exemplar {
                index: i,
                component_var: var_r.row(component).iter().sum(),
                overall: field_overall(var_r),
                ref_values: ex.labels.ref_values.clone(),
                ambiguous: ex.labels.ambiguous,
            }
        })
        .collect();
    items.sort_by(|a, b| a.overall.total_cmp(&b.overall).then(a.index.cmp(&b.index)));
    let keep = items.len() - items.len() / 10;
    items.truncate(keep);
    items.sort_by(|a, b| {
        b.component_var
            .total_cmp(&a.component_var)
            .then(a.index.cmp(&b.index))
    });
    let take = count.min(items.len());
    let top = items[..take].to_vec();
    let bottom = items.iter().rev().take(take).cloned().collect();
    Ok(ExemplarReport {
        component,
        pool: items.len(),
        top,
        bottom,
        truncated: take < count,
    })
}

/// Equal-width histogram `(lower edge, upper edge, count)` of overall reference-image uncertainty.
pub fn uncertainty_histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}
