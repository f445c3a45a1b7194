//! Cross-attention composer, uncertainty heads and query-side fusion.
//!
//! All graph builders work on batches: `n` instances of `k` component tokens
//! are stacked as an `(n*k) x d` matrix, instance-major.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::FineGrainedGaussian;
use crate::error::{HugError, Result};
use crate::params::{init_normal, init_uniform, Graph, ParamStore};
use crate::tensor::{Axis, ParamId, Tape, Tensor, Var};

/// Log-variance is clamped to this range before exponentiation.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Components per embedding.
    pub k: usize,
    /// Embedding width.
    pub d: usize,
    /// Feed-forward hidden width (composer and heads).
    pub d_hidden: usize,
    pub d_txt: usize,
    pub d_img: usize,
}

/// How the query variance is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryFusion {
    /// Deterministic point embeddings, no heads.
    Point,
    /// Equal-weight average of the reference-image and text fields.
    Unimodal,
    /// Equal-weight average of image, text and coordination fields.
    Static,
    /// Softmax-of-negative-variance weights over the three fields.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderVariant {
    pub fusion: QueryFusion,
    /// Replace every field by its per-instance mean (instance-level uncertainty).
    pub pooled: bool,
}

impl EncoderVariant {
    pub const FULL: EncoderVariant = EncoderVariant {
        fusion: QueryFusion::Dynamic,
        pooled: false,
    };

    pub fn probabilistic(&self) -> bool {
        self.fusion != QueryFusion::Point
    }

    pub fn uses_coordination(&self) -> bool {
        matches!(self.fusion, QueryFusion::Static | QueryFusion::Dynamic)
    }
}

#[derive(Clone, Debug)]
pub struct ComposerParams {
    pub lq: ParamId,
    pub w_txt: ParamId,
    pub w_img: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

impl ComposerParams {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        let d = dims.d;
        ComposerParams {
            lq: store.add("composer.lq", init_normal(rng, dims.k, d, 0.02), false),
            w_txt: store.add("composer.w_txt", init_uniform(rng, dims.d_txt, d), true),
            w_img: store.add("composer.w_img", init_uniform(rng, dims.d_img, d), true),
            w_q: store.add("composer.w_q", init_uniform(rng, d, d), true),
            w_k: store.add("composer.w_k", init_uniform(rng, d, d), true),
            w_v: store.add("composer.w_v", init_uniform(rng, d, d), true),
            ff_w1: store.add("composer.ff_w1", init_uniform(rng, d, dims.d_hidden), true),
            ff_b1: store.add("composer.ff_b1", Tensor::zeros(&[1, dims.d_hidden]), false),
            ff_w2: store.add("composer.ff_w2", init_uniform(rng, dims.d_hidden, d), true),
            ff_b2: store.add("composer.ff_b2", Tensor::zeros(&[1, d]), false),
        }
    }
}

/// One self-attention layer over the component tokens plus a feed-forward
/// stack emitting log-variances.
#[derive(Clone, Debug)]
pub struct UncertaintyHeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

impl UncertaintyHeadParams {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: &ModelDims, name: &str) -> Self {
        let d = dims.d;
        UncertaintyHeadParams {
            w_q: store.add(format!("{name}.w_q"), init_uniform(rng, d, d), true),
            w_k: store.add(format!("{name}.w_k"), init_uniform(rng, d, d), true),
            w_v: store.add(format!("{name}.w_v"), init_uniform(rng, d, d), true),
            ff_w1: store.add(
                format!("{name}.ff_w1"),
                init_uniform(rng, d, dims.d_hidden),
                true,
            ),
            ff_b1: store.add(
                format!("{name}.ff_b1"),
                Tensor::zeros(&[1, dims.d_hidden]),
                false,
            ),
            ff_w2: store.add(
                format!("{name}.ff_w2"),
                init_uniform(rng, dims.d_hidden, d),
                true,
            ),
            ff_b2: store.add(format!("{name}.ff_b2"), Tensor::zeros(&[1, d]), false),
        }
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [
            self.w_q, self.w_k, self.w_v, self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2,
        ]
    }
}

/// Learnable loss scalars: `a`, `b` for the holistic contrast and `a_fc`,
/// `b_fc` for the fine-grained contrast.
#[derive(Clone, Debug)]
pub struct ScalarParams {
    pub a: ParamId,
    pub b: ParamId,
    pub a_fc: ParamId,
    pub b_fc: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub variant: EncoderVariant,
    pub store: ParamStore,
    pub composer: ComposerParams,
    /// Visual head, shared by target images and query reference images.
    pub g_v: Option<UncertaintyHeadParams>,
    pub g_t: Option<UncertaintyHeadParams>,
    pub g_m: Option<UncertaintyHeadParams>,
    pub scalars: ScalarParams,
}

impl ModelParams {
    pub fn new(dims: ModelDims, variant: EncoderVariant, seed: u64) -> Result<Self> {
        if dims.k == 0 || dims.d == 0 || dims.d_hidden == 0 || dims.d_txt == 0 || dims.d_img == 0 {
            return Err(HugError::invalid(format!(
                "model dimensions must be positive: {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let composer = ComposerParams::init(&mut store, &mut rng, &dims);
        let (g_v, g_t) = if variant.probabilistic() {
            (
                Some(UncertaintyHeadParams::init(
                    &mut store, &mut rng, &dims, "g_v",
                )),
                Some(UncertaintyHeadParams::init(
                    &mut store, &mut rng, &dims, "g_t",
                )),
            )
        } else {
            (None, None)
        };
        let g_m = variant
            .uses_coordination()
            .then(|| UncertaintyHeadParams::init(&mut store, &mut rng, &dims, "g_m"));
        let scalars = ScalarParams {
            a: store.add("loss.a", Tensor::scalar(1.0), false),
            b: store.add("loss.b", Tensor::scalar(0.0), false),
            a_fc: store.add("loss.a_fc", Tensor::scalar(1.0), false),
            b_fc: store.add("loss.b_fc", Tensor::scalar(0.0), false),
        };
        Ok(ModelParams {
            dims,
            variant,
            store,
            composer,
            g_v,
            g_t,
            g_m,
            scalars,
        })
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.store.get(id).item()
    }

    fn head(&self, h: &Option<UncertaintyHeadParams>, name: &str) -> Result<UncertaintyHeadParams> {
        h.clone().ok_or_else(|| {
            HugError::invalid(format!(
                "model variant {:?} has no `{name}` head",
                self.variant
            ))
        })
    }
}

pub(crate) fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::full(&[rows, cols], 1.0)
}

/// `(n*k) x k` matrix whose product with a `k x c` matrix stacks it `n` times.
fn tile_matrix(n: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n * k, k]);
    for i in 0..n {
        for j in 0..k {
            t.data_mut()[(i * k + j) * k + j] = 1.0;
        }
    }
    t
}

/// Adds a `1 x c` bias row to every row of `x`.
fn add_bias(g: &mut Graph, x: Var, bias: ParamId) -> Result<Var> {
    let rows = g.tape.value(x).rows();
    let ones = g.constant(ones(rows, 1));
    let b = g.p(bias);
    let b = g.tape.matmul(ones, b)?;
    g.tape.add(x, b)
}

/// `tanh(x w1 + b1) w2 + b2`.
fn feed_forward(
    g: &mut Graph,
    x: Var,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
) -> Result<Var> {
    let w1 = g.p(w1);
    let h = g.tape.matmul(x, w1)?;
    let h = add_bias(g, h, b1)?;
    let h = g.tape.tanh(h);
    let w2 = g.p(w2);
    let o = g.tape.matmul(h, w2)?;
    add_bias(g, o, b2)
}

/// Composer `h(lq, text, image)` over a batch. Inputs are `n x d_txt` and
/// `n x d_img`; the result is `(n*k) x d` component means.
pub fn compose(
    g: &mut Graph,
    p: &ComposerParams,
    dims: &ModelDims,
    text: Option<Var>,
    image: Option<Var>,
) -> Result<Var> {
    let n = match (text, image) {
        (None, None) => return Err(HugError::invalid("compose: both modalities absent")),
        (Some(t), Some(i)) => {
            let (nt, ni) = (g.tape.value(t).rows(), g.tape.value(i).rows());
            if nt != ni {
                return Err(HugError::ShapeMismatch {
                    op: "compose",
                    lhs: g.tape.value(t).shape().to_vec(),
                    rhs: g.tape.value(i).shape().to_vec(),
                });
            }
            nt
        }
        (Some(x), None) | (None, Some(x)) => g.tape.value(x).rows(),
    };
    let (k, d) = (dims.k, dims.d);

    let mut tokens = Vec::with_capacity(2);
    if let Some(t) = text {
        let w = g.p(p.w_txt);
        tokens.push(g.tape.matmul(t, w)?);
    }
    if let Some(i) = image {
        let w = g.p(p.w_img);
        tokens.push(g.tape.matmul(i, w)?);
    }
    let m = tokens.len();
    // (n*m) x d, the m tokens of each instance adjacent
    let tokens = if m == 1 {
        tokens[0]
    } else {
        let wide = g.tape.concat(&tokens, Axis::Cols)?;
        g.tape.reshape(wide, &[n * m, d])?
    };
    let (wk, wv) = (g.p(p.w_k), g.p(p.w_v));
    let keys = g.tape.matmul(tokens, wk)?;
    let values = g.tape.matmul(tokens, wv)?;

    let lq = g.p(p.lq);
    let wq = g.p(p.w_q);
    let queries = g.tape.matmul(lq, wq)?;
    let tile = g.constant(tile_matrix(n, k));
    let queries = g.tape.matmul(tile, queries)?;

    let scores = g.tape.block_matmul(queries, keys, n, true)?;
    let scores = g.tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.tape.row_softmax(scores)?;
    let ctx = g.tape.block_matmul(attn, values, n, false)?;

    let lq_tiled = g.tape.matmul(tile, lq)?;
    let hidden = g.tape.add(ctx, lq_tiled)?;
    let ff = feed_forward(g, hidden, p.ff_w1, p.ff_b1, p.ff_w2, p.ff_b2)?;
    g.tape.add(ff, hidden)
}

/// Variance field `exp(clamp(s, -10, 10))` from `(n*k) x d` means.
pub fn estimate_uncertainty(
    g: &mut Graph,
    head: &UncertaintyHeadParams,
    dims: &ModelDims,
    means: Var,
) -> Result<Var> {
    let rows = g.tape.value(means).rows();
    if rows % dims.k != 0 || g.tape.value(means).cols() != dims.d {
        return Err(HugError::ShapeMismatch {
            op: "estimate_uncertainty",
            lhs: g.tape.value(means).shape().to_vec(),
            rhs: vec![dims.k, dims.d],
        });
    }
    let n = rows / dims.k;
    let (wq, wk, wv) = (g.p(head.w_q), g.p(head.w_k), g.p(head.w_v));
    let q = g.tape.matmul(means, wq)?;
    let kk = g.tape.matmul(means, wk)?;
    let v = g.tape.matmul(means, wv)?;
    let s = g.tape.block_matmul(q, kk, n, true)?;
    let s = g.tape.scale(s, 1.0 / (dims.d as f64).sqrt());
    let attn = g.tape.row_softmax(s)?;
    let ctx = g.tape.block_matmul(attn, v, n, false)?;
    let hidden = g.tape.add(ctx, means)?;
    let logvar = feed_forward(g, hidden, head.ff_w1, head.ff_b1, head.ff_w2, head.ff_b2)?;
    let logvar = g.tape.clamp(logvar, -LOGVAR_BOUND, LOGVAR_BOUND);
    Ok(g.tape.exp(logvar))
}

/// Dynamic fusion on the tape. Returns the fused field (shape of the inputs)
/// and the weights as an `(elements) x 3` matrix with columns `r, t, m`.
///
/// The fused value is written as `lo + sum_x w_x (var_x - lo)` with `lo` the
/// element-wise minimum held constant; since the weights sum to one this is
/// the plain weighted sum, and it cannot round below the smallest source.
pub fn fuse_dynamic(tape: &mut Tape, var_r: Var, var_t: Var, var_m: Var) -> Result<(Var, Var)> {
    let shape = tape.value(var_r).shape().to_vec();
    for v in [var_t, var_m] {
        if tape.value(v).shape() != shape.as_slice() {
            return Err(HugError::ShapeMismatch {
                op: "fuse",
                lhs: shape,
                rhs: tape.value(v).shape().to_vec(),
            });
        }
    }
    let n = tape.value(var_r).len();
    let cols = [var_r, var_t, var_m]
        .iter()
        .map(|&v| tape.reshape(v, &[n, 1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&cols, Axis::Cols)?;
    let neg = tape.neg(stacked);
    let weights = tape.row_softmax(neg)?;

    let lo: Vec<f64> = tape
        .value(stacked)
        .data()
        .chunks(3)
        .map(|c| c[0].min(c[1]).min(c[2]))
        .collect();
    let lo3 = tape.constant(Tensor::matrix(
        n,
        3,
        lo.iter().flat_map(|&x| [x; 3]).collect(),
    ));
    let centered = tape.sub(stacked, lo3)?;
    let weighted = tape.mul(weights, centered)?;
    let ones3 = tape.constant(ones(3, 1));
    let summed = tape.matmul(weighted, ones3)?;
    let lo1 = tape.constant(Tensor::matrix(n, 1, lo));
    let fused = tape.add(summed, lo1)?;
    let fused = tape.reshape(fused, &shape)?;
    Ok((fused, weights))
}

/// Element-wise softmax-of-negative-variance fusion of three `K x D` fields.
///
/// Returns the fused field and the weights as `K x D x 3`.
pub fn fuse_query_uncertainty(
    var_r: &Tensor,
    var_t: &Tensor,
    var_m: &Tensor,
) -> Result<(Tensor, Tensor)> {
    for v in [var_r, var_t, var_m] {
        if let Some(bad) = v.data().iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(HugError::domain(
                "fuse_query_uncertainty",
                format!("invalid variance {bad}"),
            ));
        }
    }
    let mut tape = Tape::new();
    let (r, t, m) = (
        tape.constant(var_r.clone()),
        tape.constant(var_t.clone()),
        tape.constant(var_m.clone()),
    );
    let (fused, weights) = fuse_dynamic(&mut tape, r, t, m)?;
    let mut wshape = var_r.shape().to_vec();
    wshape.push(3);
    Ok((
        tape.value(fused).clone(),
        tape.value(weights).clone().reshaped(&wshape)?,
    ))
}

/// Replaces each instance's `k x d` block by its mean, repeated.
fn pool_instances(tape: &mut Tape, field: Var, k: usize) -> Result<Var> {
    let shape = tape.value(field).shape().to_vec();
    let n = shape[0] / k;
    let width = k * shape[1];
    let flat = tape.reshape(field, &[n, width])?;
    let avg = tape.constant(Tensor::full(&[width, 1], 1.0 / width as f64));
    let mean = tape.matmul(flat, avg)?;
    let spread = tape.constant(ones(1, width));
    let pooled = tape.matmul(mean, spread)?;
    tape.reshape(pooled, &shape)
}

/// Graph nodes of a batch of encoded queries.
#[derive(Clone, Copy, Debug)]
pub struct QueryGraph {
    pub n: usize,
    pub mu: Var,
    /// Fused variance; `None` for point embeddings.
    pub var_q: Option<Var>,
    pub var_r: Option<Var>,
    pub var_t: Option<Var>,
    pub var_m: Option<Var>,
    /// `(n*k*d) x 3` fusion weights (dynamic fusion only).
    pub weights: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct TargetGraph {
    pub n: usize,
    pub mu: Var,
    pub var: Option<Var>,
}

/// Query means and variance fields for `n x d_img` reference images and
/// `n x d_txt` texts.
pub fn query_graph(g: &mut Graph, model: &ModelParams, x_r: Var, x_t: Var) -> Result<QueryGraph> {
    let dims = &model.dims;
    let n = g.tape.value(x_r).rows();
    let mu = compose(g, &model.composer, dims, Some(x_t), Some(x_r))?;
    let variant = model.variant;
    if !variant.probabilistic() {
        return Ok(QueryGraph {
            n,
            mu,
            var_q: None,
            var_r: None,
            var_t: None,
            var_m: None,
            weights: None,
        });
    }
    let g_v = model.head(&model.g_v, "g_v")?;
    let g_t = model.head(&model.g_t, "g_t")?;
    let img_only = compose(g, &model.composer, dims, None, Some(x_r))?;
    let var_r = estimate_uncertainty(g, &g_v, dims, img_only)?;
    let txt_only = compose(g, &model.composer, dims, Some(x_t), None)?;
    let var_t = estimate_uncertainty(g, &g_t, dims, txt_only)?;
    let var_m = if variant.uses_coordination() {
        let g_m = model.head(&model.g_m, "g_m")?;
        Some(estimate_uncertainty(g, &g_m, dims, mu)?)
    } else {
        None
    };

    let (fused, weights) = match (variant.fusion, var_m) {
        (QueryFusion::Dynamic, Some(vm)) => {
            let (f, w) = fuse_dynamic(&mut g.tape, var_r, var_t, vm)?;
            (f, Some(w))
        }
        (QueryFusion::Static, Some(vm)) => {
            let s = g.tape.add(var_r, var_t)?;
            let s = g.tape.add(s, vm)?;
            (g.tape.scale(s, 1.0 / 3.0), None)
        }
        _ => {
            let s = g.tape.add(var_r, var_t)?;
            (g.tape.scale(s, 0.5), None)
        }
    };
    let var_q = if variant.pooled {
        pool_instances(&mut g.tape, fused, dims.k)?
    } else {
        fused
    };
    Ok(QueryGraph {
        n,
        mu,
        var_q: Some(var_q),
        var_r: Some(var_r),
        var_t: Some(var_t),
        var_m,
        weights,
    })
}

/// Target means from image-only composition, variances from the shared visual head.
pub fn target_graph(g: &mut Graph, model: &ModelParams, x_c: Var) -> Result<TargetGraph> {
    let dims = &model.dims;
    let n = g.tape.value(x_c).rows();
    let mu = compose(g, &model.composer, dims, None, Some(x_c))?;
    let var = if model.variant.probabilistic() {
        let g_v = model.head(&model.g_v, "g_v")?;
        let v = estimate_uncertainty(g, &g_v, dims, mu)?;
        Some(if model.variant.pooled {
            pool_instances(&mut g.tape, v, dims.k)?
        } else {
            v
        })
    } else {
        None
    };
    Ok(TargetGraph { n, mu, var })
}

/// Per-query uncertainty fields and fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryUncertaintyBundle {
    pub var_r: Tensor,
    pub var_t: Tensor,
    /// Coordination field; absent for variants without the multi-modal head.
    pub var_m: Option<Tensor>,
    /// `K x D x 3` weights over (r, t, m). Static variants report their constants.
    pub weights: Tensor,
    pub var_q: Tensor,
    /// Mean of `var_m` over all entries.
    pub mean_coord_uncertainty: Option<f64>,
}

fn split_rows(t: &Tensor, n: usize, k: usize) -> Vec<Tensor> {
    let cols = t.cols();
    (0..n)
        .map(|i| Tensor::matrix(k, cols, t.data()[i * k * cols..(i + 1) * k * cols].to_vec()))
        .collect()
}

fn check_input(x: &Tensor, width: usize, what: &str) -> Result<()> {
    if x.rank() != 2 || x.cols() != width || x.rows() == 0 {
        return Err(HugError::ShapeMismatch {
            op: "encode",
            lhs: x.shape().to_vec(),
            rhs: vec![0, width],
        })
        .map_err(|e| HugError::invalid(format!("{what}: {e}")));
    }
    if !x.is_finite() {
        return Err(HugError::domain(
            "encode",
            format!("{what} has non-finite entries"),
        ));
    }
    Ok(())
}

/// Encodes a batch of queries (`x_r`: `n x d_img`, `x_t`: `n x d_txt`).
pub fn encode_query(
    model: &ModelParams,
    x_r: &Tensor,
    x_t: &Tensor,
) -> Result<Vec<(FineGrainedGaussian, Option<QueryUncertaintyBundle>)>> {
    check_input(x_r, model.dims.d_img, "reference image")?;
    check_input(x_t, model.dims.d_txt, "modification text")?;
    if x_r.rows() != x_t.rows() {
        return Err(HugError::ShapeMismatch {
            op: "encode_query",
            lhs: x_r.shape().to_vec(),
            rhs: x_t.shape().to_vec(),
        });
    }
    let mut g = Graph::new(&model.store);
    let (r, t) = (g.constant(x_r.clone()), g.constant(x_t.clone()));
    let qg = query_graph(&mut g, model, r, t)?;
    let (n, k, d) = (qg.n, model.dims.k, model.dims.d);
    let mus = split_rows(g.tape.value(qg.mu), n, k);
    let Some(var_q) = qg.var_q else {
        return mus
            .into_iter()
            .map(|mu| Ok((FineGrainedGaussian::new(mu, Tensor::zeros(&[k, d]))?, None)))
            .collect();
    };
    let var_q = split_rows(g.tape.value(var_q), n, k);
    let var_r = split_rows(g.tape.value(qg.var_r.expect("probabilistic")), n, k);
    let var_t = split_rows(g.tape.value(qg.var_t.expect("probabilistic")), n, k);
    let var_m = qg.var_m.map(|v| split_rows(g.tape.value(v), n, k));
    let weights = match qg.weights {
        Some(w) => split_rows(
            &g.tape.value(w).clone().reshaped(&[n * k * d, 3])?,
            n,
            k * d,
        ),
        None => {
            let w = match model.variant.fusion {
                QueryFusion::Static => [1.0 / 3.0; 3],
                _ => [0.5, 0.5, 0.0],
            };
            vec![Tensor::matrix(k * d, 3, w.repeat(k * d)); n]
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let vm = var_m.as_ref().map(|v| v[i].clone());
        let bundle = QueryUncertaintyBundle {
            var_r: var_r[i].clone(),
            var_t: var_t[i].clone(),
            mean_coord_uncertainty: vm.as_ref().map(|v| v.sum() / v.len() as f64),
            var_m: vm,
            weights: weights[i].clone().reshaped(&[k, d, 3])?,
            var_q: var_q[i].clone(),
        };
        out.push((
            FineGrainedGaussian::new(mus[i].clone(), var_q[i].clone())?,
            Some(bundle),
        ));
    }
    Ok(out)
}

/// Encodes a batch of target images (`n x d_img`).
pub fn encode_target(model: &ModelParams, x_c: &Tensor) -> Result<Vec<FineGrainedGaussian>> {
    check_input(x_c, model.dims.d_img, "target image")?;
    let mut g = Graph::new(&model.store);
    let c = g.constant(x_c.clone());
    let tg = target_graph(&mut g, model, c)?;
    let (n, k, d) = (tg.n, model.dims.k, model.dims.d);
    let mus = split_rows(g.tape.value(tg.mu), n, k);
    let vars = match tg.var {
        Some(v) => split_rows(g.tape.value(v), n, k),
        None => vec![Tensor::zeros(&[k, d]); n],
    };
    mus.into_iter()
        .zip(vars)
        .map(|(mu, var)| FineGrainedGaussian::new(mu, var))
        .collect()
}
