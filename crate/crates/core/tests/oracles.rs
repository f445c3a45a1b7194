//! Worked examples checked against independent re-computations.

use hug_core::embedding::{
    holistic_distance, rank_gallery, EntryId, FineGrainedGaussian, GalleryEntry,
};
use hug_core::encoder::{
    compose, encode_query, encode_target, estimate_uncertainty, query_graph, EncoderVariant,
    ModelDims, ModelParams, QueryFusion, LOGVAR_BOUND,
};
use hug_core::evaluator::{
    bound_from_samples, overall_uncertainty, probe_loss, recall_at_k, subset_recall_at_k,
    SUBSET_SIZE,
};
use hug_core::objectives::{
    check_model_gradients, coordination_loss, distance_matrix, fine_grained_contrast_loss,
    holistic_contrast_loss, perturbed_model, total_loss, CordSign, FcPools, LossConfig, LossTerm,
    PoolCount, TripletBatch, GRAD_CHECK_SCALE,
};
use hug_core::params::Graph;
use hug_core::synthdata::{gen_triplets, gen_world, stack, NoiseConfig, WorldConfig};
use hug_core::tensor::{grad_check_with, Stencil, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

fn small_dims() -> ModelDims {
    ModelDims {
        k: 3,
        d: 4,
        d_hidden: 5,
        d_txt: 6,
        d_img: 6,
    }
}

fn hc_value(dist: &Tensor, a: f64, b: f64) -> f64 {
    let mut tape = Tape::new();
    let d = tape.constant(dist.clone());
    let (av, bv) = (
        tape.constant(Tensor::scalar(a)),
        tape.constant(Tensor::scalar(b)),
    );
    let l = holistic_contrast_loss(&mut tape, d, av, bv).unwrap();
    tape.scalar_value(l)
}

#[test]
fn holistic_loss_two_by_two_enumeration() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_matrix(&mut rng, 2, 2, 0.0, 4.0);
        let (a, b) = (rng.gen_range(0.1..3.0), rng.gen_range(-2.0..2.0));
        let g = |i: usize, j: usize| d.get(i, j);
        // B = 2: mean over the two positives; each direction contributes B * mean over the two negatives
        let positives = 0.5 * (softplus(a * g(0, 0) + b) + softplus(a * g(1, 1) + b));
        let q_to_c = 2.0 * 0.5 * (softplus(-a * g(0, 1) - b) + softplus(-a * g(1, 0) - b));
        let c_to_q = 2.0 * 0.5 * (softplus(-a * g(1, 0) - b) + softplus(-a * g(0, 1) - b));
        let expected = positives + q_to_c + c_to_q;
        assert!(close(hc_value(&d, a, b), expected, 1e-13), "seed {seed}");
    }
}

#[test]
fn holistic_loss_at_zero_distance_and_monotonicity() {
    for n in 2..6 {
        let got = hc_value(&Tensor::zeros(&[n, n]), 1.0, 0.0);
        assert!(close(
            got,
            std::f64::consts::LN_2 * (1.0 + 2.0 * n as f64),
            1e-14
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = random_matrix(&mut rng, 4, 4, 0.5, 3.0);
    let mut closer = d.clone();
    closer.data_mut()[2 * 4 + 2] -= 0.3;
    assert!(hc_value(&closer, 1.2, -0.5) < hc_value(&d, 1.2, -0.5));
}

#[test]
fn coordination_loss_six_pair_enumeration() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matched: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        let pairs: Vec<(usize, usize)> = vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        let mismatched: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
        let expected_intent = pairs
            .iter()
            .zip(&mismatched)
            .map(|(&(i, _), &mm)| -(1.0 / (1.0 + (-(mm - matched[i])).exp())).ln())
            .sum::<f64>()
            / 6.0;
        let expected_printed = pairs
            .iter()
            .zip(&mismatched)
            .map(|(&(i, _), &mm)| -(1.0 / (1.0 + (-(matched[i] - mm)).exp())).ln())
            .sum::<f64>()
            / 6.0;
        for (sign, expected) in [
            (CordSign::Intent, expected_intent),
            (CordSign::Printed, expected_printed),
        ] {
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::matrix(3, 1, matched.clone()));
            let x = tape.constant(Tensor::matrix(6, 1, mismatched.clone()));
            let l = coordination_loss(&mut tape, m, x, &pairs, sign).unwrap();
            assert!(
                close(tape.scalar_value(l), expected, 1e-13),
                "seed {seed} {sign:?}"
            );
        }
    }
}

#[test]
fn coordination_term_vanishes_with_large_gap() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]));
    let x = tape.constant(Tensor::matrix(2, 1, vec![60.0, 60.0]));
    let l = coordination_loss(&mut tape, m, x, &[(0, 1), (1, 0)], CordSign::Intent).unwrap();
    assert!(tape.scalar_value(l) < 1e-25);
}

fn exhaustive() -> FcPools {
    FcPools {
        component: PoolCount::Fixed(usize::MAX),
        instance: PoolCount::Fixed(usize::MAX),
        modality: PoolCount::Fixed(usize::MAX),
    }
}

fn fc_value(vq: &Tensor, vc: &Tensor, n: usize, k: usize, a: f64, b: f64) -> f64 {
    let mut tape = Tape::new();
    let (q, c) = (tape.constant(vq.clone()), tape.constant(vc.clone()));
    let (av, bv) = (
        tape.constant(Tensor::scalar(a)),
        tape.constant(Tensor::scalar(b)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l =
        fine_grained_contrast_loss(&mut tape, q, c, n, k, av, bv, &exhaustive(), &mut rng).unwrap();
    tape.scalar_value(l)
}

#[test]
fn fine_grained_loss_full_enumeration() {
    let (n, k, d) = (2, 3, 4);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vq = random_matrix(&mut rng, n * k, d, 0.0, 2.0);
        let vc = random_matrix(&mut rng, n * k, d, 0.0, 2.0);
        let (a, b) = (rng.gen_range(0.1..2.0), rng.gen_range(-1.0..1.0));
        // every (side, instance, component) anchor against the union of its three pools
        let field = |side: usize| if side == 0 { &vq } else { &vc };
        let mut per_anchor = Vec::new();
        for side in 0..2 {
            for i in 0..n {
                for c in 0..k {
                    let anchor = field(side).row(i * k + c);
                    let mut negs: Vec<&[f64]> = Vec::new();
                    negs.extend(
                        (0..k)
                            .filter(|&c2| c2 != c)
                            .map(|c2| field(side).row(i * k + c2)),
                    );
                    for i2 in (0..n).filter(|&i2| i2 != i) {
                        negs.extend((0..k).map(|c2| field(side).row(i2 * k + c2)));
                    }
                    for i2 in 0..n {
                        negs.extend((0..k).map(|c2| field(1 - side).row(i2 * k + c2)));
                    }
                    assert_eq!(negs.len(), (k - 1) + (n - 1) * k + n * k);
                    let terms: f64 = negs
                        .iter()
                        .map(|s| {
                            let sq: f64 =
                                anchor.iter().zip(*s).map(|(x, y)| (x - y) * (x - y)).sum();
                            softplus(-(a * sq + b))
                        })
                        .sum();
                    per_anchor.push(terms / negs.len() as f64);
                }
            }
        }
        let expected = per_anchor.iter().sum::<f64>() / per_anchor.len() as f64;
        assert!(
            close(fc_value(&vq, &vc, n, k, a, b), expected, 1e-13),
            "seed {seed}"
        );
    }
}

#[test]
fn fine_grained_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, k, d) = (2, 3, 4);
    let vq = random_matrix(&mut rng, n * k, d, 0.0, 2.0);
    let vc = random_matrix(&mut rng, n * k, d, 0.0, 2.0);
    let flat = fc_value(&vq, &vc, n, k, 0.0, 0.0);
    assert!(close(flat, std::f64::consts::LN_2, 1e-14), "{flat}");
    let (spread_q, spread_c) = (vq.map(|x| 2.0 * x), vc.map(|x| 2.0 * x));
    assert!(fc_value(&spread_q, &spread_c, n, k, 0.7, -0.2) < fc_value(&vq, &vc, n, k, 0.7, -0.2));
}

fn tiny_batch(dims: &ModelDims, n: usize, seed: u64) -> TripletBatch {
    let world = gen_world(
        WorldConfig {
            attributes: 3,
            values: 3,
            d_img: dims.d_img,
            d_txt: dims.d_txt,
        },
        seed,
    )
    .unwrap();
    let noise = NoiseConfig {
        p_img: 0.5,
        sigma_img: 0.5,
        p_txt: 0.3,
        p_mismatch: 0.3,
        ambiguous_attr: None,
        p_ambiguous: 0.0,
    };
    let (ex, _) = gen_triplets(&world, n, &noise, seed + 1).unwrap();
    let (x_r, x_t, x_c) = stack(&ex);
    TripletBatch { x_r, x_t, x_c }
}

#[test]
fn total_loss_degenerates_and_recombines() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 4, GRAD_CHECK_SCALE).unwrap();
    let batch = tiny_batch(&dims, 3, 9);

    let zero = LossConfig {
        lambda_fc: 0.0,
        lambda_cord: 0.0,
        ..LossConfig::default()
    };
    let mut g = Graph::new(&model.store);
    let (_, br) = total_loss(
        &mut g,
        &model,
        &batch,
        &zero,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(br.total, br.hc);
    assert!(br.fc.is_none() && br.cord.is_none());

    let cfg = LossConfig::default();
    let mut g = Graph::new(&model.store);
    let (_, br) = total_loss(
        &mut g,
        &model,
        &batch,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let recombined = br.hc + cfg.lambda_fc * br.fc.unwrap() + cfg.lambda_cord * br.cord.unwrap();
    assert!((recombined - br.total).abs() <= 1e-12 * br.total.abs().max(1.0));
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 11, GRAD_CHECK_SCALE).unwrap();
    let batch = tiny_batch(&dims, 2, 12);
    for term in LossTerm::ALL {
        let r =
            check_model_gradients(&model, &batch, &LossConfig::default(), term, 13, 1e-3).unwrap();
        assert!(
            r.max_rel_error < 1e-4,
            "{}: {:e}",
            term.name(),
            r.max_rel_error
        );
    }
}

// Plain-loop linear algebra for the second implementation of the composer.
type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..p)
                .map(|j| (0..m).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn mm_t(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|ra| {
            b.iter()
                .map(|rb| ra.iter().zip(rb).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

fn add_rows(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect())
        .collect()
}

fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn attention_ff(
    queries: &Mat,
    tokens: &Mat,
    residual: &Mat,
    p: [&Tensor; 7],
    d: usize,
    skip: bool,
) -> Mat {
    let [wq, wk, wv, w1, b1, w2, b2] = p;
    let q = mm(queries, &mat(wq));
    let keys = mm(tokens, &mat(wk));
    let vals = mm(tokens, &mat(wv));
    let scores: Mat = mm_t(&q, &keys)
        .iter()
        .map(|r| r.iter().map(|x| x / (d as f64).sqrt()).collect())
        .collect();
    let hidden = add_rows(&mm(&softmax_rows(&scores), &vals), residual);
    let h: Mat = add_bias(&mm(&hidden, &mat(w1)), b1.data())
        .iter()
        .map(|r| r.iter().map(|x| x.tanh()).collect())
        .collect();
    let out = add_bias(&mm(&h, &mat(w2)), b2.data());
    if skip {
        add_rows(&out, &hidden)
    } else {
        out
    }
}

fn reference_compose(model: &ModelParams, text: Option<&[f64]>, image: Option<&[f64]>) -> Mat {
    let s = &model.store;
    let c = &model.composer;
    let mut tokens = Vec::new();
    if let Some(t) = text {
        tokens.push(mm(&vec![t.to_vec()], &mat(s.get(c.w_txt)))[0].clone());
    }
    if let Some(i) = image {
        tokens.push(mm(&vec![i.to_vec()], &mat(s.get(c.w_img)))[0].clone());
    }
    let lq = mat(s.get(c.lq));
    attention_ff(
        &lq,
        &tokens,
        &lq,
        [
            s.get(c.w_q),
            s.get(c.w_k),
            s.get(c.w_v),
            s.get(c.ff_w1),
            s.get(c.ff_b1),
            s.get(c.ff_w2),
            s.get(c.ff_b2),
        ],
        model.dims.d,
        true,
    )
}

fn reference_logvar_head(
    model: &ModelParams,
    head: &hug_core::encoder::UncertaintyHeadParams,
    means: &Mat,
) -> Mat {
    let s = &model.store;
    // queries, keys and values all come from the means; no skip around the feed-forward
    let p = [
        s.get(head.w_q),
        s.get(head.w_k),
        s.get(head.w_v),
        s.get(head.ff_w1),
        s.get(head.ff_b1),
        s.get(head.ff_w2),
        s.get(head.ff_b2),
    ];
    attention_ff(means, means, means, p, model.dims.d, false)
        .iter()
        .map(|r| {
            r.iter()
                .map(|x| x.clamp(-LOGVAR_BOUND, LOGVAR_BOUND).exp())
                .collect()
        })
        .collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

#[test]
fn composer_matches_straight_line_reimplementation() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 21, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 3;
    let x_r = random_matrix(&mut rng, n, dims.d_img, -1.0, 1.0);
    let x_t = random_matrix(&mut rng, n, dims.d_txt, -1.0, 1.0);

    let mut g = Graph::new(&model.store);
    let (r, t) = (g.constant(x_r.clone()), g.constant(x_t.clone()));
    let both = compose(&mut g, &model.composer, &dims, Some(t), Some(r)).unwrap();
    let img = compose(&mut g, &model.composer, &dims, None, Some(r)).unwrap();
    let txt = compose(&mut g, &model.composer, &dims, Some(t), None).unwrap();
    let (both, img, txt) = (
        g.tape.value(both).clone(),
        g.tape.value(img).clone(),
        g.tape.value(txt).clone(),
    );

    let rows = dims.k * dims.d;
    for i in 0..n {
        let cases = [
            (
                &both,
                reference_compose(&model, Some(x_t.row(i)), Some(x_r.row(i))),
            ),
            (&img, reference_compose(&model, None, Some(x_r.row(i)))),
            (&txt, reference_compose(&model, Some(x_t.row(i)), None)),
        ];
        for (got, want) in cases {
            let got = &got.data()[i * rows..(i + 1) * rows];
            for (a, b) in got.iter().zip(flat(&want)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
        let differs = both.data()[i * rows..(i + 1) * rows]
            .iter()
            .zip(&img.data()[i * rows..(i + 1) * rows])
            .any(|(a, b)| (a - b).abs() > 1e-6);
        assert!(differs, "query and target composition coincide");
    }
}

#[test]
fn encoder_matches_reference_and_shares_the_visual_head() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 31, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x_r = random_matrix(&mut rng, 2, dims.d_img, -1.0, 1.0);
    let x_t = random_matrix(&mut rng, 2, dims.d_txt, -1.0, 1.0);
    let queries = encode_query(&model, &x_r, &x_t).unwrap();
    let targets = encode_target(&model, &x_r).unwrap();
    let g_v = model.g_v.as_ref().unwrap();
    let g_m = model.g_m.as_ref().unwrap();
    for i in 0..2 {
        let bundle = queries[i].1.as_ref().unwrap();
        // reference-image variance and target variance of the same image come from one head
        assert_eq!(bundle.var_r, *targets[i].var());
        let want_r = reference_logvar_head(
            &model,
            g_v,
            &reference_compose(&model, None, Some(x_r.row(i))),
        );
        let want_m = reference_logvar_head(
            &model,
            g_m,
            &reference_compose(&model, Some(x_t.row(i)), Some(x_r.row(i))),
        );
        for (a, b) in bundle.var_r.data().iter().zip(flat(&want_r)) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
        let vm = bundle.var_m.as_ref().unwrap();
        for (a, b) in vm.data().iter().zip(flat(&want_m)) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
        let mean = vm.data().iter().sum::<f64>() / vm.len() as f64;
        assert!((bundle.mean_coord_uncertainty.unwrap() - mean).abs() <= 1e-15 * mean.max(1.0));
        assert!(bundle.var_q.data().iter().all(|&v| v > 0.0));
        assert!(targets[i].var().data().iter().all(|&v| v > 0.0));
    }
    assert_eq!(queries, encode_query(&model, &x_r, &x_t).unwrap());
}

#[test]
fn variances_stay_inside_the_clamp() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 41, 3.0).unwrap();
    let (lo, hi) = ((-LOGVAR_BOUND).exp(), LOGVAR_BOUND.exp());
    for scale in [1e-3, 1.0, 1e3, 1e6] {
        let mut rng = ChaCha8Rng::seed_from_u64(scale as u64);
        let means = random_matrix(&mut rng, 2 * dims.k, dims.d, -scale, scale);
        let mut g = Graph::new(&model.store);
        let m = g.constant(means);
        let v = estimate_uncertainty(&mut g, model.g_t.as_ref().unwrap(), &dims, m).unwrap();
        assert!(g
            .tape
            .value(v)
            .data()
            .iter()
            .all(|&x| (lo..=hi).contains(&x)));
    }
}

#[test]
fn uncertainty_head_gradients_match_finite_differences() {
    let dims = small_dims();
    let model = perturbed_model(dims, EncoderVariant::FULL, 51, GRAD_CHECK_SCALE).unwrap();
    let head = model.g_t.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let means = random_matrix(&mut rng, 2 * dims.k, dims.d, -1.0, 1.0);
    let w = random_matrix(&mut rng, 2 * dims.k, dims.d, -1.0, 1.0);
    let values: Vec<Tensor> = head
        .ids()
        .iter()
        .map(|&id| model.store.get(id).clone())
        .collect();
    let report = grad_check_with(
        |tape, vars| {
            let mut store = model.store.clone();
            for (&id, v) in head.ids().iter().zip(vars) {
                *store.get_mut(id) = tape.value(*v).clone();
            }
            let all: Vec<_> = store
                .ids()
                .map(|id| match head.ids().iter().position(|&h| h == id) {
                    Some(p) => vars[p],
                    None => tape.constant(store.get(id).clone()),
                })
                .collect();
            let mut g = Graph::with_vars(std::mem::take(tape), &store, &all)?;
            let m = g.constant(means.clone());
            let v = estimate_uncertainty(&mut g, &head, &dims, m)?;
            let wv = g.constant(w.clone());
            let p = g.tape.mul(v, wv)?;
            let out = g.tape.sum(p);
            *tape = g.tape;
            Ok(out)
        },
        &values,
        1e-3,
        Stencil::FivePoint,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:e}", report.max_rel_error);
}

#[test]
fn end_to_end_distance_gradient_matches_finite_differences() {
    let dims = small_dims();
    for variant in [
        EncoderVariant::FULL,
        EncoderVariant {
            fusion: QueryFusion::Static,
            pooled: false,
        },
        EncoderVariant {
            fusion: QueryFusion::Unimodal,
            pooled: true,
        },
    ] {
        let model = perturbed_model(dims, variant, 61, GRAD_CHECK_SCALE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let x_r = random_matrix(&mut rng, 1, dims.d_img, -1.0, 1.0);
        let x_t = random_matrix(&mut rng, 1, dims.d_txt, -1.0, 1.0);
        let target = encode_target(&model, &random_matrix(&mut rng, 1, dims.d_img, -1.0, 1.0))
            .unwrap()
            .remove(0);
        let values: Vec<Tensor> = model.store.iter().map(|(_, e)| e.value.clone()).collect();
        let report = grad_check_with(
            |tape, vars| {
                let mut g = Graph::with_vars(std::mem::take(tape), &model.store, vars)?;
                let (r, t) = (g.constant(x_r.clone()), g.constant(x_t.clone()));
                let q = query_graph(&mut g, &model, r, t)?;
                let cm = g.constant(target.mu().clone());
                let cv = g.constant(target.var().clone());
                let d = distance_matrix(&mut g.tape, q.mu, q.var_q, cm, Some(cv), 1, 1)?;
                let out = g.tape.sum(d);
                *tape = g.tape;
                Ok(out)
            },
            &values,
            1e-3,
            Stencil::FivePoint,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "{variant:?}: {:e}",
            report.max_rel_error
        );

        // the tape's distance agrees with the closed form on the encoded Gaussians
        let (q, _) = encode_query(&model, &x_r, &x_t).unwrap().remove(0);
        let mut tape = Tape::new();
        let (qm, qv) = (
            tape.constant(q.mu().clone()),
            tape.constant(q.var().clone()),
        );
        let (cm, cv) = (
            tape.constant(target.mu().clone()),
            tape.constant(target.var().clone()),
        );
        let d = distance_matrix(&mut tape, qm, Some(qv), cm, Some(cv), 1, 1).unwrap();
        assert!(close(
            tape.scalar_value(d),
            holistic_distance(&q, &target).unwrap(),
            1e-12
        ));
    }
}

#[test]
fn ranking_matches_pairwise_brute_force() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            FineGrainedGaussian::new(
                random_matrix(rng, 2, 3, -2.0, 2.0),
                random_matrix(rng, 2, 3, 0.0, 1.0),
            )
            .unwrap()
        };
        let q = mk(&mut rng);
        let gallery: Vec<GalleryEntry> = (0..10)
            .map(|i| GalleryEntry {
                id: EntryId(100 + i),
                gaussian: mk(&mut rng),
            })
            .collect();
        let order = rank_gallery(&q, &gallery).unwrap();
        // position = number of entries strictly closer, plus earlier entries at equal distance
        let dist = |g: &FineGrainedGaussian| {
            let mut s = 0.0;
            for (i, (a, b)) in q.mu().data().iter().zip(g.mu().data()).enumerate() {
                s += (a - b) * (a - b) + q.var().data()[i] + g.var().data()[i];
            }
            s
        };
        for (i, e) in gallery.iter().enumerate() {
            let di = dist(&e.gaussian);
            let before = gallery
                .iter()
                .enumerate()
                .filter(|(j, o)| {
                    let dj = dist(&o.gaussian);
                    dj < di - 1e-9 || ((dj - di).abs() <= 1e-9 && *j < i)
                })
                .count();
            assert_eq!(order[before], e.id, "seed {seed}");
        }
    }
}

#[test]
fn zero_noise_targets_are_exact_clean_renderings() {
    let cfg = WorldConfig {
        attributes: 4,
        values: 4,
        d_img: 32,
        d_txt: 32,
    };
    let world = gen_world(cfg, 7).unwrap();
    let (examples, gallery) = gen_triplets(&world, 300, &NoiseConfig::CLEAN, 8).unwrap();
    assert_eq!(gallery.ids.len(), 256);
    for ex in &examples {
        let l = &ex.labels;
        assert!(l.noise_img == 0.0 && l.noise_txt == 0.0 && !l.coord_mismatch && !l.ambiguous);
        let mut values = l.ref_values.clone();
        for e in &l.edits {
            assert_eq!(values[e.attr], e.from);
            values[e.attr] = e.to;
        }
        // clean rendering of the edited attributes: mean of the image codes
        let mut want = vec![0.0; cfg.d_img];
        for (a, &v) in values.iter().enumerate() {
            for (w, c) in want
                .iter_mut()
                .zip(world.image_codes.row(a * cfg.values + v))
            {
                *w += c / cfg.attributes as f64;
            }
        }
        assert_eq!(ex.x_c, want);
        // exact-match retrieval over every gallery rendering ranks the target first
        let best = (0..gallery.ids.len())
            .min_by(|&i, &j| {
                let di: f64 = gallery
                    .images
                    .row(i)
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dj: f64 = gallery
                    .images
                    .row(j)
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                di.total_cmp(&dj)
            })
            .unwrap();
        assert_eq!(gallery.ids[best], l.target_id);
    }
    let all_mismatch = NoiseConfig {
        p_mismatch: 1.0,
        ..NoiseConfig::CLEAN
    };
    let (mm, _) = gen_triplets(&world, 100, &all_mismatch, 9).unwrap();
    assert!(mm.iter().all(|e| e.labels.coord_mismatch));
}

#[test]
fn recall_matches_brute_force_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let ids: Vec<EntryId> = (0..40).map(EntryId).collect();
    let rankings: Vec<Vec<EntryId>> = (0..50)
        .map(|_| {
            let mut r = ids.clone();
            r.shuffle(&mut rng);
            r
        })
        .collect();
    let truth: Vec<EntryId> = (0..50).map(|_| ids[rng.gen_range(0..40)]).collect();
    for k in [1, 5, 10, 50] {
        let mut hits = 0;
        for (r, t) in rankings.iter().zip(&truth) {
            for (pos, id) in r.iter().enumerate() {
                if id == t && pos < k {
                    hits += 1;
                }
            }
        }
        assert_eq!(
            recall_at_k(&rankings, &truth, k).unwrap(),
            hits as f64 / 50.0
        );
    }
    let always_first: Vec<Vec<EntryId>> = truth.iter().map(|&t| vec![t, EntryId(999)]).collect();
    assert_eq!(recall_at_k(&always_first, &truth, 1).unwrap(), 1.0);
}

#[test]
fn subset_recall_fixtures_and_uniform_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let base: Vec<EntryId> = (0..SUBSET_SIZE as u64).map(EntryId).collect();
    let shuffled = |rng: &mut ChaCha8Rng| {
        let mut r = base.clone();
        r.shuffle(rng);
        r
    };
    let rankings: Vec<Vec<EntryId>> = (0..20).map(|_| shuffled(&mut rng)).collect();
    let truth: Vec<EntryId> = (0..20)
        .map(|_| base[rng.gen_range(0..SUBSET_SIZE)])
        .collect();
    for k in 1..=3 {
        let hits = rankings
            .iter()
            .zip(&truth)
            .filter(|(r, t)| r[..k].contains(t))
            .count();
        assert_eq!(
            subset_recall_at_k(&rankings, &truth, k).unwrap(),
            hits as f64 / 20.0
        );
    }

    // a ranking that ignores the query hits the target first one time in six
    let trials = 60_000;
    let rankings: Vec<Vec<EntryId>> = (0..trials).map(|_| shuffled(&mut rng)).collect();
    let truth = vec![EntryId(0); trials];
    let r1 = subset_recall_at_k(&rankings, &truth, 1).unwrap();
    let se = (1.0 / 6.0 * 5.0 / 6.0 / trials as f64).sqrt();
    assert!((r1 - 1.0 / 6.0).abs() < 4.0 * se, "{r1}");
}

#[test]
fn overall_uncertainty_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let (k, d) = (5, 7);
    let var = random_matrix(&mut rng, k, d, 0.0, 3.0);
    let g = FineGrainedGaussian::new(Tensor::zeros(&[k, d]), var.clone()).unwrap();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..d {
            total += var.get(i, j);
        }
    }
    assert!(close(overall_uncertainty(&g), total / k as f64, 1e-14));
    let flat =
        FineGrainedGaussian::new(Tensor::zeros(&[k, d]), Tensor::full(&[k, d], 0.25)).unwrap();
    assert!(close(overall_uncertainty(&flat), d as f64 * 0.25, 1e-15));
}

#[test]
fn identical_modalities_leave_no_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let v: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..2.0)).collect();
    let w = vec![1.0 / 3.0; 300];
    let rep = bound_from_samples(
        &[w.clone(), w.clone(), w],
        &[v.clone(), v.clone(), v],
        probe_loss(1.0, 0.0),
        200,
        1,
    )
    .unwrap();
    for m in &rep.modalities {
        assert!(m.cov.abs() < 1e-15);
    }
    assert!(close(rep.rhs_dynamic, rep.rhs_static, 1e-14));
    assert!(rep.convexity_passed && rep.weights_matched);
}
