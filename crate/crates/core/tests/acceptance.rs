//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use hug_core::checkpoint::{build_dataset, load_model, model_container, save_model, Dataset};
use hug_core::cli::{grad_check_report, train_run};
use hug_core::config::RunConfig;
use hug_core::embedding::{
    expected_sq_distance, mc_expected_sq_distance, rank_gallery, EntryId, FineGrainedGaussian,
    GalleryEntry,
};
use hug_core::encoder::{fuse_query_uncertainty, ModelParams};
use hug_core::evaluator::{
    bound_from_samples, check_bound, evaluate_retrieval, probe_loss, uncertainty_noise_correlation,
};
use hug_core::objectives::{distance_matrix, LossTerm};
use hug_core::tensor::{grad_check, Tensor};
use hug_core::trainer::AblationMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const K: usize = 8;
const D: usize = 16;

const MC_PAIRS: u64 = 100;
const MC_SAMPLES: usize = 100_000;
const MC_SIGMAS: f64 = 3.0;
const MC_MIN_PASS: usize = 99;

const GRAD_TOL_LOSS: f64 = 1e-4;
const GRAD_TOL_DISTANCE: f64 = 1e-6;
const DISTANCE_STEP: f64 = 1e-2;

const FUSION_FIELDS: u64 = 1000;
const SIMPLEX_TOL: f64 = 1e-12;

const IDENTITY_TOL: f64 = 1e-9;
const BOUND_BUDGET: Duration = Duration::from_secs(5 * 60);

const ABLATION_STEP: f64 = 0.02;
const ABLATION_TOTAL: f64 = 0.05;
const ABLATION_BUDGET: Duration = Duration::from_secs(20 * 60);

const COORD_AUC_MIN: f64 = 0.8;
const RHO_IMG_MIN: f64 = 0.5;
const NULL_AUC_TOL: f64 = 0.05;

const CORD_DROP: f64 = 0.01;
const FC_DROP: f64 = 0.02;

const RANK_TRIALS: u64 = 1000;
const RANK_GALLERY: usize = 32;

const MINUTE: Duration = Duration::from_secs(60);

fn base_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.k = K;
    cfg.d = D;
    cfg.validate_every_epoch = false;
    cfg
}

struct Trained {
    model: ModelParams,
    elapsed: Duration,
}

/// Trains each (mode, lambda_cord, lambda_fc) once.
struct Lab {
    cfg: RunConfig,
    data: Dataset,
    runs: HashMap<(u8, u64, u64), Trained>,
}

impl Lab {
    fn new() -> Self {
        let cfg = base_config();
        let data = build_dataset(&cfg).expect("dataset");
        Lab {
            cfg,
            data,
            runs: HashMap::new(),
        }
    }

    fn train(&mut self, mode: u8, lambda_cord: f64, lambda_fc: f64) -> &Trained {
        let key = (mode, lambda_cord.to_bits(), lambda_fc.to_bits());
        if !self.runs.contains_key(&key) {
            let mut cfg = self.cfg.clone();
            cfg.mode = AblationMode::new(mode).unwrap();
            cfg.loss.lambda_cord = lambda_cord;
            cfg.loss.lambda_fc = lambda_fc;
            let start = Instant::now();
            let out = train_run(&cfg, &self.data, |_| {}).expect("training");
            let elapsed = start.elapsed();
            if let Some(msg) = &out.diverged {
                println!("  note: mode {mode} (lambda_cord {lambda_cord}, lambda_fc {lambda_fc}) diverged: {msg}");
            }
            self.runs.insert(
                key,
                Trained {
                    model: out.model,
                    elapsed,
                },
            );
        }
        &self.runs[&key]
    }

    fn full(&mut self) -> &Trained {
        let (c, f) = (self.cfg.loss.lambda_cord, self.cfg.loss.lambda_fc);
        self.train(7, c, f)
    }

    fn full_model(&mut self) -> (ModelParams, Duration) {
        let t = self.full();
        (t.model.clone(), t.elapsed)
    }

    fn recall(&mut self, mode: u8, lambda_cord: f64, lambda_fc: f64) -> (f64, f64) {
        self.train(mode, lambda_cord, lambda_fc);
        let key = (mode, lambda_cord.to_bits(), lambda_fc.to_bits());
        let rep =
            evaluate_retrieval(&self.runs[&key].model, &self.data.val, &self.data.gallery).unwrap();
        (rep.recall_at(1).unwrap(), rep.recall_avg())
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> FineGrainedGaussian {
    let mu = (0..K * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let var = (0..K * D).map(|_| rng.gen_range(0.01..1.0)).collect();
    FineGrainedGaussian::new(Tensor::matrix(K, D, mu), Tensor::matrix(K, D, var)).unwrap()
}

fn criterion_1() -> (bool, String) {
    let mut passed = 0;
    for seed in 0..MC_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, c) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let (qm, qv, cm, cv) = (q.mu().data(), q.var().data(), c.mu().data(), c.var().data());
        let exact = expected_sq_distance(qm, qv, cm, cv).unwrap();
        let (est, se) = mc_expected_sq_distance(qm, qv, cm, cv, MC_SAMPLES, 10_000 + seed).unwrap();
        if (exact - est).abs() <= MC_SIGMAS * se {
            passed += 1;
        }
    }
    (
        passed >= MC_MIN_PASS,
        format!(
            "{passed}/{MC_PAIRS} pairs within {MC_SIGMAS} standard errors (need >= {MC_MIN_PASS})"
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let mut cfg = base_config();
    cfg.mode = AblationMode::FULL;
    let report = grad_check_report(&cfg).expect("gradient check");
    let mut ok = report.len() == LossTerm::ALL.len();
    let mut parts = Vec::new();
    for (term, err) in &report {
        ok &= *err < GRAD_TOL_LOSS;
        parts.push(format!("{} {err:.1e}", term.name()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (m, n) = (3, 4);
    let mut field = |rows: usize, lo: f64, hi: f64| {
        Tensor::matrix(
            rows,
            D,
            (0..rows * D).map(|_| rng.gen_range(lo..hi)).collect(),
        )
    };
    let params = [
        field(m * K, -1.0, 1.0),
        field(m * K, 0.05, 1.0),
        field(n * K, -1.0, 1.0),
        field(n * K, 0.05, 1.0),
    ];
    let w = Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let dist = grad_check(
        |t, v| {
            let dm = distance_matrix(t, v[0], Some(v[1]), v[2], Some(v[3]), m, n)?;
            let w = t.constant(w.clone());
            let p = t.mul(dm, w)?;
            Ok(t.sum(p))
        },
        &params,
        DISTANCE_STEP,
    )
    .unwrap();
    ok &= dist.max_rel_error < GRAD_TOL_DISTANCE;
    parts.push(format!("distance kernel {:.1e}", dist.max_rel_error));
    (
        ok,
        format!(
            "{} (loss tol {GRAD_TOL_LOSS:e}, kernel tol {GRAD_TOL_DISTANCE:e})",
            parts.join(", ")
        ),
    )
}

fn criterion_3() -> (bool, String) {
    let mut worst_sum: f64 = 0.0;
    let mut bracket_violations = 0usize;
    for seed in 0..FUSION_FIELDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field =
            || Tensor::matrix(K, D, (0..K * D).map(|_| rng.gen_range(1e-4..5.0)).collect());
        let (r, t, m) = (field(), field(), field());
        let (fused, w) = fuse_query_uncertainty(&r, &t, &m).unwrap();
        for e in 0..K * D {
            let ws = &w.data()[3 * e..3 * e + 3];
            worst_sum = worst_sum.max((ws.iter().sum::<f64>() - 1.0).abs());
            let xs = [r.data()[e], t.data()[e], m.data()[e]];
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let f = fused.data()[e];
            if !(lo <= f && f <= hi) {
                bracket_violations += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let same = Tensor::matrix(K, D, (0..K * D).map(|_| rng.gen_range(1e-4..5.0)).collect());
    let (_, w) = fuse_query_uncertainty(&same, &same, &same).unwrap();
    let symmetric = w.data().iter().all(|&x| x == 1.0 / 3.0);
    (
        worst_sum <= SIMPLEX_TOL && bracket_violations == 0 && symmetric,
        format!(
            "max |sum w - 1| {worst_sum:.1e} (tol {SIMPLEX_TOL:e}), bracket violations {bracket_violations}, symmetric weights exactly 1/3: {symmetric}"
        ),
    )
}

fn criterion_4(lab: &mut Lab) -> (bool, String) {
    let mut worst_random: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let mut weights: [Vec<f64>; 3] = Default::default();
        let mut vars: [Vec<f64>; 3] = Default::default();
        for _ in 0..n {
            let raw: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let s: f64 = raw.iter().sum();
            for x in 0..3 {
                weights[x].push(raw[x] / s);
                vars[x].push(rng.gen_range(0.0..3.0));
            }
        }
        let rep = bound_from_samples(&weights, &vars, probe_loss(1.3, -0.4), 100, seed).unwrap();
        worst_random = worst_random.max(rep.max_identity_residual);
    }

    let seed = lab.cfg.seeds.eval;
    let (model, train_time) = lab.full_model();
    let start = Instant::now();
    let rep = check_bound(&model, &lab.data.val, seed).unwrap();
    let elapsed = train_time + start.elapsed();
    let ok = worst_random <= IDENTITY_TOL
        && rep.max_identity_residual <= IDENTITY_TOL
        && rep.cov_negative
        && rep.weights_matched
        && rep.rhs_dynamic <= rep.rhs_static
        && elapsed < BOUND_BUDGET;
    (
        ok,
        format!(
            "identity residual {:.1e} random / {:.1e} trained (tol {IDENTITY_TOL:e}); {} queries; sum Cov {:.3e} (< 0); RHS dynamic {:.10} vs static {:.10}; E[w] = [{:.4}, {:.4}, {:.4}]; {:.0} s (budget {} s)",
            worst_random,
            rep.max_identity_residual,
            lab.data.val.len(),
            rep.cov_sum,
            rep.rhs_dynamic,
            rep.rhs_static,
            rep.static_weights[0],
            rep.static_weights[1],
            rep.static_weights[2],
            elapsed.as_secs_f64(),
            BOUND_BUDGET.as_secs()
        ),
    )
}

fn criterion_5(lab: &mut Lab) -> (bool, String) {
    let (c, f) = (lab.cfg.loss.lambda_cord, lab.cfg.loss.lambda_fc);
    let mut r = HashMap::new();
    let mut total = Duration::ZERO;
    for mode in [0u8, 1, 4, 5, 6, 7] {
        r.insert(mode, lab.recall(mode, c, f).0);
        total += lab.runs[&(mode, c.to_bits(), f.to_bits())].elapsed;
    }
    let checks = [
        ("1 > 0 by 2 pts", r[&1] - r[&0] >= ABLATION_STEP),
        ("4 > 1 by 2 pts", r[&4] - r[&1] >= ABLATION_STEP),
        ("7 >= 6", r[&7] >= r[&6]),
        ("6 >= 5", r[&6] >= r[&5]),
        ("7 > 0 by 5 pts", r[&7] - r[&0] >= ABLATION_TOTAL),
        ("time < 20 min", total < ABLATION_BUDGET),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (
        failed.is_empty(),
        format!(
            "R@1 mode0 {:.4} mode1 {:.4} mode4 {:.4} mode5 {:.4} mode6 {:.4} mode7 {:.4}; training {:.1} min; failed: [{}]",
            r[&0],
            r[&1],
            r[&4],
            r[&5],
            r[&6],
            r[&7],
            total.as_secs_f64() / 60.0,
            failed.join("; ")
        ),
    )
}

fn criteria_6_7(lab: &mut Lab) -> ((bool, String), (bool, String)) {
    let (seed, shuffles) = (lab.cfg.seeds.eval, lab.cfg.shuffles);
    let (model, _) = lab.full_model();
    let nc = uncertainty_noise_correlation(&model, &lab.data.val, shuffles, seed).unwrap();
    let auc = nc.auc_coord.unwrap_or(f64::NAN);
    let rho = nc.rho_img.unwrap_or(f64::NAN);
    let null = nc.auc_coord_shuffled.unwrap_or(f64::NAN);
    (
        (auc > COORD_AUC_MIN, format!("coordination AUC {auc:.4} (need > {COORD_AUC_MIN})")),
        (
            rho > RHO_IMG_MIN && (null - 0.5).abs() <= NULL_AUC_TOL,
            format!(
                "Spearman rho(noise_img, var_r) {rho:.4} (need > {RHO_IMG_MIN}); shuffled-label AUC {null:.4} (need 0.5 +/- {NULL_AUC_TOL}); rho(noise_txt, var_t) {:.4}",
                nc.rho_txt.unwrap_or(f64::NAN)
            ),
        ),
    )
}

fn criterion_8(lab: &mut Lab) -> (bool, String) {
    let (c, f) = (lab.cfg.loss.lambda_cord, lab.cfg.loss.lambda_fc);
    let cord: Vec<(f64, f64)> = [0.0, 0.1, 1.0]
        .iter()
        .map(|&l| (l, lab.recall(7, l, f).1))
        .collect();
    let fc: Vec<(f64, f64)> = [0.0, 0.5]
        .iter()
        .map(|&l| (l, lab.recall(7, c, l).1))
        .collect();
    let at_01 = cord[1].1;
    let best = at_01 >= cord[0].1 && at_01 >= cord[2].1;
    let cord_drop = at_01 - cord[2].1;
    let fc_drop = fc[1].1 - fc[0].1;
    let show = |v: &[(f64, f64)]| {
        v.iter()
            .map(|(l, r)| format!("{l}: {r:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    (
        best && cord_drop >= CORD_DROP && fc_drop >= FC_DROP,
        format!(
            "recall avg by lambda_cord {{{}}}, best at 0.1: {best}, drop at 1.0 {:.2} pts (need >= {}); by lambda_fc {{{}}}, drop at 0 {:.2} pts (need >= {})",
            show(&cord),
            100.0 * cord_drop,
            100.0 * CORD_DROP,
            show(&fc),
            100.0 * fc_drop,
            100.0 * FC_DROP
        ),
    )
}

fn criterion_9(lab: &Lab) -> (bool, String) {
    let mut cfg = lab.cfg.clone();
    cfg.epochs = 2;
    let data = Dataset {
        train: lab.data.train[..512].to_vec(),
        ..lab.data.clone()
    };
    let run = || model_container(&train_run(&cfg, &data, |_| {}).unwrap().model, &cfg).to_bytes();
    let (a, b) = (run(), run());
    let identical_runs = a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.hugc");
    let (model, _) = hug_core::checkpoint::model_from_container(
        &hug_core::checkpoint::Container::from_bytes(&a).unwrap(),
    )
    .unwrap();
    save_model(&path, &model, &cfg).unwrap();
    let first = std::fs::read(&path).unwrap();
    let (loaded, loaded_cfg) = load_model(&path).unwrap();
    let again = dir.path().join("again.hugc");
    save_model(&again, &loaded, &loaded_cfg).unwrap();
    let second = std::fs::read(&again).unwrap();
    let round_trip = first == second && first == a;
    (
        identical_runs && round_trip,
        format!(
            "seeded runs bit-identical: {identical_runs} ({} bytes); save/load/save byte-identical: {round_trip}",
            a.len()
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let mut changed = 0;
    for seed in 0..RANK_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_gaussian(&mut rng);
        let gallery: Vec<GalleryEntry> = (0..RANK_GALLERY)
            .map(|i| GalleryEntry {
                id: EntryId(i as u64),
                gaussian: random_gaussian(&mut rng),
            })
            .collect();
        let shift = rng.gen_range(0.0..10.0);
        let base = rank_gallery(&q, &gallery).unwrap();
        let shifted = rank_gallery(&q.with_var_shift(shift).unwrap(), &gallery).unwrap();
        if base != shifted {
            changed += 1;
        }
    }
    (
        changed == 0,
        format!("{changed}/{RANK_TRIALS} shifted queries changed their ranking"),
    )
}

fn main() {
    // optional numeric arguments restrict the run to those criteria
    let only: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |id: u8| only.is_empty() || only.contains(&id);
    let mut results: Vec<(u8, &str, bool)> = Vec::new();
    let mut record = |id: u8,
                      name: &'static str,
                      budget: Option<Duration>,
                      f: &mut dyn FnMut() -> (bool, String)| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let (mut ok, mut detail) = f();
        let elapsed = start.elapsed();
        if let Some(b) = budget {
            ok &= elapsed < b;
            detail.push_str(&format!(" (runtime budget {} s)", b.as_secs()));
        }
        println!(
            "criterion {id:>2} {name}: {} | {detail} | {:.1} s",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        results.push((id, name, ok));
    };

    record(1, "distance oracle", Some(MINUTE), &mut criterion_1);
    record(2, "gradient fidelity", Some(MINUTE), &mut criterion_2);
    record(3, "fusion invariants", None, &mut criterion_3);
    record(10, "ranking invariance", None, &mut criterion_10);
    let mut lab = Lab::new();
    record(9, "determinism and persistence", None, &mut || {
        criterion_9(&lab)
    });
    record(4, "bound mechanics", None, &mut || criterion_4(&mut lab));
    if wanted(6) || wanted(7) {
        let (c6, c7) = criteria_6_7(&mut lab);
        record(6, "coordination separation", None, &mut || c6.clone());
        record(7, "interpretability probes", None, &mut || c7.clone());
    }
    record(5, "ablation direction", None, &mut || criterion_5(&mut lab));
    record(8, "sensitivity shape", None, &mut || criterion_8(&mut lab));

    results.sort_by_key(|r| r.0);
    println!("\nsummary:");
    for (id, name, ok) in &results {
        println!(
            "criterion {id:>2} {name}: {}",
            if *ok { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.2).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
