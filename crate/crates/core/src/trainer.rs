//! Mini-batch training with AdamW and the cumulative ablation ladder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderVariant, ModelDims, ModelParams, QueryFusion};
use crate::error::{HugError, Result};
use crate::evaluator::evaluate_retrieval;
use crate::objectives::{total_loss, FcPools, LossConfig, PoolCount, TripletBatch};
use crate::params::{Graph, ParamStore};
use crate::synthdata::{stack, Gallery, TripletExample};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore, hyper: AdamW) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        OptimState {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with bias correction. Decay applies to parameters flagged
/// for it. A non-finite gradient rejects the whole step and names the parameter.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(HugError::Numerical(format!(
                "non-finite gradient for `{}`",
                store.name(id)
            )));
        }
        if g.shape() != store.get(id).shape() {
            return Err(HugError::ShapeMismatch {
                op: "adamw_step",
                lhs: store.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t));
    for (id, g) in grads.iter() {
        let decay = store.entry(id).decay;
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = store.get_mut(id);
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            if decay {
                *p -= h.lr * h.weight_decay * *p;
            }
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            *p -= h.lr * (*m / c1) / ((*v / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Cumulative ablation ladder, 0 (point embeddings) to 7 (full model).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AblationMode(u8);

impl AblationMode {
    pub const POINT: AblationMode = AblationMode(0);
    pub const FULL: AblationMode = AblationMode(7);

    pub fn new(mode: u8) -> Result<Self> {
        if mode > 7 {
            return Err(HugError::Config {
                key: "mode".into(),
                reason: format!("ablation mode {mode} outside 0..=7"),
            });
        }
        Ok(AblationMode(mode))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = AblationMode> {
        (0..=7).map(AblationMode)
    }

    pub fn variant(self) -> EncoderVariant {
        let fusion = match self.0 {
            0 => QueryFusion::Point,
            1..=4 => QueryFusion::Unimodal,
            5 | 6 => QueryFusion::Static,
            _ => QueryFusion::Dynamic,
        };
        EncoderVariant {
            fusion,
            pooled: self.0 == 1,
        }
    }

    /// Which fine-grained pools (component, instance, modality) are enabled.
    pub fn pools_enabled(self) -> [bool; 3] {
        [self.0 >= 2, self.0 >= 3, self.0 >= 4]
    }

    pub fn uses_coordination_loss(self) -> bool {
        self.0 >= 6
    }

    pub fn describe(self) -> &'static str {
        match self.0 {
            0 => "point embeddings, InfoNCE",
            1 => "probabilistic, pooled variance",
            2 => "+ component-wise fine-grained contrast",
            3 => "+ instance-wise fine-grained contrast",
            4 => "+ modality-wise fine-grained contrast",
            5 => "+ coordination field, static fusion",
            6 => "+ coordination loss",
            _ => "dynamic weighting (full model)",
        }
    }

    /// `base` with pools and the coordination weight switched off where this mode excludes them.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let [c, i, m] = self.pools_enabled();
        let gate = |on: bool, p: PoolCount| if on { p } else { PoolCount::Off };
        LossConfig {
            pools: FcPools {
                component: gate(c, base.pools.component),
                instance: gate(i, base.pools.instance),
                modality: gate(m, base.pools.modality),
            },
            lambda_cord: if self.uses_coordination_loss() {
                base.lambda_cord
            } else {
                0.0
            },
            ..*base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: AblationMode,
    pub dims: ModelDims,
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: AdamW,
    pub clip_norm: f64,
    pub loss: LossConfig,
    /// Seeds parameter initialization and batch shuffling.
    pub train_seed: u64,
    /// Seeds negative sampling.
    pub sampler_seed: u64,
    /// Evaluate validation retrieval after every epoch.
    pub validate_every_epoch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        l_hc: f64,
        l_fc: Option<f64>,
        l_cord: Option<f64>,
        total: f64,
        grad_norm: f64,
        /// Mean fusion weights over (r, t, m); dynamic fusion only.
        weights: Option<[f64; 3]>,
    },
    Epoch {
        epoch: usize,
        mean_total: f64,
        recall_at_1: Option<f64>,
        recall_at_5: Option<f64>,
        recall_at_10: Option<f64>,
    },
    Incident {
        step: u64,
        message: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub model: ModelParams,
    pub optim: OptimState,
    pub log: Vec<MetricRecord>,
    pub diverged: Option<String>,
}

fn validate(cfg: &TrainConfig, train: &[TripletExample]) -> Result<()> {
    if train.is_empty() {
        return Err(HugError::invalid("training set is empty"));
    }
    if cfg.batch_size < 2 {
        return Err(HugError::Config {
            key: "batch_size".into(),
            reason: format!("must be at least 2, got {}", cfg.batch_size),
        });
    }
    if train.len() < 2 {
        return Err(HugError::invalid(
            "training set needs at least two triplets",
        ));
    }
    if !(cfg.clip_norm > 0.0) {
        return Err(HugError::Config {
            key: "clip_norm".into(),
            reason: format!("must be positive, got {}", cfg.clip_norm),
        });
    }
    Ok(())
}

fn batch_of(examples: &[TripletExample], idx: &[usize]) -> TripletBatch {
    let picked: Vec<TripletExample> = idx.iter().map(|&i| examples[i].clone()).collect();
    let (x_r, x_t, x_c) = stack(&picked);
    TripletBatch { x_r, x_t, x_c }
}

/// Trains from a fresh initialization.
pub fn train(
    cfg: &TrainConfig,
    train: &[TripletExample],
    val: Option<(&[TripletExample], &Gallery)>,
) -> Result<TrainOutcome> {
    train_with(cfg, train, val, |_| {})
}

/// As [`train`], passing each metric record to `on_record` as it is produced.
pub fn train_with(
    cfg: &TrainConfig,
    train: &[TripletExample],
    val: Option<(&[TripletExample], &Gallery)>,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    validate(cfg, train)?;
    let mut model = ModelParams::new(cfg.dims, cfg.mode.variant(), cfg.train_seed)?;
    let mut optim = OptimState::new(&model.store, cfg.optim);
    let loss_cfg = cfg.mode.loss_config(&cfg.loss);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    shuffle_rng.set_stream(1);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.sampler_seed);
    let mut log = Vec::new();
    let mut emit = |r: MetricRecord, log: &mut Vec<MetricRecord>| {
        on_record(&r);
        log.push(r);
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut totals = Vec::new();
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = batch_of(train, chunk);
            let step = optim.step + 1;
            let mut g = Graph::new(&model.store);
            let (terms, breakdown) = total_loss(&mut g, &model, &batch, &loss_cfg, &mut sampler)?;
            let failure = if !breakdown.total.is_finite() {
                Some(format!(
                    "non-finite loss {} at step {step}",
                    breakdown.total
                ))
            } else {
                None
            };
            let weights = terms.query.weights.map(|w| {
                let w = g.tape.value(w);
                let mut s = [0.0; 3];
                for row in w.data().chunks(3) {
                    for (a, b) in s.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                s.map(|x| x / w.rows() as f64)
            });
            let grads = match failure {
                Some(f) => Err(HugError::Numerical(f)),
                None => g.tape.backward(terms.total),
            };
            drop(g);
            let outcome = grads.and_then(|mut grads| {
                let norm = grads.global_norm();
                if norm.is_finite() && norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
                adamw_step(&mut model.store, &grads, &mut optim).map(|_| norm)
            });
            match outcome {
                Ok(grad_norm) => {
                    totals.push(breakdown.total);
                    emit(
                        MetricRecord::Step {
                            step,
                            epoch,
                            l_hc: breakdown.hc,
                            l_fc: breakdown.fc,
                            l_cord: breakdown.cord,
                            total: breakdown.total,
                            grad_norm,
                            weights,
                        },
                        &mut log,
                    );
                }
                Err(e) if e.is_numerical() => {
                    let message = e.to_string();
                    emit(
                        MetricRecord::Incident {
                            step,
                            message: message.clone(),
                        },
                        &mut log,
                    );
                    return Ok(TrainOutcome {
                        model,
                        optim,
                        log,
                        diverged: Some(message),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let mean_total = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        let recall = match val {
            Some((examples, gallery)) if cfg.validate_every_epoch || epoch + 1 == cfg.epochs => {
                Some(evaluate_retrieval(&model, examples, gallery)?)
            }
            _ => None,
        };
        let at = |k| recall.as_ref().and_then(|r| r.recall_at(k));
        emit(
            MetricRecord::Epoch {
                epoch,
                mean_total,
                recall_at_1: at(1),
                recall_at_5: at(5),
                recall_at_10: at(10),
            },
            &mut log,
        );
    }
    Ok(TrainOutcome {
        model,
        optim,
        log,
        diverged: None,
    })
}
