//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use crate::encoder::ModelDims;
use crate::error::{HugError, Result};
use crate::objectives::{CordSign, LossConfig, PoolCount};
use crate::synthdata::{NoiseConfig, WorldConfig};
use crate::trainer::{AblationMode, AdamW, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub world: u64,
    pub data: u64,
    pub train: u64,
    pub sampler: u64,
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub noise: NoiseConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub k: usize,
    pub d: usize,
    pub d_hidden: usize,
    pub mode: AblationMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: AdamW,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub validate_every_epoch: bool,
    pub seeds: Seeds,
    /// Values of `lambda_cord` retrained and evaluated by a sweep.
    pub sweep_lambda_cord: Vec<f64>,
    pub sweep_lambda_fc: Vec<f64>,
    /// Base step of the five-point central difference used by `check-grad`.
    pub grad_step: f64,
    pub shuffles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig {
                attributes: 4,
                values: 4,
                d_img: 32,
                d_txt: 32,
            },
            noise: NoiseConfig {
                p_img: 0.3,
                sigma_img: 0.5,
                p_txt: 0.2,
                p_mismatch: 0.2,
                ambiguous_attr: None,
                p_ambiguous: 0.0,
            },
            n_train: 4096,
            n_val: 512,
            k: 32,
            d: 16,
            d_hidden: 32,
            mode: AblationMode::FULL,
            batch_size: 32,
            epochs: 30,
            optim: AdamW::default(),
            clip_norm: 5.0,
            loss: LossConfig::default(),
            validate_every_epoch: true,
            seeds: Seeds {
                world: 1,
                data: 2,
                train: 3,
                sampler: 4,
                eval: 5,
            },
            sweep_lambda_cord: Vec::new(),
            sweep_lambda_fc: Vec::new(),
            grad_step: 1e-3,
            shuffles: 20,
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> HugError {
    HugError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(bad(key, format!("must be finite, got `{v}`")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_pool(key: &str, v: &str) -> Result<PoolCount> {
    match v {
        "off" => Ok(PoolCount::Off),
        "auto" => Ok(PoolCount::Auto),
        n => Ok(PoolCount::Fixed(parse_num(key, n)?)),
    }
}

fn show_pool(p: PoolCount) -> String {
    match p {
        PoolCount::Off => "off".into(),
        PoolCount::Auto => "auto".into(),
        PoolCount::Fixed(n) => n.to_string(),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_f64(key, x.trim())).collect()
}

fn show_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Every key in echo order.
pub const KEYS: &[&str] = &[
    "attributes",
    "values",
    "d_img",
    "d_txt",
    "n_train",
    "n_val",
    "p_img",
    "sigma_img",
    "p_txt",
    "p_mismatch",
    "ambiguous_attr",
    "p_ambiguous",
    "k",
    "d",
    "d_hidden",
    "mode",
    "batch_size",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "clip_norm",
    "lambda_fc",
    "lambda_cord",
    "cord_sign",
    "cord_pairs",
    "fc_component",
    "fc_instance",
    "fc_modality",
    "temperature",
    "validate_every_epoch",
    "seed_world",
    "seed_data",
    "seed_train",
    "seed_sampler",
    "seed_eval",
    "sweep_lambda_cord",
    "sweep_lambda_fc",
    "grad_step",
    "shuffles",
];

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line, format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(key, format!("line {}: duplicate key", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "attributes" => self.world.attributes = parse_num(key, v)?,
            "values" => self.world.values = parse_num(key, v)?,
            "d_img" => self.world.d_img = parse_num(key, v)?,
            "d_txt" => self.world.d_txt = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_val" => self.n_val = parse_num(key, v)?,
            "p_img" => self.noise.p_img = parse_f64(key, v)?,
            "sigma_img" => self.noise.sigma_img = parse_f64(key, v)?,
            "p_txt" => self.noise.p_txt = parse_f64(key, v)?,
            "p_mismatch" => self.noise.p_mismatch = parse_f64(key, v)?,
            "ambiguous_attr" => {
                self.noise.ambiguous_attr = match v {
                    "none" => None,
                    n => Some(parse_num(key, n)?),
                }
            }
            "p_ambiguous" => self.noise.p_ambiguous = parse_f64(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "d_hidden" => self.d_hidden = parse_num(key, v)?,
            "mode" => self.mode = AblationMode::new(parse_num(key, v)?)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.optim.lr = parse_f64(key, v)?,
            "beta1" => self.optim.beta1 = parse_f64(key, v)?,
            "beta2" => self.optim.beta2 = parse_f64(key, v)?,
            "eps" => self.optim.eps = parse_f64(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_f64(key, v)?,
            "clip_norm" => self.clip_norm = parse_f64(key, v)?,
            "lambda_fc" => self.loss.lambda_fc = parse_f64(key, v)?,
            "lambda_cord" => self.loss.lambda_cord = parse_f64(key, v)?,
            "cord_sign" => {
                self.loss.cord_sign = match v {
                    "intent" => CordSign::Intent,
                    "printed" => CordSign::Printed,
                    _ => return Err(bad(key, format!("expected intent or printed, got `{v}`"))),
                }
            }
            "cord_pairs" => self.loss.cord_pairs = parse_num(key, v)?,
            "fc_component" => self.loss.pools.component = parse_pool(key, v)?,
            "fc_instance" => self.loss.pools.instance = parse_pool(key, v)?,
            "fc_modality" => self.loss.pools.modality = parse_pool(key, v)?,
            "temperature" => self.loss.temperature = parse_f64(key, v)?,
            "validate_every_epoch" => self.validate_every_epoch = parse_bool(key, v)?,
            "seed_world" => self.seeds.world = parse_num(key, v)?,
            "seed_data" => self.seeds.data = parse_num(key, v)?,
            "seed_train" => self.seeds.train = parse_num(key, v)?,
            "seed_sampler" => self.seeds.sampler = parse_num(key, v)?,
            "seed_eval" => self.seeds.eval = parse_num(key, v)?,
            "sweep_lambda_cord" => self.sweep_lambda_cord = parse_list(key, v)?,
            "sweep_lambda_fc" => self.sweep_lambda_fc = parse_list(key, v)?,
            "grad_step" => self.grad_step = parse_f64(key, v)?,
            "shuffles" => self.shuffles = parse_num(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "attributes" => self.world.attributes.to_string(),
            "values" => self.world.values.to_string(),
            "d_img" => self.world.d_img.to_string(),
            "d_txt" => self.world.d_txt.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "p_img" => self.noise.p_img.to_string(),
            "sigma_img" => self.noise.sigma_img.to_string(),
            "p_txt" => self.noise.p_txt.to_string(),
            "p_mismatch" => self.noise.p_mismatch.to_string(),
            "ambiguous_attr" => self
                .noise
                .ambiguous_attr
                .map_or("none".into(), |a| a.to_string()),
            "p_ambiguous" => self.noise.p_ambiguous.to_string(),
            "k" => self.k.to_string(),
            "d" => self.d.to_string(),
            "d_hidden" => self.d_hidden.to_string(),
            "mode" => self.mode.index().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.optim.lr.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "eps" => self.optim.eps.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "lambda_fc" => self.loss.lambda_fc.to_string(),
            "lambda_cord" => self.loss.lambda_cord.to_string(),
            "cord_sign" => match self.loss.cord_sign {
                CordSign::Intent => "intent".into(),
                CordSign::Printed => "printed".into(),
            },
            "cord_pairs" => self.loss.cord_pairs.to_string(),
            "fc_component" => show_pool(self.loss.pools.component),
            "fc_instance" => show_pool(self.loss.pools.instance),
            "fc_modality" => show_pool(self.loss.pools.modality),
            "temperature" => self.loss.temperature.to_string(),
            "validate_every_epoch" => self.validate_every_epoch.to_string(),
            "seed_world" => self.seeds.world.to_string(),
            "seed_data" => self.seeds.data.to_string(),
            "seed_train" => self.seeds.train.to_string(),
            "seed_sampler" => self.seeds.sampler.to_string(),
            "seed_eval" => self.seeds.eval.to_string(),
            "sweep_lambda_cord" => show_list(&self.sweep_lambda_cord),
            "sweep_lambda_fc" => show_list(&self.sweep_lambda_fc),
            "grad_step" => self.grad_step.to_string(),
            "shuffles" => self.shuffles.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("k", self.k), ("d", self.d), ("d_hidden", self.d_hidden)] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "must be at least 2"));
        }
        if self.n_train < 2 || self.n_val < 1 {
            return Err(bad(
                "n_train/n_val",
                "need at least 2 training and 1 validation triplet",
            ));
        }
        if !(self.optim.lr > 0.0) {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(bad("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.optim.eps > 0.0) || self.optim.weight_decay < 0.0 {
            return Err(bad(
                "eps/weight_decay",
                "eps must be positive and weight_decay non-negative",
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(bad("clip_norm", "must be positive"));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(bad("temperature", "must be positive"));
        }
        if !(self.grad_step > 0.0) {
            return Err(bad("grad_step", "must be positive"));
        }
        if self.loss.lambda_fc < 0.0 || self.loss.lambda_cord < 0.0 {
            return Err(bad("lambda_fc/lambda_cord", "must be non-negative"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            k: self.k,
            d: self.d,
            d_hidden: self.d_hidden,
            d_txt: self.world.d_txt,
            d_img: self.world.d_img,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            dims: self.dims(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            optim: self.optim,
            clip_norm: self.clip_norm,
            loss: self.loss,
            train_seed: self.seeds.train,
            sampler_seed: self.seeds.sampler,
            validate_every_epoch: self.validate_every_epoch,
        }
    }

    /// Seed of the validation split, distinct from the training split's.
    pub fn val_seed(&self) -> u64 {
        self.seeds.data.wrapping_add(0x9E37_79B9_7F4A_7C15)
    }
}
