//! Procedural composed-retrieval triplets with labeled noise.
//!
//! Images are means of per-attribute codebook vectors. A modification text is
//! the mean of per-edit codes whose first half names the attribute and its
//! current value and whose second half names the new value.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EntryId;
use crate::error::{HugError, Result};
use crate::tensor::Tensor;

/// Gallery size cap; the gallery enumerates every attribute combination.
pub const MAX_GALLERY: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub attributes: usize,
    pub values: usize,
    pub d_img: usize,
    pub d_txt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeWorld {
    pub config: WorldConfig,
    /// `attributes * values` rows of width `d_img`, row `a * values + v`.
    pub image_codes: Tensor,
    /// Same layout, width `d_txt`.
    pub text_codes: Tensor,
    pub seed: u64,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / norm));
    }
    Tensor::matrix(rows, cols, data)
}

pub fn gen_world(config: WorldConfig, seed: u64) -> Result<AttributeWorld> {
    if config.attributes < 2 || config.values < 2 {
        return Err(HugError::Config {
            key: "attributes/values".into(),
            reason: format!(
                "need at least 2 of each, got {}x{}",
                config.attributes, config.values
            ),
        });
    }
    if config.d_img == 0 || config.d_txt < 2 {
        return Err(HugError::Config {
            key: "d_img/d_txt".into(),
            reason: "d_img must be positive and d_txt at least 2".into(),
        });
    }
    let combos = (config.values as u128).checked_pow(config.attributes as u32);
    if combos.map_or(true, |c| c > MAX_GALLERY as u128) {
        return Err(HugError::Config {
            key: "attributes/values".into(),
            reason: format!("values^attributes exceeds {MAX_GALLERY}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.attributes * config.values;
    let image_codes = unit_rows(&mut rng, n, config.d_img);
    let text_codes = unit_rows(&mut rng, n, config.d_txt);
    Ok(AttributeWorld {
        config,
        image_codes,
        text_codes,
        seed,
    })
}

impl AttributeWorld {
    pub fn image_code(&self, attr: usize, value: usize) -> &[f64] {
        self.image_codes.row(attr * self.config.values + value)
    }

    pub fn text_code(&self, attr: usize, value: usize) -> &[f64] {
        self.text_codes.row(attr * self.config.values + value)
    }

    /// Clean image for one value per attribute.
    pub fn render(&self, values: &[usize]) -> Vec<f64> {
        let mut x = vec![0.0; self.config.d_img];
        for (a, &v) in values.iter().enumerate() {
            for (xi, ci) in x.iter_mut().zip(self.image_code(a, v)) {
                *xi += ci;
            }
        }
        let scale = 1.0 / values.len() as f64;
        x.iter_mut().for_each(|xi| *xi *= scale);
        x
    }

    /// Code for editing `attr` from `from` to `to`.
    pub fn edit_code(&self, attr: usize, from: usize, to: usize) -> Vec<f64> {
        let half = self.config.d_txt / 2;
        let mut code = self.text_code(attr, from)[..half].to_vec();
        code.extend_from_slice(&self.text_code(attr, to)[half..]);
        code
    }

    pub fn gallery_size(&self) -> usize {
        self.config.values.pow(self.config.attributes as u32)
    }

    /// Gallery id of a value assignment (base-`values` digits, attribute 0 most significant).
    pub fn combo_id(&self, values: &[usize]) -> EntryId {
        EntryId(
            values
                .iter()
                .fold(0u64, |acc, &v| acc * self.config.values as u64 + v as u64),
        )
    }

    pub fn combo_values(&self, id: EntryId) -> Vec<usize> {
        let mut rest = id.0 as usize;
        let mut out = vec![0; self.config.attributes];
        for slot in out.iter_mut().rev() {
            *slot = rest % self.config.values;
            rest /= self.config.values;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Probability that the reference image is corrupted.
    pub p_img: f64,
    /// Expected norm of the added image noise (per-dimension std `sigma_img / sqrt(d_img)`).
    pub sigma_img: f64,
    /// Probability that the new-value half of the text is zeroed.
    pub p_txt: f64,
    /// Probability that the text names a current value the reference does not hold.
    pub p_mismatch: f64,
    /// Attribute whose reference code may be blurred to the mean of its values.
    pub ambiguous_attr: Option<usize>,
    pub p_ambiguous: f64,
}

impl NoiseConfig {
    pub const CLEAN: NoiseConfig = NoiseConfig {
        p_img: 0.0,
        sigma_img: 0.0,
        p_txt: 0.0,
        p_mismatch: 0.0,
        ambiguous_attr: None,
        p_ambiguous: 0.0,
    };

    fn validate(&self, world: &AttributeWorld) -> Result<()> {
        for (key, p) in [
            ("p_img", self.p_img),
            ("p_txt", self.p_txt),
            ("p_mismatch", self.p_mismatch),
            ("p_ambiguous", self.p_ambiguous),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HugError::Config {
                    key: key.into(),
                    reason: format!("probability {p} outside [0, 1]"),
                });
            }
        }
        if !(self.sigma_img >= 0.0 && self.sigma_img.is_finite()) {
            return Err(HugError::Config {
                key: "sigma_img".into(),
                reason: format!("must be finite and non-negative, got {}", self.sigma_img),
            });
        }
        if let Some(a) = self.ambiguous_attr {
            if a >= world.config.attributes {
                return Err(HugError::Config {
                    key: "ambiguous_attr".into(),
                    reason: format!("attribute {a} out of range"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub attr: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletLabels {
    pub ref_values: Vec<usize>,
    pub edits: Vec<Edit>,
    pub target_values: Vec<usize>,
    pub target_id: EntryId,
    /// Euclidean norm of the noise added to the reference image (0 when clean).
    pub noise_img: f64,
    /// 1 when the text's new-value half was zeroed.
    pub noise_txt: f64,
    pub coord_mismatch: bool,
    /// The ambiguous attribute was blurred in the reference image.
    #[serde(default)]
    pub ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletExample {
    pub x_r: Vec<f64>,
    pub x_t: Vec<f64>,
    pub x_c: Vec<f64>,
    pub labels: TripletLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub ids: Vec<EntryId>,
    /// One clean rendering per row.
    pub images: Tensor,
}

impl Gallery {
    pub fn position(&self, id: EntryId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// Every attribute combination, in id order.
pub fn full_gallery(world: &AttributeWorld) -> Gallery {
    let n = world.gallery_size();
    let ids: Vec<EntryId> = (0..n as u64).map(EntryId).collect();
    let mut data = Vec::with_capacity(n * world.config.d_img);
    for &id in &ids {
        data.extend(world.render(&world.combo_values(id)));
    }
    Gallery {
        ids,
        images: Tensor::matrix(n, world.config.d_img, data),
    }
}

fn gen_one(world: &AttributeWorld, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> TripletExample {
    let cfg = world.config;
    let ref_values: Vec<usize> = (0..cfg.attributes)
        .map(|_| rng.gen_range(0..cfg.values))
        .collect();

    let n_edits = rng.gen_range(1..=2usize).min(cfg.attributes);
    let mut attrs: Vec<usize> = (0..cfg.attributes).collect();
    attrs.shuffle(rng);
    let mut edits: Vec<Edit> = attrs[..n_edits]
        .iter()
        .map(|&attr| {
            let from = ref_values[attr];
            let mut to = rng.gen_range(0..cfg.values - 1);
            if to >= from {
                to += 1;
            }
            Edit { attr, from, to }
        })
        .collect();
    edits.sort_by_key(|e| e.attr);

    let mut target_values = ref_values.clone();
    for e in &edits {
        target_values[e.attr] = e.to;
    }
    let x_c = world.render(&target_values);

    let mut x_r = world.render(&ref_values);
    let mut ambiguous = false;
    if let Some(attr) = noise.ambiguous_attr {
        if rng.gen_bool(noise.p_ambiguous) {
            ambiguous = true;
            let scale = 1.0 / cfg.attributes as f64;
            let own = world.image_code(attr, ref_values[attr]);
            for (i, xi) in x_r.iter_mut().enumerate() {
                let blurred = (0..cfg.values)
                    .map(|v| world.image_code(attr, v)[i])
                    .sum::<f64>()
                    / cfg.values as f64;
                *xi += scale * (blurred - own[i]);
            }
        }
    }
    let mut noise_img = 0.0;
    if rng.gen_bool(noise.p_img) {
        let sd = noise.sigma_img / (cfg.d_img as f64).sqrt();
        let mut sq = 0.0;
        for xi in x_r.iter_mut() {
            let e = sd * rng.sample::<f64, _>(StandardNormal);
            *xi += e;
            sq += e * e;
        }
        noise_img = sq.sqrt();
    }

    // Mismatch: the first edit claims a current value the reference does not hold.
    let mut stated_from: Vec<usize> = edits.iter().map(|e| e.from).collect();
    let coord_mismatch = rng.gen_bool(noise.p_mismatch);
    if coord_mismatch {
        let e = edits[0];
        let choices: Vec<usize> = (0..cfg.values)
            .filter(|&v| v != e.from && v != e.to)
            .collect();
        let pool: Vec<usize> = if choices.is_empty() {
            (0..cfg.values).filter(|&v| v != e.from).collect()
        } else {
            choices
        };
        stated_from[0] = *pool.choose(rng).expect("values >= 2");
    }
    let vague = rng.gen_bool(noise.p_txt);
    let half = cfg.d_txt / 2;
    let mut x_t = vec![0.0; cfg.d_txt];
    for (e, &from) in edits.iter().zip(&stated_from) {
        for (xi, ci) in x_t.iter_mut().zip(world.edit_code(e.attr, from, e.to)) {
            *xi += ci / edits.len() as f64;
        }
    }
    if vague {
        x_t[half..].iter_mut().for_each(|x| *x = 0.0);
    }

    let target_id = world.combo_id(&target_values);
    TripletExample {
        x_r,
        x_t,
        x_c,
        labels: TripletLabels {
            ref_values,
            edits,
            target_values,
            target_id,
            noise_img,
            noise_txt: if vague { 1.0 } else { 0.0 },
            coord_mismatch,
            ambiguous,
        },
    }
}

/// `n` triplets plus the gallery of every attribute combination.
///
/// Example `i` draws from its own stream of the seeded generator, so the
/// output does not depend on generation order.
pub fn gen_triplets(
    world: &AttributeWorld,
    n: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(Vec<TripletExample>, Gallery)> {
    if n == 0 {
        return Err(HugError::Config {
            key: "n".into(),
            reason: "need at least one triplet".into(),
        });
    }
    noise.validate(world)?;
    let examples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            gen_one(world, noise, &mut rng)
        })
        .collect();
    Ok((examples, full_gallery(world)))
}

/// Stacks the three feature vectors of `examples` into matrices `(x_r, x_t, x_c)`.
pub fn stack(examples: &[TripletExample]) -> (Tensor, Tensor, Tensor) {
    let rows = |f: &dyn Fn(&TripletExample) -> &Vec<f64>| {
        let width = examples.first().map_or(0, |e| f(e).len());
        Tensor::matrix(
            examples.len(),
            width,
            examples.iter().flat_map(|e| f(e).iter().copied()).collect(),
        )
    };
    (rows(&|e| &e.x_r), rows(&|e| &e.x_t), rows(&|e| &e.x_c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> AttributeWorld {
        gen_world(
            WorldConfig {
                attributes: 3,
                values: 3,
                d_img: 8,
                d_txt: 8,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn world_is_seeded_and_unit_norm() {
        let a = world();
        assert_eq!(a, world());
        let b = gen_world(a.config, 6).unwrap();
        assert_ne!(a.image_codes, b.image_codes);
        for t in [&a.image_codes, &a.text_codes] {
            for r in 0..t.rows() {
                let n: f64 = t.row(r).iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_world_rejected() {
        let mut cfg = world().config;
        cfg.values = 1;
        assert!(gen_world(cfg, 1).is_err());
    }

    #[test]
    fn combo_ids_round_trip() {
        let w = world();
        for id in 0..w.gallery_size() as u64 {
            assert_eq!(w.combo_id(&w.combo_values(EntryId(id))), EntryId(id));
        }
    }

    #[test]
    fn clean_triplets_are_consistent() {
        let w = world();
        let (ex, gallery) = gen_triplets(&w, 50, &NoiseConfig::CLEAN, 3).unwrap();
        assert_eq!(gallery.ids.len(), 27);
        for e in &ex {
            let l = &e.labels;
            assert!(l.noise_img == 0.0 && l.noise_txt == 0.0 && !l.coord_mismatch);
            assert_eq!(e.x_r, w.render(&l.ref_values));
            assert_eq!(e.x_c, w.render(&l.target_values));
            assert_eq!(
                gallery.images.row(gallery.position(l.target_id).unwrap()),
                e.x_c.as_slice()
            );
            for ed in &l.edits {
                assert_eq!(l.ref_values[ed.attr], ed.from);
                assert_ne!(ed.from, ed.to);
            }
        }
    }

    #[test]
    fn mismatch_and_labels() {
        let w = world();
        let noise = NoiseConfig {
            p_mismatch: 1.0,
            ..NoiseConfig::CLEAN
        };
        let (ex, _) = gen_triplets(&w, 30, &noise, 3).unwrap();
        assert!(ex.iter().all(|e| e.labels.coord_mismatch));

        let bad = NoiseConfig {
            p_img: 1.5,
            ..NoiseConfig::CLEAN
        };
        assert!(gen_triplets(&w, 3, &bad, 1).is_err());
        assert!(gen_triplets(&w, 0, &NoiseConfig::CLEAN, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let noise = NoiseConfig {
            p_img: 0.5,
            sigma_img: 0.5,
            p_txt: 0.5,
            p_mismatch: 0.5,
            ambiguous_attr: Some(1),
            p_ambiguous: 0.5,
        };
        let a = gen_triplets(&w, 40, &noise, 9).unwrap();
        let b = gen_triplets(&w, 40, &noise, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_triplets(&w, 40, &noise, 10).unwrap();
        assert_ne!(a.0, c.0);
    }
}
