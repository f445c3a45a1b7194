//! Fine-grained Gaussian representations and uncertainty-aware distances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HugError, Result};
use crate::tensor::Tensor;

/// `K` diagonal Gaussians of dimension `D`, stored as two `K x D` matrices.
///
/// Variances produced by the encoder are strictly positive; zero is accepted
/// so deterministic fixtures can be expressed.
#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainedGaussian {
    mu: Tensor,
    var: Tensor,
}

impl FineGrainedGaussian {
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.rank() != 2 || mu.shape() != var.shape() || mu.is_empty() {
            return Err(HugError::ShapeMismatch {
                op: "gaussian",
                lhs: mu.shape().to_vec(),
                rhs: var.shape().to_vec(),
            });
        }
        if !mu.is_finite() || !var.is_finite() {
            return Err(HugError::domain("gaussian", "non-finite entries"));
        }
        if let Some(v) = var.data().iter().find(|&&v| v < 0.0) {
            return Err(HugError::domain(
                "gaussian",
                format!("negative variance {v}"),
            ));
        }
        Ok(FineGrainedGaussian { mu, var })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn var(&self) -> &Tensor {
        &self.var
    }

    /// Number of components.
    pub fn k(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn component(&self, k: usize) -> (&[f64], &[f64]) {
        (self.mu.row(k), self.var.row(k))
    }

    /// Same Gaussian with `shift` added to every variance entry.
    pub fn with_var_shift(&self, shift: f64) -> Result<Self> {
        FineGrainedGaussian::new(self.mu.clone(), self.var.map(|v| v + shift))
    }
}

fn check_dims(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<()> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(HugError::ShapeMismatch {
            op: "expected_sq_distance",
            lhs: vec![mu1.len(), var1.len()],
            rhs: vec![mu2.len(), var2.len()],
        });
    }
    Ok(())
}

/// `E ||z1 - z2||^2` for independent diagonal Gaussians:
/// `||mu1 - mu2||^2 + sum(var1) + sum(var2)`.
pub fn expected_sq_distance(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    check_dims(mu1, var1, mu2, var2)?;
    let mean_part: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let v1: f64 = var1.iter().sum();
    let v2: f64 = var2.iter().sum();
    Ok(mean_part + v1 + v2)
}

/// Monte-Carlo estimate of `E ||z1 - z2||^2` and its standard error.
pub fn mc_expected_sq_distance(
    mu1: &[f64],
    var1: &[f64],
    mu2: &[f64],
    var2: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_dims(mu1, var1, mu2, var2)?;
    if n_samples < 2 {
        return Err(HugError::invalid(
            "mc_expected_sq_distance: n_samples must be >= 2",
        ));
    }
    let sd1: Vec<f64> = var1.iter().map(|v| v.sqrt()).collect();
    let sd2: Vec<f64> = var2.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford: a constant sample stream keeps the mean exact and M2 at zero.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for n in 1..=n_samples {
        let mut sq = 0.0;
        for i in 0..mu1.len() {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let z1 = mu1[i] + sd1[i] * e1;
            let z2 = mu2[i] + sd2[i] * e2;
            sq += (z1 - z2) * (z1 - z2);
        }
        let delta = sq - mean;
        mean += delta / n as f64;
        m2 += delta * (sq - mean);
    }
    let sample_var = m2 / (n_samples - 1) as f64;
    Ok((mean, (sample_var / n_samples as f64).sqrt()))
}

/// Frobenius form of the holistic distance:
/// `||mu_q - mu_c||_F^2 + sum(var_q) + sum(var_c)`.
pub fn holistic_distance(q: &FineGrainedGaussian, c: &FineGrainedGaussian) -> Result<f64> {
    if q.mu.shape() != c.mu.shape() {
        return Err(HugError::ShapeMismatch {
            op: "holistic_distance",
            lhs: q.mu.shape().to_vec(),
            rhs: c.mu.shape().to_vec(),
        });
    }
    let mean_part: f64 =
        q.mu.data()
            .iter()
            .zip(c.mu.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    Ok(mean_part + q.var.sum() + c.var.sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryId(pub u64);

#[derive(Clone, Debug)]
pub struct GalleryEntry {
    pub id: EntryId,
    pub gaussian: FineGrainedGaussian,
}

/// Gallery ids ordered by ascending holistic distance; ties keep insertion order.
pub fn rank_gallery(q: &FineGrainedGaussian, gallery: &[GalleryEntry]) -> Result<Vec<EntryId>> {
    if gallery.is_empty() {
        return Err(HugError::invalid("rank_gallery: empty gallery"));
    }
    let mut scored = gallery
        .iter()
        .map(|e| holistic_distance(q, &e.gaussian).map(|d| (d, e.id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}
