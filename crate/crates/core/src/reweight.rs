//! Adversarial reweighting of an augmentation group.
//!
//! For member losses `ℓ` the inner problem
//! `max_w Σ w_i ℓ_i − λ_P·KL(w ‖ uniform)` over the simplex has the
//! maximizer `w = softmax(ℓ / λ_P)` and the maximal value
//! `λ_P·ln(mean(exp(ℓ / λ_P)))`. The hard objective applies this to
//! every member of the group (the original included); the soft objective
//! applies it to the divergences of the augmented members only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("weight vector is empty".into()));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "negative or non-finite weight in {:?}",
                w
            )));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE * w.len() as f64 {
            return Err(Error::InvalidArgument(format!("weights sum to {}", total)));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform weights need n >= 1");
        WeightVector(vec![1.0 / n as f64; n])
    }

    /// All mass on `index`.
    pub fn point(n: usize, index: usize) -> Self {
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        WeightVector(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn linf_distance(&self, other: &WeightVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmelConfig {
    pub lambda_p: f64,
    pub lambda_t: f64,
    pub mode: LossMode,
    /// Weights are constants in the backward pass.
    pub detach_weights: bool,
    pub regression_threshold: f64,
}

impl Default for MmelConfig {
    fn default() -> Self {
        MmelConfig {
            lambda_p: 1.0,
            lambda_t: 1.0,
            mode: LossMode::Hard,
            detach_weights: true,
            regression_threshold: 0.5,
        }
    }
}

impl MmelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p > 0.0) || !self.lambda_p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda_p must be > 0, got {}",
                self.lambda_p
            )));
        }
        if !(self.lambda_t > 0.0) || !self.lambda_t.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda_t must be > 0, got {}",
                self.lambda_t
            )));
        }
        if !self.regression_threshold.is_finite() {
            return Err(Error::InvalidArgument("regression_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Value of a maximal objective together with its maximizing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub weights: WeightVector,
}

/// `Σ w_i ln(n·w_i)` with `0·ln 0 = 0`.
pub fn kl_to_uniform(w: &WeightVector) -> f64 {
    let n = w.len() as f64;
    let kl: f64 = w
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (n * v).ln())
        .sum();
    kl.max(0.0)
}

/// `Σ w_i ℓ_i − λ_P·KL(w ‖ uniform)`.
pub fn expected_loss(losses: &[f64], w: &WeightVector, lambda_p: f64) -> Result<f64> {
    if losses.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} losses against {} weights",
            losses.len(),
            w.len()
        )));
    }
    let weighted: f64 = losses.iter().zip(w.as_slice()).map(|(l, p)| l * p).sum();
    Ok(weighted - lambda_p * kl_to_uniform(w))
}

fn check_inputs(losses: &[f64], lambda_p: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no losses".into()));
    }
    if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {}", bad)));
    }
    if !(lambda_p > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_p must be > 0, got {}",
            lambda_p
        )));
    }
    Ok(())
}

fn softmax_scaled(losses: &[f64], lambda_p: f64) -> WeightVector {
    let m = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = losses.iter().map(|&l| ((l - m) / lambda_p).exp()).collect();
    let total: f64 = e.iter().sum();
    WeightVector(e.into_iter().map(|v| v / total).collect())
}

/// `λ·ln(mean(exp(v/λ)))`, evaluated with max subtraction.
pub fn log_mean_exp(values: &[f64], lambda: f64) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|&v| ((v - m) / lambda).exp()).sum();
    m + lambda * (s / values.len() as f64).ln()
}

/// Closed-form maximizer `softmax(ℓ / λ_P)`.
pub fn mmel_weights(losses: &[f64], lambda_p: f64) -> Result<WeightVector> {
    check_inputs(losses, lambda_p)?;
    Ok(softmax_scaled(losses, lambda_p))
}

/// Hard objective for one group: maximizing weights and the regularized
/// expected loss they attain.
pub fn hard_objective(losses: &[f64], lambda_p: f64) -> Result<Objective> {
    let weights = mmel_weights(losses, lambda_p)?;
    let value = expected_loss(losses, &weights, lambda_p)?;
    Ok(Objective { value, weights })
}

/// Weights over the augmented (non-original) members from their
/// divergences to the original's prediction.
pub fn soft_weights(div_losses: &[f64], lambda_p: f64) -> Result<WeightVector> {
    if div_losses.is_empty() {
        return Err(Error::DegenerateGroup(
            "soft loss needs at least one augmented member (|B| = 1)".into(),
        ));
    }
    mmel_weights(div_losses, lambda_p)
}

/// `orig + λ_T·(Σ w_i div_i − λ_P·Σ w_i ln(m·w_i))`, `m = len(div_losses)`.
pub fn soft_objective(orig_loss: f64, div_losses: &[f64], cfg: &MmelConfig) -> Result<Objective> {
    let weights = soft_weights(div_losses, cfg.lambda_p)?;
    let block = expected_loss(div_losses, &weights, cfg.lambda_p)?;
    Ok(Objective {
        value: orig_loss + cfg.lambda_t * block,
        weights,
    })
}
