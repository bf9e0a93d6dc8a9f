//! Weak and strong perturbations of vector inputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_rate: f64,
    pub strong_scale_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.2,
            strong_dropout_rate: 0.1,
            strong_scale_jitter: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let knobs = [
            self.weak_noise_sigma,
            self.strong_noise_sigma,
            self.strong_dropout_rate,
            self.strong_scale_jitter,
        ];
        if knobs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!("augmentation knobs must be non-negative: {self:?}")));
        }
        if self.strong_noise_sigma < self.weak_noise_sigma {
            return Err(Error::Parameter(format!(
                "strong noise {} is weaker than weak noise {}",
                self.strong_noise_sigma, self.weak_noise_sigma
            )));
        }
        if self.strong_dropout_rate >= 1.0 {
            return Err(Error::Parameter(format!(
                "strong dropout rate must be below 1, got {}",
                self.strong_dropout_rate
            )));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// `x + N(0, σ_weak²)` per coordinate.
pub fn weak_view(x: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Tensor {
    if policy.weak_noise_sigma == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += gaussian(rng, policy.weak_noise_sigma);
    }
    out
}

/// Per-row scale jitter, then additive noise, then coordinate dropout.
pub fn strong_view(x: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let scale = if policy.strong_scale_jitter > 0.0 {
            1.0 + rng.random_range(-policy.strong_scale_jitter..policy.strong_scale_jitter)
        } else {
            1.0
        };
        for v in out.row_slice_mut(i) {
            *v *= scale;
            if policy.strong_noise_sigma > 0.0 {
                *v += gaussian(rng, policy.strong_noise_sigma);
            }
            if policy.strong_dropout_rate > 0.0 && rng.random::<f64>() < policy.strong_dropout_rate {
                *v = 0.0;
            }
        }
    }
    out
}
