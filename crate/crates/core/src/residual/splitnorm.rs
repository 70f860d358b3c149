//! Split-normal (two-piece normal) marginals.
//!
//! Density `A·exp(−(x−μ)²/(2σ1²))` left of `μ` and `A·exp(−(x−μ)²/(2σ2²))`
//! right of it, with `A = sqrt(2/π)/(σ1+σ2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::optim::brent_min;

pub const MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitNormal {
    pub mu: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl SplitNormal {
    pub fn new(mu: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0 && mu.is_finite() && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "split-normal needs finite location and positive scales, got ({mu}, {sigma1}, {sigma2})"
            )));
        }
        Ok(Self { mu, sigma1, sigma2 })
    }

    /// Probability mass left of the mode.
    pub fn lower_mass(&self) -> f64 {
        self.sigma1 / (self.sigma1 + self.sigma2)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let s = if x < self.mu { self.sigma1 } else { self.sigma2 };
        let z = (x - self.mu) / s;
        (2.0 / std::f64::consts::PI).sqrt() / (self.sigma1 + self.sigma2) * (-0.5 * z * z).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let total = self.sigma1 + self.sigma2;
        if x < self.mu {
            2.0 * self.sigma1 / total * normal::cdf((x - self.mu) / self.sigma1)
        } else {
            1.0 - 2.0 * self.sigma2 / total * normal::cdf(-(x - self.mu) / self.sigma2)
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!("probability {p} outside (0, 1)")));
        }
        Ok(self.quantile_unchecked(p))
    }

    pub(crate) fn quantile_unchecked(&self, p: f64) -> f64 {
        let total = self.sigma1 + self.sigma2;
        if p < self.lower_mass() {
            self.mu + self.sigma1 * normal::quantile(p * total / (2.0 * self.sigma1))
        } else {
            self.mu - self.sigma2 * normal::quantile((1.0 - p) * total / (2.0 * self.sigma2))
        }
    }

    pub fn mean(&self) -> f64 {
        self.mu + (2.0 / std::f64::consts::PI).sqrt() * (self.sigma2 - self.sigma1)
    }

    pub fn variance(&self) -> f64 {
        (1.0 - 2.0 / std::f64::consts::PI) * (self.sigma2 - self.sigma1).powi(2)
            + self.sigma1 * self.sigma2
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|x| self.pdf(*x).ln()).sum()
    }
}

/// Maximum-likelihood split-normal fit, optionally weighted.
///
/// For fixed `μ` the scales have closed forms, leaving the profile
/// `S1(μ)^{1/3} + S2(μ)^{1/3}` to minimize, where `S1`, `S2` are the weighted
/// sums of squared deviations left and right of `μ`.
pub fn sn_fit(samples: &[f64], weights: Option<&[f64]>) -> Result<SplitNormal> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Degenerate(format!(
            "split-normal fit needs at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != samples.len() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite, non-negative and match samples".into()));
        }
    }
    let mut pairs: Vec<(f64, f64)> = samples
        .iter()
        .enumerate()
        .map(|(i, x)| (*x, weights.map_or(1.0, |w| w[i])))
        .filter(|p| p.1 > 0.0)
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();

    // prefix sums of w, w·x, w·x²
    let mut pw = vec![0.0; n + 1];
    let mut px = vec![0.0; n + 1];
    let mut pxx = vec![0.0; n + 1];
    for (i, (x, w)) in pairs.iter().enumerate() {
        pw[i + 1] = pw[i] + w;
        px[i + 1] = px[i] + w * x;
        pxx[i + 1] = pxx[i] + w * x * x;
    }
    let total_w = pw[n];
    let mean = px[n] / total_w;
    let var = (pxx[n] / total_w - mean * mean).max(0.0);
    let spread = pairs[n - 1].0 - pairs[0].0;
    if n < 2 || spread <= 1e-12 * mean.abs().max(1.0) || var <= 0.0 {
        return Err(Error::Degenerate("split-normal sample has zero variance".into()));
    }

    let sums = |mu: f64| -> (f64, f64) {
        let k = pairs.partition_point(|p| p.0 < mu);
        let s1 = pxx[k] - 2.0 * mu * px[k] + mu * mu * pw[k];
        let (w2, x2, xx2) = (total_w - pw[k], px[n] - px[k], pxx[n] - pxx[k]);
        let s2 = xx2 - 2.0 * mu * x2 + mu * mu * w2;
        (s1.max(0.0), s2.max(0.0))
    };
    let profile = |mu: f64| {
        let (s1, s2) = sums(mu);
        s1.cbrt() + s2.cbrt()
    };

    let best = (0..n)
        .min_by(|&a, &b| profile(pairs[a].0).total_cmp(&profile(pairs[b].0)))
        .unwrap_or(0);
    let x_best = pairs[best].0;
    let below = pairs.partition_point(|p| p.0 < x_best);
    let above = pairs.partition_point(|p| p.0 <= x_best);
    let lo = pairs[below.saturating_sub(1)].0;
    let hi = pairs[above.min(n - 1)].0;
    let (mut mu, mut g) = (pairs[best].0, profile(pairs[best].0));
    if hi > lo {
        let (m, gm) = brent_min(profile, lo, hi, 1e-12);
        if gm < g {
            mu = m;
            g = gm;
        }
    }

    let (s1, s2) = sums(mu);
    let c = (g / total_w).sqrt();
    let floor = 1e-6 * var.sqrt();
    SplitNormal::new(mu, (s1.cbrt() * c).max(floor), (s2.cbrt() * c).max(floor))
}

/// Gaussian fit expressed as a split normal with equal scales.
pub fn normal_fit(samples: &[f64], weights: Option<&[f64]>) -> Result<SplitNormal> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Degenerate(format!(
            "normal fit needs at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let tw: f64 = (0..samples.len()).map(w).sum();
    let mean = samples.iter().enumerate().map(|(i, x)| w(i) * x).sum::<f64>() / tw;
    let var = samples
        .iter()
        .enumerate()
        .map(|(i, x)| w(i) * (x - mean).powi(2))
        .sum::<f64>()
        / tw;
    if var <= 0.0 {
        return Err(Error::Degenerate("normal sample has zero variance".into()));
    }
    SplitNormal::new(mean, var.sqrt(), var.sqrt())
}
