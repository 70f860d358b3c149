//! Periodic smoothing of monthly parameter estimates into daily curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `c0 + c1 cos ωτ + c2 sin ωτ + c3 cos 2ωτ + c4 sin 2ωτ`, `ω = 2π/365`,
/// with `τ` a position in days within the year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCurve {
    pub coefficients: [f64; 5],
}

fn basis(tau: f64) -> [f64; 5] {
    let w = 2.0 * std::f64::consts::PI * tau / 365.0;
    [1.0, w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin()]
}

/// Position of the middle of calendar month `m` (1-based), with the year
/// split into twelve equal parts.
pub fn month_midpoint(m: usize) -> f64 {
    365.0 * (m as f64 - 0.5) / 12.0
}

impl HarmonicCurve {
    /// Least-squares fit through `(position, value)` points.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 5 {
            return Err(Error::InvalidInput(format!(
                "harmonic smoothing needs at least 5 points, got {}",
                points.len()
            )));
        }
        let x = DMatrix::from_fn(points.len(), 5, |i, j| basis(points[i].0)[j]);
        let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
        let sol = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Self {
            coefficients: [sol[0], sol[1], sol[2], sol[3], sol[4]],
        })
    }

    pub fn eval(&self, tau: f64) -> f64 {
        basis(tau)
            .iter()
            .zip(&self.coefficients)
            .map(|(b, c)| b * c)
            .sum()
    }

    /// Values for days 1..=365, each evaluated at the middle of the day.
    pub fn daily(&self) -> Vec<f64> {
        (1..=365).map(|d| self.eval(d as f64 - 0.5)).collect()
    }
}

/// Smooths twelve monthly values (missing months as `None`) into 365 daily
/// values, floored at `floor`.
pub fn smooth_seasonal(monthly: &[Option<f64>; 12], floor: f64) -> Result<Vec<f64>> {
    let points: Vec<(f64, f64)> = monthly
        .iter()
        .enumerate()
        .filter_map(|(m, v)| v.map(|v| (month_midpoint(m + 1), v)))
        .collect();
    let curve = HarmonicCurve::fit(&points)?;
    Ok(curve.daily().into_iter().map(|v| v.max(floor)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_reproduced() {
        let daily = smooth_seasonal(&[Some(2.5); 12], 0.0).unwrap();
        assert_eq!(daily.len(), 365);
        assert!(daily.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn monthly_cosine_is_exact_at_midpoints() {
        let monthly: [Option<f64>; 12] =
            std::array::from_fn(|i| Some((2.0 * std::f64::consts::PI * (i + 1) as f64 / 12.0).cos()));
        let pts: Vec<(f64, f64)> = (0..12).map(|i| (month_midpoint(i + 1), monthly[i].unwrap())).collect();
        let curve = HarmonicCurve::fit(&pts).unwrap();
        for (tau, v) in &pts {
            assert!((curve.eval(*tau) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn winter_high_pattern_is_kept() {
        let ranges = [40.0, 38.0, 33.0, 25.0, 22.0, 28.0, 30.0, 29.0, 24.0, 26.0, 33.0, 39.0];
        let monthly = ranges.map(Some);
        let daily = smooth_seasonal(&monthly, 0.1 * 22.0).unwrap();
        let jan = daily[0..31].iter().sum::<f64>() / 31.0;
        let may = daily[120..151].iter().sum::<f64>() / 31.0;
        let jul = daily[181..212].iter().sum::<f64>() / 31.0;
        assert!(jan > jul && jan > may);
        assert!(daily.iter().all(|v| *v >= 2.2));
    }

    #[test]
    fn floor_applies() {
        let mut monthly = [Some(0.0); 12];
        monthly[0] = Some(-5.0);
        let daily = smooth_seasonal(&monthly, 0.0).unwrap();
        assert!(daily.iter().all(|v| *v >= 0.0));
        let mut sparse = [None; 12];
        sparse[0] = Some(1.0);
        assert!(smooth_seasonal(&sparse, 0.0).is_err());
    }
}
