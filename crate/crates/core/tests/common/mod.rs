#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use stormgen::field::Field;
use stormgen::moments::{design_row, MomentModel};

/// Sandwich standard errors of the moment coefficients at the true model:
/// expected information as bread, long-run variance of the day-aggregated
/// score (non-overlapping blocks of `block` days) as meat.
pub fn sandwich_se(field: &Field, truth: &MomentModel, block: usize) -> Vec<f64> {
    let cal = field.calendar(truth.reference_year);
    let surface = truth.predict_on(field);
    let covs: Vec<[f64; 3]> = field
        .grid()
        .cells()
        .iter()
        .map(|c| truth.normalizer.apply(c.covariates()))
        .collect();
    let p = 17;
    let mut info = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    let mut acc = DVector::<f64>::zeros(p);
    for t in 0..field.n_days() {
        for (c, z) in covs.iter().enumerate() {
            let (m, s) = design_row(*z, f64::from(cal.day[t]), cal.decade[t], true);
            let sigma = surface.sigma(c, t);
            let u = (field.get(c, t) - surface.mu(c, t)) / sigma;
            for i in 0..9 {
                acc[i] += u / sigma * m[i];
                for j in 0..9 {
                    info[(i, j)] += m[i] * m[j] / (sigma * sigma);
                }
            }
            for i in 0..8 {
                acc[9 + i] += (u * u - 1.0) * s[i];
                for j in 0..8 {
                    info[(9 + i, 9 + j)] += 2.0 * s[i] * s[j];
                }
            }
        }
        if (t + 1) % block == 0 || t + 1 == field.n_days() {
            meat += &acc * acc.transpose();
            acc.fill(0.0);
        }
    }
    let inv = info.try_inverse().expect("information matrix is invertible");
    let cov = &inv * meat * &inv;
    (0..p).map(|k| cov[(k, k)].sqrt()).collect()
}
