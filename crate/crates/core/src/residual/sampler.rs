//! Exact Gaussian field draws under the exponential covariance model.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::residual::variogram::VariogramParams;

const MAX_JITTER: f64 = 1e-6;

/// Cache key: parameters rounded to 1e-6.
type Key = [i64; 3];

fn key(p: &VariogramParams) -> Key {
    [p.nugget, p.sill, p.range_km].map(|v| (v * 1e6).round() as i64)
}

/// Draws `N(0, Σ)` vectors on a fixed grid, with
/// `Σ_ij = θ0·1{i=j} + θ1·exp(−h_ij/θ2)`. Cholesky factors are cached per
/// rounded parameter triple and built from the rounded values, so a draw
/// depends only on the key and the random numbers.
pub struct FieldSampler {
    grid: Arc<GridSpec>,
    distances: DMatrix<f64>,
    cache: HashMap<Key, Arc<DMatrix<f64>>>,
}

impl FieldSampler {
    pub fn new(grid: Arc<GridSpec>) -> Self {
        let n = grid.len();
        let distances = DMatrix::from_fn(n, n, |i, j| grid.cell(i).distance_km(grid.cell(j)));
        Self {
            grid,
            distances,
            cache: HashMap::new(),
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn covariance(&self, p: &VariogramParams) -> DMatrix<f64> {
        let n = self.grid.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                p.nugget + p.sill
            } else {
                p.sill * (-self.distances[(i, j)] / p.range_km).exp()
            }
        })
    }

    /// Lower Cholesky factor of the covariance for `p`.
    ///
    /// The diagonal jitter starts at `1e-10·tr(Σ)/S` and grows tenfold until
    /// the factorization succeeds or exceeds 1e-6.
    pub fn factor(&mut self, p: &VariogramParams) -> Result<Arc<DMatrix<f64>>> {
        let k = key(p);
        if let Some(l) = self.cache.get(&k) {
            return Ok(l.clone());
        }
        let rounded = VariogramParams {
            nugget: k[0] as f64 * 1e-6,
            sill: k[1] as f64 * 1e-6,
            range_km: (k[2] as f64 * 1e-6).max(1e-6),
        };
        let sigma = self.covariance(&rounded);
        let n = sigma.nrows();
        let mut jitter = 1e-10 * sigma.trace() / n.max(1) as f64;
        if !(jitter > 0.0) {
            jitter = 1e-16;
        }
        loop {
            let mut m = sigma.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                let l = Arc::new(ch.unpack());
                self.cache.insert(k, l.clone());
                return Ok(l);
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER {
                return Err(Error::Factorization {
                    max_jitter: MAX_JITTER,
                });
            }
        }
    }

    pub fn sample<R: Rng>(&mut self, p: &VariogramParams, rng: &mut R) -> Result<Vec<f64>> {
        let l = self.factor(p)?;
        let z = DVector::from_iterator(l.nrows(), (0..l.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Ok((&*l * z).iter().copied().collect())
    }

    /// `L·E` for a block of standard normal columns sharing one parameter triple.
    pub fn transform_block(&mut self, p: &VariogramParams, normals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = self.factor(p)?;
        Ok(&*l * normals)
    }

    pub fn cached_factors(&self) -> usize {
        self.cache.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn flat(_: f64, _: f64) -> (f64, f64, f64) {
        (0.0, 0.0, 0.0)
    }

    fn draws(s: &mut FieldSampler, p: &VariogramParams, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| s.sample(p, &mut rng).unwrap()).collect()
    }

    fn corr(x: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let n = x.len() as f64;
        let mi = x.iter().map(|v| v[i]).sum::<f64>() / n;
        let mj = x.iter().map(|v| v[j]).sum::<f64>() / n;
        let cij = x.iter().map(|v| (v[i] - mi) * (v[j] - mj)).sum::<f64>();
        let ci = x.iter().map(|v| (v[i] - mi).powi(2)).sum::<f64>();
        let cj = x.iter().map(|v| (v[j] - mj).powi(2)).sum::<f64>();
        cij / (ci * cj).sqrt()
    }

    #[test]
    fn pure_nugget_is_independent() {
        let g = Arc::new(GridSpec::regular(3, 2, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let mut s = FieldSampler::new(g);
        let p = VariogramParams::new(1.0, 0.0, 10.0).unwrap();
        let x = draws(&mut s, &p, 10_000, 1);
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(corr(&x, i, j).abs() < 0.05);
            }
        }
    }

    #[test]
    fn correlation_at_one_range() {
        let g = Arc::new(GridSpec::regular(2, 1, 20.0, (0.0, 0.0), 1, flat).unwrap());
        let mut s = FieldSampler::new(g);
        let p = VariogramParams::new(0.0, 1.0, 20.0).unwrap();
        let x = draws(&mut s, &p, 10_000, 2);
        assert!((corr(&x, 0, 1) - (-1.0f64).exp()).abs() < 0.03);
    }

    #[test]
    fn sample_covariance_matches_model() {
        let g = Arc::new(GridSpec::regular(4, 3, 7.0, (0.0, 0.0), 1, flat).unwrap());
        let mut s = FieldSampler::new(g);
        let p = VariogramParams::new(0.1, 0.9, 15.0).unwrap();
        let x = draws(&mut s, &p, 10_000, 3);
        let sigma = s.covariance(&p);
        let n = x.len() as f64;
        let mut max_dev: f64 = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                let c = x.iter().map(|v| v[i] * v[j]).sum::<f64>() / n;
                max_dev = max_dev.max((c - sigma[(i, j)]).abs());
            }
        }
        assert!(max_dev < 0.05, "{max_dev}");
    }

    #[test]
    fn factors_are_cached_by_rounded_key() {
        let g = Arc::new(GridSpec::regular(3, 3, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let mut s = FieldSampler::new(g);
        let a = VariogramParams::new(0.1, 0.5, 3.0).unwrap();
        let b = VariogramParams::new(0.1 + 1e-9, 0.5, 3.0).unwrap();
        let la = s.factor(&a).unwrap();
        let lb = s.factor(&b).unwrap();
        assert!(Arc::ptr_eq(&la, &lb));
        assert_eq!(s.cached_factors(), 1);
        let l = s.factor(&a).unwrap();
        let back = &*l * l.transpose();
        let sigma = s.covariance(&a);
        assert!((back - sigma).amax() < 1e-8);
    }

    #[test]
    fn same_seed_same_draw() {
        let g = Arc::new(GridSpec::regular(3, 3, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let mut s = FieldSampler::new(g);
        let p = VariogramParams::new(0.0, 1.0, 2.0).unwrap();
        assert_eq!(draws(&mut s, &p, 3, 9), draws(&mut s, &p, 3, 9));
    }
}
