//! Fine-scale residual model: split-normal marginals for the spatial-mean
//! residual, an ARMA process on its Gaussian copula scale, and a seasonally
//! varying exponential covariance for the spatial deviations.

pub mod arma;
pub mod sampler;
pub mod seasonal;
pub mod splitnorm;
pub mod variogram;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{day_of_year, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::GridSpec;
use crate::normal;
use crate::rng::{substream, Stream};

use arma::{arma_fit, ArmaModel, ArmaOptions};
use sampler::FieldSampler;
use seasonal::smooth_seasonal;
use splitnorm::{normal_fit, sn_fit, SplitNormal};
use variogram::{empirical_variogram, variogram_fit, DistanceBins, EmpiricalVariogram, VariogramParams};

/// Probabilities are kept this far from 0 and 1 in the copula transforms.
const P_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub catchment: String,
    pub training_hash: String,
    pub grid_hash: String,
    /// Marginals of the spatial-mean residual are Gaussian (equal scales).
    pub gaussian_marginals: bool,
    /// Split-normal parameters for days 1..=365.
    pub split_normal: Vec<SplitNormal>,
    pub arma: ArmaModel,
    /// Covariance parameters for days 1..=365.
    pub variogram: Vec<VariogramParams>,
    /// Monthly fits before smoothing; `None` where the fit failed.
    pub monthly_variogram: Vec<Option<VariogramParams>>,
}

#[derive(Debug, Clone)]
pub struct ResidualOptions {
    /// Half-width in days of the pooling window for the daily marginal fits.
    pub window: u16,
    pub gaussian_marginals: bool,
    pub n_bins: usize,
    pub arma: ArmaOptions,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            window: 7,
            gaussian_marginals: false,
            n_bins: variogram::DEFAULT_BINS,
            arma: ArmaOptions::default(),
        }
    }
}

/// A fitted residual model together with the intermediate series.
#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub model: ResidualModel,
    /// Spatial-mean residual η̂_t.
    pub eta: Vec<f64>,
    /// Copula series U_t = Φ⁻¹(F_SN(η̂_t)).
    pub copula: Vec<f64>,
    pub empirical: EmpiricalVariogram,
    pub arma_candidates: Vec<(usize, usize, f64)>,
}

/// Circular distance between two days of the 365-day year.
fn day_distance(a: u16, b: u16) -> u16 {
    let d = a.abs_diff(b);
    d.min(DAYS_PER_YEAR as u16 - d)
}

/// Fits the residual model to standardized residuals `z` of one catchment.
pub fn fit_residual_model(
    z: &Field,
    catchment: &str,
    training_hash: &str,
    opts: &ResidualOptions,
) -> Result<ResidualFit> {
    let eta = z.spatial_mean();
    let nu = z.map(|_, t, v| v - eta[t])?;
    let days: Vec<u16> = z.dates().iter().map(|d| day_of_year(*d)).collect();

    let mut by_day: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (t, d) in days.iter().enumerate() {
        by_day.entry(*d).or_default().push(t);
    }
    let split_normal: Vec<SplitNormal> = (1..=DAYS_PER_YEAR as u16)
        .into_par_iter()
        .map(|d| {
            let sample: Vec<f64> = by_day
                .iter()
                .filter(|(k, _)| day_distance(**k, d) <= opts.window)
                .flat_map(|(_, ts)| ts.iter().map(|&t| eta[t]))
                .collect();
            if opts.gaussian_marginals {
                normal_fit(&sample, None)
            } else {
                sn_fit(&sample, None)
            }
        })
        .collect::<Result<_>>()?;

    let copula: Vec<f64> = eta
        .iter()
        .zip(&days)
        .map(|(e, d)| to_copula(&split_normal[*d as usize - 1], *e))
        .collect();
    let arma = arma_fit(&copula, &opts.arma)?;

    let bins = DistanceBins {
        n_bins: opts.n_bins,
        ..DistanceBins::for_grid(z.grid())
    };
    let empirical = empirical_variogram(&nu, &bins)?;
    let monthly: Vec<Option<VariogramParams>> = empirical
        .months
        .par_iter()
        .enumerate()
        .map(|(m, bins)| match variogram_fit(bins) {
            Ok(p) => Some(p),
            Err(e) => {
                if !bins.is_empty() {
                    tracing::warn!(month = m + 1, error = %e, "monthly variogram fit failed");
                }
                None
            }
        })
        .collect();
    let variogram = smooth_variogram(&monthly)?;

    let model = ResidualModel {
        catchment: catchment.to_string(),
        training_hash: training_hash.to_string(),
        grid_hash: z.grid().hash(),
        gaussian_marginals: opts.gaussian_marginals,
        split_normal,
        arma: arma.model,
        variogram,
        monthly_variogram: monthly,
    };
    Ok(ResidualFit {
        model,
        eta,
        copula,
        empirical,
        arma_candidates: arma.candidates,
    })
}

/// Daily covariance parameters from monthly fits. Nugget is floored at 0,
/// sill and range at 10% of their smallest monthly value.
pub fn smooth_variogram(monthly: &[Option<VariogramParams>]) -> Result<Vec<VariogramParams>> {
    if monthly.len() != 12 {
        return Err(Error::InvalidInput(format!("expected 12 monthly fits, got {}", monthly.len())));
    }
    let pick = |f: fn(&VariogramParams) -> f64| -> [Option<f64>; 12] {
        std::array::from_fn(|m| monthly[m].as_ref().map(f))
    };
    let min_of = |v: &[Option<f64>; 12]| v.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let nugget = pick(|p| p.nugget);
    let sill = pick(|p| p.sill);
    let range = pick(|p| p.range_km);
    let n = smooth_seasonal(&nugget, 0.0)
        .map_err(|e| Error::VariogramFit(format!("too few monthly fits to smooth: {e}")))?;
    let s = smooth_seasonal(&sill, 0.1 * min_of(&sill))?;
    let r = smooth_seasonal(&range, 0.1 * min_of(&range))?;
    (0..n.len())
        .map(|d| VariogramParams::new(n[d], s[d], r[d]))
        .collect()
}

fn to_copula(sn: &SplitNormal, x: f64) -> f64 {
    normal::quantile(sn.cdf(x).clamp(P_CLAMP, 1.0 - P_CLAMP))
}

fn from_copula(sn: &SplitNormal, u: f64) -> f64 {
    sn.quantile_unchecked(normal::cdf(u).clamp(P_CLAMP, 1.0 - P_CLAMP))
}

impl ResidualModel {
    pub fn split_normal_for(&self, date: NaiveDate) -> &SplitNormal {
        &self.split_normal[day_of_year(date) as usize - 1]
    }

    pub fn variogram_for(&self, date: NaiveDate) -> &VariogramParams {
        &self.variogram[day_of_year(date) as usize - 1]
    }

    /// `Φ⁻¹(F_SN(η))` with the parameters of `date`.
    pub fn to_copula(&self, date: NaiveDate, eta: f64) -> f64 {
        to_copula(self.split_normal_for(date), eta)
    }

    /// `F_SN⁻¹(Φ(u))` with the parameters of `date`.
    pub fn from_copula(&self, date: NaiveDate, u: f64) -> f64 {
        from_copula(self.split_normal_for(date), u)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_normal.len() != DAYS_PER_YEAR || self.variogram.len() != DAYS_PER_YEAR {
            return Err(Error::InvalidInput(format!(
                "residual model tables must have {DAYS_PER_YEAR} rows, got {} and {}",
                self.split_normal.len(),
                self.variogram.len()
            )));
        }
        for sn in &self.split_normal {
            SplitNormal::new(sn.mu, sn.sigma1, sn.sigma2)?;
        }
        for v in &self.variogram {
            VariogramParams::new(v.nugget, v.sill, v.range_km)?;
        }
        ArmaModel::new(self.arma.ar.clone(), self.arma.ma.clone(), self.arma.sigma2, self.arma.mean)?;
        Ok(())
    }
}

/// Simulates residual fields `Z* = η* + ν*` on `grid` for `dates`:
/// (1) `U*` from the ARMA model, (2) `η*_t = F_SN⁻¹(Φ(U*_t))` with day-t
/// parameters, (3) `ν*_t ~ N(0, Σ_t)`, (4) their sum.
///
/// Every day's spatial draw uses its own substream, so the output depends only
/// on `(seed, realization)`.
pub fn simulate_residuals(
    model: &ResidualModel,
    grid: Arc<GridSpec>,
    dates: Vec<NaiveDate>,
    seed: u64,
    realization: u32,
) -> Result<Field> {
    if grid.hash() != model.grid_hash {
        return Err(Error::Grid(format!(
            "residual model for catchment {} was fitted on a different grid",
            model.catchment
        )));
    }
    let n_days = dates.len();
    let n_cells = grid.len();
    let mut arma_rng = substream(seed, Stream::Arma, u64::from(realization));
    let u = model.arma.simulate(n_days, &mut arma_rng);
    let eta: Vec<f64> = dates
        .iter()
        .zip(&u)
        .map(|(d, u)| model.from_copula(*d, *u))
        .collect();

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (t, d) in dates.iter().enumerate() {
        groups.entry(day_of_year(*d) as usize - 1).or_default().push(t);
    }
    let mut sampler = FieldSampler::new(grid.clone());
    let mut values = vec![0.0; n_cells * n_days];
    for (day, ts) in groups {
        let params = model.variogram[day];
        let mut normals = DMatrix::zeros(n_cells, ts.len());
        for (k, &t) in ts.iter().enumerate() {
            let counter = (u64::from(realization) << 32) | t as u64;
            let mut rng = substream(seed, Stream::SpatialField, counter);
            for c in 0..n_cells {
                normals[(c, k)] = rng.sample(StandardNormal);
            }
        }
        let nu = sampler.transform_block(&params, &normals)?;
        for (k, &t) in ts.iter().enumerate() {
            for c in 0..n_cells {
                values[c * n_days + t] = eta[t] + nu[(c, k)];
            }
        }
    }
    Field::new(grid, dates, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::Period;

    fn flat(_: f64, _: f64) -> (f64, f64, f64) {
        (0.0, 0.0, 0.0)
    }

    fn degenerate_model(grid: &GridSpec) -> ResidualModel {
        ResidualModel {
            catchment: "x".into(),
            training_hash: String::new(),
            grid_hash: grid.hash(),
            gaussian_marginals: false,
            split_normal: vec![SplitNormal::new(0.0, 1e-9, 1e-9).unwrap(); DAYS_PER_YEAR],
            arma: ArmaModel::white_noise(0.0),
            variogram: vec![VariogramParams::new(1.0, 0.0, 10.0).unwrap(); DAYS_PER_YEAR],
            monthly_variogram: vec![None; 12],
        }
    }

    #[test]
    fn degenerate_model_gives_white_noise() {
        let g = Arc::new(GridSpec::regular(3, 3, 2.0, (0.0, 0.0), 1, flat).unwrap());
        let m = degenerate_model(&g);
        m.validate().unwrap();
        let dates = Period::years(2000, 2027).dates();
        let z = simulate_residuals(&m, g.clone(), dates.clone(), 5, 0).unwrap();
        let v = z.values();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02 && (sd - 1.0).abs() < 0.02);
        let again = simulate_residuals(&m, g.clone(), dates.clone(), 5, 0).unwrap();
        assert_eq!(z, again);
        let other = simulate_residuals(&m, g, dates, 5, 1).unwrap();
        assert_ne!(z, other);
    }

    #[test]
    fn copula_round_trip() {
        let g = GridSpec::regular(1, 1, 1.0, (0.0, 0.0), 1, flat).unwrap();
        let mut m = degenerate_model(&g);
        m.split_normal = (0..DAYS_PER_YEAR)
            .map(|d| SplitNormal::new(0.1, 0.5 + d as f64 / 365.0, 1.0).unwrap())
            .collect();
        for (k, date) in Period::years(2001, 2001).dates().iter().enumerate() {
            let x = -2.0 + 4.0 * k as f64 / 365.0;
            let back = m.from_copula(*date, m.to_copula(*date, x));
            assert!((back - x).abs() < 1e-8);
        }
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let g = Arc::new(GridSpec::regular(2, 2, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let m = degenerate_model(&g);
        let h = Arc::new(GridSpec::regular(3, 2, 1.0, (0.0, 0.0), 1, flat).unwrap());
        assert!(simulate_residuals(&m, h, Period::years(2000, 2000).dates(), 1, 0).is_err());
    }

    #[test]
    fn circular_day_distance() {
        assert_eq!(day_distance(1, 365), 1);
        assert_eq!(day_distance(10, 3), 7);
        assert_eq!(day_distance(360, 5), 10);
    }
}
