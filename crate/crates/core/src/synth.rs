//! Synthetic worlds with known parameters for verification.
//!
//! Fine observations are `μ + σ·(η + ν)` from a true moment model and a true
//! residual model. The coarse RCM follows its own moment model with a cold
//! bias and persistent AR(1) noise that is shared partly across the domain and
//! partly per coarse cell. Its test period carries a change in the seasonal
//! cycle and the variance that the observations do not have.

use std::f64::consts::PI;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calendar::{CalendarIndex, Period, DAYS_PER_YEAR};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{GridSpec, OverlapMap};
use crate::moments::{MomentCoefficients, MomentModel};
use crate::regrid::upscale;
use crate::residual::arma::ArmaModel;
use crate::residual::splitnorm::SplitNormal;
use crate::residual::variogram::VariogramParams;
use crate::residual::{simulate_residuals, ResidualModel};
use crate::rng::{substream, Stream};

const KM_PER_DEGREE: f64 = 111.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    pub coarse_km: f64,
    /// Fine cells per coarse cell side.
    pub refine: usize,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub base_elevation_m: f64,
    pub relief_m: f64,
    pub train_years: (i32, i32),
    pub test_years: (i32, i32),
    pub reference_year: i32,
    /// Observation moment model on the fine grid. `alpha_3` is replaced by
    /// the trend giving `mean_change` between the periods.
    pub obs: MomentCoefficients,
    pub mean_change: f64,
    /// RCM moment model on the coarse grid; its trend matches the observations.
    pub rcm_train: MomentCoefficients,
    /// Added to `rcm_train` in the test period.
    pub rcm_test_shift: MomentCoefficients,
    /// Multiplies the standardized residual; 0 gives `obs = μ`.
    pub noise_scale: f64,
    /// Variance of the domain-wide residual η; the spatial part carries the rest.
    pub eta_variance: f64,
    /// Relative scale asymmetry of η, `a·cos(2πd/365)`; positive means a
    /// heavier lower tail in winter.
    pub skew_amplitude: f64,
    pub arma_ar: Vec<f64>,
    pub arma_ma: Vec<f64>,
    pub nugget: f64,
    pub range_winter_km: f64,
    pub range_summer_km: f64,
    pub rcm_phi: f64,
    /// Share of the RCM noise variance common to the whole domain.
    pub rcm_common_share: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            coarse_nx: 6,
            coarse_ny: 6,
            coarse_km: 12.5,
            refine: 5,
            origin_lat: 62.5,
            origin_lon: 10.0,
            base_elevation_m: 500.0,
            relief_m: 400.0,
            train_years: (1961, 1990),
            test_years: (1991, 2009),
            reference_year: 1961,
            obs: MomentCoefficients {
                alpha_11: 3.0,
                alpha_12: -0.6,
                alpha_13: 0.3,
                alpha_14: -1.2,
                alpha_21: -7.5,
                alpha_22: -2.0,
                alpha_23: 0.6,
                alpha_24: 0.3,
                alpha_3: 0.0,
                beta_11: 0.3,
                beta_12: 0.04,
                beta_13: -0.03,
                beta_14: 0.06,
                beta_21: 0.3,
                beta_22: 0.1,
                beta_23: 0.05,
                beta_24: -0.03,
                ..Default::default()
            },
            mean_change: 0.9,
            rcm_train: MomentCoefficients {
                alpha_11: 1.0,
                alpha_12: -0.5,
                alpha_13: 0.2,
                alpha_14: -0.9,
                alpha_21: -6.8,
                alpha_22: -2.3,
                alpha_23: 0.4,
                alpha_24: 0.2,
                alpha_3: 0.0,
                beta_11: 0.25,
                beta_12: 0.03,
                beta_13: -0.02,
                beta_14: 0.04,
                beta_21: 0.2,
                beta_22: 0.12,
                beta_23: 0.0,
                beta_24: 0.0,
            },
            rcm_test_shift: MomentCoefficients {
                alpha_21: -0.8,
                beta_11: 0.12,
                ..Default::default()
            },
            noise_scale: 1.0,
            eta_variance: 0.5,
            skew_amplitude: 0.25,
            arma_ar: vec![0.5],
            arma_ma: vec![0.2],
            nugget: 0.02,
            range_winter_km: 30.0,
            range_summer_km: 22.0,
            rcm_phi: 0.9,
            rcm_common_share: 0.6,
        }
    }
}

/// Generating parameters of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub obs: MomentModel,
    pub rcm_train: MomentModel,
    pub rcm_test: MomentModel,
    pub residual: ResidualModel,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub coarse: Arc<GridSpec>,
    pub fine: Arc<GridSpec>,
    pub overlap: OverlapMap,
    pub train: Period,
    pub test: Period,
    /// Fine observations over train and test.
    pub obs_fine: Field,
    pub obs_coarse: Field,
    pub rcm_coarse: Field,
    pub truth: Truth,
}

impl WorldSpec {
    pub fn train(&self) -> Period {
        Period::years(self.train_years.0, self.train_years.1)
    }

    pub fn test(&self) -> Period {
        Period::years(self.test_years.0, self.test_years.1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.coarse_nx == 0 || self.coarse_ny == 0 || self.refine == 0 || !(self.coarse_km > 0.0) {
            return bad("world dimensions must be positive".into());
        }
        if self.train_years.1 < self.train_years.0 || self.test_years.1 < self.test_years.0 {
            return bad("period years must be ordered".into());
        }
        if self.train().overlaps(&self.test()) {
            return bad("training and test periods overlap".into());
        }
        if !(self.eta_variance > 0.0 && self.eta_variance + self.nugget < 1.0 && self.nugget >= 0.0) {
            return bad("eta variance and nugget must leave room for a positive partial sill".into());
        }
        if !(self.skew_amplitude.abs() < 1.0) {
            return bad("skew amplitude must lie in (-1, 1)".into());
        }
        if !(self.range_winter_km > 0.0 && self.range_summer_km > 0.0) {
            return bad("ranges must be positive".into());
        }
        if !(self.rcm_phi.abs() < 1.0) || !(0.0..=1.0).contains(&self.rcm_common_share) {
            return bad("RCM noise needs |phi| < 1 and a common share in [0, 1]".into());
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise scale must be non-negative".into());
        }
        ArmaModel::new(self.arma_ar.clone(), self.arma_ma.clone(), 1.0, 0.0)?;
        Ok(())
    }

    fn elevation(&self, e: f64, n: f64) -> f64 {
        let w = self.coarse_nx as f64 * self.coarse_km;
        let h = self.coarse_ny as f64 * self.coarse_km;
        self.base_elevation_m
            + self.relief_m * (0.6 * (PI * e / w).sin() * (PI * n / h).sin() + 0.4 * (2.0 * PI * (e + 0.5 * n) / w).cos())
    }

    fn covariates(&self, e: f64, n: f64) -> (f64, f64, f64) {
        let lat = self.origin_lat + n / KM_PER_DEGREE;
        let lon = self.origin_lon + e / (KM_PER_DEGREE * self.origin_lat.to_radians().cos());
        (lat, lon, self.elevation(e, n))
    }

    pub fn fine_grid(&self) -> Result<GridSpec> {
        let km = self.coarse_km / self.refine as f64;
        GridSpec::regular(
            self.coarse_nx * self.refine,
            self.coarse_ny * self.refine,
            km,
            (0.0, 0.0),
            1,
            |e, n| self.covariates(e, n),
        )
    }

    /// Coarse cells carry the mean covariates of the fine cells they contain.
    pub fn coarse_grid(&self) -> Result<GridSpec> {
        let k = self.refine;
        let km = self.coarse_km / k as f64;
        GridSpec::regular(self.coarse_nx, self.coarse_ny, self.coarse_km, (0.0, 0.0), 100_001, |e, n| {
            let (e0, n0) = (e - 0.5 * self.coarse_km, n - 0.5 * self.coarse_km);
            let mut acc = (0.0, 0.0, 0.0);
            for j in 0..k {
                for i in 0..k {
                    let c = self.covariates(e0 + (i as f64 + 0.5) * km, n0 + (j as f64 + 0.5) * km);
                    acc = (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2);
                }
            }
            let m = (k * k) as f64;
            (acc.0 / m, acc.1 / m, acc.2 / m)
        })
    }

    /// Trend per decade that separates the period means by `mean_change`.
    pub fn trend_for_change(&self) -> f64 {
        let mean_decade = |p: Period| {
            let c = CalendarIndex::new(&p.dates(), self.reference_year);
            c.decade.iter().sum::<f64>() / c.len() as f64
        };
        self.mean_change / (mean_decade(self.test()) - mean_decade(self.train()))
    }

    pub fn obs_coefficients(&self) -> MomentCoefficients {
        MomentCoefficients {
            alpha_3: self.trend_for_change(),
            ..self.obs
        }
    }

    pub fn rcm_coefficients(&self) -> (MomentCoefficients, MomentCoefficients) {
        let train = MomentCoefficients {
            alpha_3: self.trend_for_change(),
            ..self.rcm_train
        };
        let a = train.to_array();
        let s = self.rcm_test_shift.to_array();
        let mut test = [0.0; 17];
        for k in 0..17 {
            test[k] = a[k] + s[k];
        }
        // the trend is shared between the periods
        test[8] = a[8];
        (train, MomentCoefficients::from_array(test))
    }

    /// Split-normal law of η on day `d` with mean 0 and variance `eta_variance`.
    pub fn eta_law(&self, day: usize) -> SplitNormal {
        let a = self.skew_amplitude * (2.0 * PI * day as f64 / DAYS_PER_YEAR as f64).cos();
        // Var = s²[(1 − 2/π)·4a² + 1 − a²] for scales s(1 ± a)
        let unit = (1.0 - 2.0 / PI) * 4.0 * a * a + 1.0 - a * a;
        let s = (self.eta_variance / unit).sqrt();
        let (s1, s2) = (s * (1.0 + a), s * (1.0 - a));
        let mu = -(2.0 / PI).sqrt() * (s2 - s1);
        SplitNormal::new(mu, s1, s2).expect("valid split-normal scales")
    }

    /// Spatial covariance for a calendar month; the range moves between the
    /// winter and summer values along a cosine.
    pub fn month_variogram(&self, month: u32) -> VariogramParams {
        let w = 0.5 * (1.0 + (2.0 * PI * (month as f64 - 1.0) / 12.0).cos());
        let range = self.range_summer_km + w * (self.range_winter_km - self.range_summer_km);
        VariogramParams::new(self.nugget, 1.0 - self.eta_variance - self.nugget, range)
            .expect("valid variogram")
    }

    pub fn residual_model(&self, fine: &GridSpec) -> Result<ResidualModel> {
        let unit = ArmaModel::new(self.arma_ar.clone(), self.arma_ma.clone(), 1.0, 0.0)?;
        let arma = ArmaModel::new(
            self.arma_ar.clone(),
            self.arma_ma.clone(),
            1.0 / unit.process_variance(),
            0.0,
        )?;
        let month_of = |d: usize| {
            NaiveDate::from_yo_opt(2001, d as u32)
                .expect("day in a common year")
                .month()
        };
        Ok(ResidualModel {
            catchment: "world".into(),
            training_hash: String::new(),
            grid_hash: fine.hash(),
            gaussian_marginals: self.skew_amplitude == 0.0,
            split_normal: (1..=DAYS_PER_YEAR).map(|d| self.eta_law(d)).collect(),
            arma,
            variogram: (1..=DAYS_PER_YEAR).map(|d| self.month_variogram(month_of(d))).collect(),
            monthly_variogram: (1..=12).map(|m| Some(self.month_variogram(m))).collect(),
        })
    }
}

/// Stationary AR(1) with unit variance.
fn ar1(n: usize, phi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut x = Vec::with_capacity(n);
    let mut prev: f64 = rng.sample(StandardNormal);
    for _ in 0..n {
        x.push(prev);
        let e: f64 = rng.sample(StandardNormal);
        prev = phi * prev + innov * e;
    }
    x
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let fine = Arc::new(spec.fine_grid()?);
    let coarse = Arc::new(spec.coarse_grid()?);
    let overlap = OverlapMap::build(&coarse, &fine);
    let (train, test) = (spec.train(), spec.test());
    let dates = Period::new(train.start.min(test.start), train.end.max(test.end))?.dates();
    let n_days = dates.len();

    let obs_model = MomentModel::with_coefficients(spec.obs_coefficients(), &fine, spec.reference_year);
    let (rcm_tr, rcm_te) = spec.rcm_coefficients();
    let rcm_train = MomentModel::with_coefficients(rcm_tr, &coarse, spec.reference_year);
    let rcm_test = MomentModel::with_coefficients(rcm_te, &coarse, spec.reference_year);
    let residual = spec.residual_model(&fine)?;

    let surface = obs_model.predict(&fine, &CalendarIndex::new(&dates, spec.reference_year));
    let obs_fine = if spec.noise_scale > 0.0 {
        let world_seed: u64 = substream(spec.seed, Stream::WorldTemporal, 0).random();
        let z = simulate_residuals(&residual, fine.clone(), dates.clone(), world_seed, 0)?;
        z.map(|c, t, v| {
            let k = c * n_days + t;
            surface.mu[k] + surface.sigma[k] * spec.noise_scale * v
        })?
    } else {
        Field::new(fine.clone(), dates.clone(), surface.mu.clone())?
    };
    drop(surface);
    let obs_coarse = upscale(&obs_fine, coarse.clone(), &overlap)?;

    let cal = CalendarIndex::new(&dates, spec.reference_year);
    let s_train = rcm_train.predict(&coarse, &cal);
    let s_test = rcm_test.predict(&coarse, &cal);
    let common = ar1(n_days, spec.rcm_phi, &mut substream(spec.seed, Stream::WorldRcm, 0));
    let (wc, wl) = (spec.rcm_common_share.sqrt(), (1.0 - spec.rcm_common_share).sqrt());
    let series = (0..coarse.len())
        .map(|r| {
            let local = ar1(n_days, spec.rcm_phi, &mut substream(spec.seed, Stream::WorldRcm, r as u64 + 1));
            (0..n_days)
                .map(|t| {
                    let s = if test.contains(dates[t]) { &s_test } else { &s_train };
                    let e = spec.noise_scale * (wc * common[t] + wl * local[t]);
                    s.mu(r, t) + s.sigma(r, t) * e
                })
                .collect()
        })
        .collect();
    let rcm_coarse = Field::from_series(coarse.clone(), dates, series)?;

    Ok(World {
        spec: spec.clone(),
        coarse,
        fine,
        overlap,
        train,
        test,
        obs_fine,
        obs_coarse,
        rcm_coarse,
        truth: Truth {
            obs: obs_model,
            rcm_train,
            rcm_test,
            residual,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            coarse_nx: 2,
            coarse_ny: 2,
            refine: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_is_valid_and_round_trips() {
        let s = WorldSpec::default();
        s.validate().unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: WorldSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.fine_grid().unwrap().len(), 900);
        assert_eq!(s.coarse_grid().unwrap().len(), 36);
        let bad = WorldSpec {
            test_years: (1980, 1999),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eta_law_has_target_moments() {
        let s = WorldSpec::default();
        for d in [1, 90, 182, 300] {
            let sn = s.eta_law(d);
            assert!(sn.mean().abs() < 1e-12);
            assert!((sn.variance() - s.eta_variance).abs() < 1e-12);
        }
        let winter = s.eta_law(1);
        assert!(winter.sigma1 > winter.sigma2);
        let m = s.residual_model(&s.fine_grid().unwrap()).unwrap();
        m.validate().unwrap();
        assert!((m.arma.process_variance() - 1.0).abs() < 1e-10);
        for v in &m.variogram {
            assert!((v.nugget + v.sill + s.eta_variance - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_world_is_the_mean_surface() {
        let spec = WorldSpec {
            noise_scale: 0.0,
            ..small()
        };
        let w = generate_world(&spec).unwrap();
        let mu = w.truth.obs.predict_on(&w.obs_fine);
        assert_eq!(w.obs_fine.values(), &mu.mu[..]);
        let constant = Field::constant(w.fine.clone(), w.obs_fine.dates().to_vec(), 4.5).unwrap();
        let up = upscale(&constant, w.coarse.clone(), &w.overlap).unwrap();
        assert!(up.values().iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn prescribed_change_over_replicate_worlds() {
        // one world has a period-mean sd near 0.09 °C from the persistent
        // domain-wide residual, so average over replicates
        let reps = 64;
        let mut total = 0.0;
        for k in 0..reps {
            let spec = WorldSpec {
                seed: 1000 + k,
                coarse_nx: 1,
                coarse_ny: 1,
                refine: 2,
                ..Default::default()
            };
            let w = generate_world(&spec).unwrap();
            let mean = |p: &Period| w.obs_fine.select_period(p).unwrap().mean();
            total += mean(&w.test) - mean(&w.train);
        }
        let change = total / reps as f64;
        assert!((change - 0.9).abs() < 0.03, "{change}");
    }

    #[test]
    fn determinism_and_rcm_bias() {
        let w = generate_world(&small()).unwrap();
        let again = generate_world(&small()).unwrap();
        assert_eq!(again.obs_fine, w.obs_fine);
        assert_eq!(again.rcm_coarse, w.rcm_coarse);
        let obs = w.obs_fine.select_period(&w.train).unwrap().mean();
        let rcm = w.rcm_coarse.select_period(&w.train).unwrap().mean();
        assert!(rcm < obs - 1.0);
    }
}
