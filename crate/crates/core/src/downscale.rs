//! Assembly of downscaled realizations from simulated residuals.
//!
//! All variants share the residual field `Z*` and differ only in the mean and
//! standard deviation layers applied to it:
//!
//! * `Xstar`: `Z*·σ̂ + μ̂*`, with `μ̂*` the fine moment model mean without its
//!   trend, shifted so its test-period mean equals the training-period mean of
//!   the full model mean;
//! * `XstarTrend`: adds the coarse mean change of the largest-intersection
//!   coarse cell;
//! * `XstarTrendVar`: additionally scales `σ̂` by the coarse sd ratio.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::CalendarIndex;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{GridSpec, OverlapMap};
use crate::moments::MomentModel;

/// Bounds on the transferred sd ratio.
pub const RHO_MIN: f64 = 0.5;
pub const RHO_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Xstar,
    Trend,
    TrendVar,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Xstar, Variant::Trend, Variant::TrendVar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Xstar => "xstar",
            Variant::Trend => "trend",
            Variant::TrendVar => "trendvar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xstar" => Ok(Variant::Xstar),
            "trend" | "xstartrend" => Ok(Variant::Trend),
            "trendvar" | "xstartrendvar" => Ok(Variant::TrendVar),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected xstar, trend or trendvar"
            ))),
        }
    }
}

/// Mean and sd layers of the stationary realization on the fine grid over the
/// test period (cell-major).
#[derive(Debug, Clone)]
pub struct Baseline {
    pub n_cells: usize,
    pub n_days: usize,
    pub mu_star: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Baseline {
    pub fn new(
        fine_model: &MomentModel,
        grid: &GridSpec,
        train_dates: &[NaiveDate],
        test_dates: &[NaiveDate],
    ) -> Result<Self> {
        if train_dates.is_empty() || test_dates.is_empty() {
            return Err(Error::InvalidInput("empty training or test period".into()));
        }
        let year = fine_model.reference_year;
        let train = fine_model.parts(grid, &CalendarIndex::new(train_dates, year));
        let test = fine_model.parts(grid, &CalendarIndex::new(test_dates, year));
        // The time-varying parts do not depend on the cell, so one shift
        // recenters every cell.
        let train_mean = mean(
            &train
                .mean_seasonal
                .iter()
                .zip(&train.mean_trend)
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        );
        let shift = train_mean - mean(&test.mean_seasonal);

        let n_days = test_dates.len();
        let mut mu_star = Vec::with_capacity(grid.len() * n_days);
        let mut sigma = Vec::with_capacity(grid.len() * n_days);
        for r in 0..grid.len() {
            for t in 0..n_days {
                mu_star.push(test.mean_spatial[r] + test.mean_seasonal[t] + shift);
                sigma.push((test.sd_spatial[r] + test.sd_seasonal[t]).exp());
            }
        }
        Ok(Self {
            n_cells: grid.len(),
            n_days,
            mu_star,
            sigma,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Coarse-scale change signal over the test period (coarse-cell-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub n_coarse: usize,
    pub n_days: usize,
    /// Additive mean change.
    pub delta_mean: Vec<f64>,
    /// Multiplicative sd change, already clamped.
    pub rho: Vec<f64>,
    /// Number of ratios that hit the clamp.
    pub clamped: usize,
}

impl Signal {
    pub fn uniform(n_coarse: usize, n_days: usize, delta: f64, rho: f64) -> Self {
        Self {
            n_coarse,
            n_days,
            delta_mean: vec![delta; n_coarse * n_days],
            rho: vec![rho; n_coarse * n_days],
            clamped: 0,
        }
    }

    /// Change implied by the corrected coarse output.
    ///
    /// `reference` is the moment model of the upscaled observations in the
    /// training period, `corrected_test` the model fitted to the corrected
    /// coarse output in the test period. The mean change is the baseline plus
    /// trend of `corrected_test` at each test day minus the training-period
    /// average of the baseline plus trend of `reference`; seasonality is not
    /// transferred. The sd ratio is `σ̂_corrected,test / σ̂_reference` at each
    /// test day, clamped to `[0.5, 2]`.
    pub fn from_models(
        reference: &MomentModel,
        corrected_test: &MomentModel,
        coarse_grid: &GridSpec,
        train_dates: &[NaiveDate],
        test_dates: &[NaiveDate],
    ) -> Result<Self> {
        if reference.reference_year != corrected_test.reference_year {
            return Err(Error::InvalidInput(
                "signal models use different reference years".into(),
            ));
        }
        let year = reference.reference_year;
        let ref_train = reference.parts(coarse_grid, &CalendarIndex::new(train_dates, year));
        let test_cal = CalendarIndex::new(test_dates, year);
        let ref_test = reference.parts(coarse_grid, &test_cal);
        let cor_test = corrected_test.parts(coarse_grid, &test_cal);
        let ref_trend = mean(&ref_train.mean_trend);

        let n_days = test_dates.len();
        let n = coarse_grid.len();
        let mut delta_mean = Vec::with_capacity(n * n_days);
        let mut rho = Vec::with_capacity(n * n_days);
        let mut clamped = 0;
        for r in 0..n {
            let base = ref_train.mean_spatial[r] + ref_trend;
            for t in 0..n_days {
                delta_mean.push(cor_test.mean_spatial[r] + cor_test.mean_trend[t] - base);
                let ratio = ((cor_test.sd_spatial[r] + cor_test.sd_seasonal[t])
                    - (ref_test.sd_spatial[r] + ref_test.sd_seasonal[t]))
                    .exp();
                if !ratio.is_finite() {
                    return Err(Error::NonFiniteRatio {
                        cell: coarse_grid.cell(r).cell_id,
                        day: t,
                    });
                }
                let c = ratio.clamp(RHO_MIN, RHO_MAX);
                if c != ratio {
                    clamped += 1;
                }
                rho.push(c);
            }
        }
        Ok(Self {
            n_coarse: n,
            n_days,
            delta_mean,
            rho,
            clamped,
        })
    }

    pub fn mean_delta(&self) -> f64 {
        mean(&self.delta_mean)
    }

    pub fn mean_rho(&self) -> f64 {
        mean(&self.rho)
    }
}

/// Largest-intersection coarse cell index for every fine cell.
pub fn largest_intersection(overlap: &OverlapMap, fine: &GridSpec) -> Result<Vec<usize>> {
    if overlap.major.len() != fine.len() {
        return Err(Error::Dimension(format!(
            "overlap map covers {} fine cells, grid has {}",
            overlap.major.len(),
            fine.len()
        )));
    }
    overlap
        .major
        .iter()
        .enumerate()
        .map(|(i, c)| c.ok_or(Error::Unmapped(fine.cell(i).cell_id)))
        .collect()
}

/// Assembles one realization from residuals `z` (fine grid, test period).
///
/// `signal` and `mapping` are required for the trend variants.
pub fn assemble(
    variant: Variant,
    z: &Field,
    baseline: &Baseline,
    signal: Option<(&Signal, &[usize])>,
) -> Result<Field> {
    if z.n_cells() != baseline.n_cells || z.n_days() != baseline.n_days {
        return Err(Error::Dimension(format!(
            "residual field is {}×{}, baseline is {}×{}",
            z.n_cells(),
            z.n_days(),
            baseline.n_cells,
            baseline.n_days
        )));
    }
    let n_days = z.n_days();
    match variant {
        Variant::Xstar => z.map(|c, t, v| {
            let k = c * n_days + t;
            v * baseline.sigma[k] + baseline.mu_star[k]
        }),
        Variant::Trend | Variant::TrendVar => {
            let (signal, mapping) = signal.ok_or_else(|| {
                Error::InvalidInput(format!("variant {variant} needs a change signal"))
            })?;
            if mapping.len() != z.n_cells() || signal.n_days != n_days {
                return Err(Error::Dimension(format!(
                    "signal covers {} days and {} fine cells, field has {} and {}",
                    signal.n_days,
                    mapping.len(),
                    n_days,
                    z.n_cells()
                )));
            }
            if let Some(bad) = mapping.iter().find(|&&r| r >= signal.n_coarse) {
                return Err(Error::Dimension(format!("coarse index {bad} outside the signal")));
            }
            let scale_var = variant == Variant::TrendVar;
            z.map(|c, t, v| {
                let k = c * n_days + t;
                let j = mapping[c] * n_days + t;
                let sigma = if scale_var {
                    baseline.sigma[k] * signal.rho[j]
                } else {
                    baseline.sigma[k]
                };
                v * sigma + baseline.mu_star[k] + signal.delta_mean[j]
            })
        }
    }
}

/// Everything needed to turn residual draws into the three realizations for
/// one catchment.
#[derive(Debug, Clone)]
pub struct Downscaler {
    pub grid: Arc<GridSpec>,
    pub baseline: Baseline,
    pub signal: Signal,
    pub mapping: Vec<usize>,
}

impl Downscaler {
    pub fn assemble(&self, variant: Variant, z: &Field) -> Result<Field> {
        assemble(variant, z, &self.baseline, Some((&self.signal, &self.mapping)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::Period;
    use crate::grid::Cell;
    use crate::moments::MomentCoefficients;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid() -> Arc<GridSpec> {
        Arc::new(
            GridSpec::regular(3, 2, 2.5, (0.0, 0.0), 1, |e, n| {
                (63.0 + n / 111.0, 10.0 + e / 50.0, 300.0 + 20.0 * e)
            })
            .unwrap(),
        )
    }

    fn model(trend: f64) -> MomentCoefficients {
        MomentCoefficients {
            alpha_11: 2.0,
            alpha_12: 0.4,
            alpha_14: -0.8,
            alpha_21: -7.0,
            alpha_22: -1.5,
            alpha_3: trend,
            beta_11: 0.9,
            beta_21: 0.3,
            ..Default::default()
        }
    }

    fn periods() -> (Vec<NaiveDate>, Vec<NaiveDate>) {
        (Period::years(1957, 1986).dates(), Period::years(1987, 2005).dates())
    }

    fn noise(g: &Arc<GridSpec>, dates: &[NaiveDate], seed: u64) -> Field {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(g.clone(), dates.to_vec(), |_, _| StandardNormal.sample(&mut rng)).unwrap()
    }

    #[test]
    fn xstar_centering() {
        let g = grid();
        let (train, test) = periods();
        let m = MomentModel::with_coefficients(model(1.0), &g, 1957);
        let b = Baseline::new(&m, &g, &train, &test).unwrap();
        let zero = Field::constant(g.clone(), test.clone(), 0.0).unwrap();
        let x = assemble(Variant::Xstar, &zero, &b, None).unwrap();
        assert_eq!(x.values(), &b.mu_star[..]);
        let full_train = m.predict(&g, &CalendarIndex::new(&train, 1957));
        for c in 0..g.len() {
            let want = full_train.mu[c * train.len()..(c + 1) * train.len()].iter().sum::<f64>()
                / train.len() as f64;
            let got = x.series(c).iter().sum::<f64>() / test.len() as f64;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn xstar_without_trend_is_the_model_mean_when_periods_align() {
        let g = grid();
        let dates = Period::years(1990, 1999).dates();
        let m = MomentModel::with_coefficients(model(0.0), &g, 1957);
        let b = Baseline::new(&m, &g, &dates, &dates).unwrap();
        let s = m.predict(&g, &CalendarIndex::new(&dates, 1957));
        for (a, b) in b.mu_star.iter().zip(&s.mu) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn trend_removed_in_synthetic_world() {
        let g = grid();
        let (train, test) = periods();
        let m = MomentModel::with_coefficients(model(1.0), &g, 1957);
        let b = Baseline::new(&m, &g, &train, &test).unwrap();
        let z = noise(&g, &test, 1);
        let x = assemble(Variant::Xstar, &z, &b, None).unwrap();
        let s = m.predict(&g, &CalendarIndex::new(&train, 1957));
        let train_mean = s.mu.iter().sum::<f64>() / s.mu.len() as f64;
        assert!((x.mean() - train_mean).abs() < 0.05, "{} vs {train_mean}", x.mean());
    }

    #[test]
    fn zero_signal_and_unit_ratio() {
        let g = grid();
        let (train, test) = periods();
        let m = MomentModel::with_coefficients(model(0.3), &g, 1957);
        let b = Baseline::new(&m, &g, &train, &test).unwrap();
        let z = noise(&g, &test, 2);
        let mapping = vec![0; g.len()];
        let zero = Signal::uniform(1, test.len(), 0.0, 1.0);
        let xs = assemble(Variant::Xstar, &z, &b, None).unwrap();
        let xt = assemble(Variant::Trend, &z, &b, Some((&zero, &mapping))).unwrap();
        let xv = assemble(Variant::TrendVar, &z, &b, Some((&zero, &mapping))).unwrap();
        assert_eq!(xs, xt);
        assert_eq!(xt, xv);
        assert!(assemble(Variant::Trend, &z, &b, None).is_err());
    }

    #[test]
    fn uniform_shift_and_ratio() {
        let g = grid();
        let (train, test) = periods();
        let m = MomentModel::with_coefficients(model(0.3), &g, 1957);
        let b = Baseline::new(&m, &g, &train, &test).unwrap();
        let z = noise(&g, &test, 3);
        let mapping = vec![0; g.len()];
        let sig = Signal::uniform(1, test.len(), 0.9, 1.2);
        let xs = assemble(Variant::Xstar, &z, &b, None).unwrap();
        let xt = assemble(Variant::Trend, &z, &b, Some((&sig, &mapping))).unwrap();
        let xv = assemble(Variant::TrendVar, &z, &b, Some((&sig, &mapping))).unwrap();
        for c in 0..g.len() {
            let d: f64 = xt.series(c).iter().zip(xs.series(c)).map(|(a, b)| a - b).sum::<f64>()
                / test.len() as f64;
            assert!((d - 0.9).abs() < 0.02);
            // deviations from the mean layer scale by rho
            let dev_t: Vec<f64> = (0..test.len()).map(|t| xt.get(c, t) - b.mu_star[c * test.len() + t] - 0.9).collect();
            let dev_v: Vec<f64> = (0..test.len()).map(|t| xv.get(c, t) - b.mu_star[c * test.len() + t] - 0.9).collect();
            let sd = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            let ratio = sd(&dev_v) / sd(&dev_t);
            assert!((ratio - 1.2).abs() < 0.03 * 1.2, "{ratio}");
        }
    }

    #[test]
    fn signal_from_models() {
        let g = grid();
        let (train, test) = periods();
        let reference = MomentModel::with_coefficients(model(0.0), &g, 1957);
        let same = Signal::from_models(&reference, &reference, &g, &train, &test).unwrap();
        assert!(same.delta_mean.iter().all(|d| d.abs() < 1e-12));
        assert!(same.rho.iter().all(|r| (r - 1.0).abs() < 1e-12));

        let mut warmer = reference.clone();
        warmer.coefficients.alpha_11 += 0.9;
        warmer.coefficients.alpha_21 += 3.0; // seasonality change is ignored
        warmer.coefficients.beta_11 += 1.2f64.ln();
        let s = Signal::from_models(&reference, &warmer, &g, &train, &test).unwrap();
        assert!(s.delta_mean.iter().all(|d| (d - 0.9).abs() < 1e-12));
        assert!(s.rho.iter().all(|r| (r - 1.2).abs() < 1e-12));

        let mut wild = reference.clone();
        wild.coefficients.beta_11 += 5.0;
        let s = Signal::from_models(&reference, &wild, &g, &train, &test).unwrap();
        assert!(s.rho.iter().all(|r| *r == RHO_MAX));
        assert_eq!(s.clamped, s.rho.len());
    }

    #[test]
    fn straddling_cell_takes_largest_intersection() {
        let cell = |id, e: f64, w: f64| Cell {
            cell_id: id,
            easting_km: e,
            northing_km: 0.0,
            width_km: w,
            height_km: 10.0,
            lat: 0.0,
            lon: 0.0,
            elev_m: 0.0,
        };
        let coarse = GridSpec::new(vec![cell(1, 5.0, 10.0), cell(2, 15.0, 10.0)]).unwrap();
        // 60% in coarse cell 1, 40% in coarse cell 2
        let fine = Arc::new(GridSpec::new(vec![cell(10, 9.5, 5.0)]).unwrap());
        let map = OverlapMap::build(&coarse, &fine);
        let mapping = largest_intersection(&map, &fine).unwrap();
        assert_eq!(mapping, vec![0]);
        let areas: Vec<f64> = map.members.iter().map(|m| m.iter().map(|p| p.1).sum()).collect();
        assert!((areas[0] / (areas[0] + areas[1]) - 0.6).abs() < 1e-12);

        let dates = Period::years(2000, 2000).dates();
        let n = dates.len();
        let sig = Signal {
            n_coarse: 2,
            n_days: n,
            delta_mean: [vec![1.0; n], vec![-1.0; n]].concat(),
            rho: vec![1.0; 2 * n],
            clamped: 0,
        };
        let b = Baseline {
            n_cells: 1,
            n_days: n,
            mu_star: vec![0.0; n],
            sigma: vec![1.0; n],
        };
        let z = Field::constant(fine, dates, 0.0).unwrap();
        let x = assemble(Variant::Trend, &z, &b, Some((&sig, &mapping))).unwrap();
        assert!(x.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("trendvar".parse::<Variant>().unwrap(), Variant::TrendVar);
        assert_eq!("XSTAR".parse::<Variant>().unwrap(), Variant::Xstar);
        assert!("both".parse::<Variant>().is_err());
    }
}
