//! Empirical semi-variograms per calendar month and exponential model fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::GridSpec;
use crate::optim::brent_min;

pub const DEFAULT_BINS: usize = 15;

/// Exponential covariance `θ0·1{h=0} + θ1·exp(−h/θ2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramParams {
    pub nugget: f64,
    pub sill: f64,
    pub range_km: f64,
}

impl VariogramParams {
    pub fn new(nugget: f64, sill: f64, range_km: f64) -> Result<Self> {
        if !(nugget >= 0.0 && sill >= 0.0 && range_km > 0.0)
            || !(nugget.is_finite() && sill.is_finite() && range_km.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "variogram parameters must be non-negative with positive range, got ({nugget}, {sill}, {range_km})"
            )));
        }
        Ok(Self {
            nugget,
            sill,
            range_km,
        })
    }

    /// Semi-variogram `γ(h)`; zero at `h = 0`.
    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            self.nugget + self.sill * (1.0 - (-h / self.range_km).exp())
        }
    }

    pub fn covariance(&self, h: f64) -> f64 {
        if h <= 0.0 {
            self.nugget + self.sill
        } else {
            self.sill * (-h / self.range_km).exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Mean distance of the pairs in the bin (km).
    pub h: f64,
    pub gamma: f64,
    pub pairs: usize,
}

/// One empirical variogram per calendar month (index 0 = January). Months
/// without data have no bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub months: Vec<Vec<VariogramBin>>,
}

/// Equal-width distance bins on `(0, max_km]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBins {
    pub n_bins: usize,
    pub max_km: f64,
}

impl DistanceBins {
    /// Default binning for a catchment: 15 bins up to half its diameter.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            max_km: 0.5 * grid.diameter_km(),
        }
    }

    fn index(&self, h: f64) -> Option<usize> {
        if h <= 0.0 || h > self.max_km {
            return None;
        }
        let w = self.max_km / self.n_bins as f64;
        Some(((h / w) as usize).min(self.n_bins - 1))
    }
}

/// Cell pairs grouped by distance bin.
struct PairTable {
    /// `(i, j, bin)` with `i < j`.
    pairs: Vec<(usize, usize, usize)>,
    mean_h: Vec<f64>,
    counts: Vec<usize>,
}

impl PairTable {
    fn new(grid: &GridSpec, bins: &DistanceBins) -> Self {
        let mut pairs = Vec::new();
        let mut sum_h = vec![0.0; bins.n_bins];
        let mut counts = vec![0; bins.n_bins];
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let h = grid.cell(i).distance_km(grid.cell(j));
                if let Some(b) = bins.index(h) {
                    pairs.push((i, j, b));
                    sum_h[b] += h;
                    counts[b] += 1;
                }
            }
        }
        let mean_h = sum_h
            .iter()
            .zip(&counts)
            .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
            .collect();
        Self {
            pairs,
            mean_h,
            counts,
        }
    }
}

/// `γ̂(h) = Σ_pairs Σ_t (ν_st − ν_s't)² / (2 |S(h)| |T|)` per calendar month.
///
/// Cross products for each month are formed with one matrix product, so the
/// cost is dominated by `S² · days` multiply-adds.
pub fn empirical_variogram(field: &Field, bins: &DistanceBins) -> Result<EmpiricalVariogram> {
    if bins.n_bins == 0 || !(bins.max_km > 0.0) {
        return Err(Error::InvalidInput("distance bins need a positive count and extent".into()));
    }
    let table = PairTable::new(field.grid(), bins);
    let months = field.calendar(0).month;
    let n_cells = field.n_cells();
    let mut out = Vec::with_capacity(12);
    for m in 1..=12u8 {
        let days: Vec<usize> = (0..field.n_days()).filter(|&t| months[t] == m).collect();
        if days.is_empty() {
            out.push(vec![]);
            continue;
        }
        let v = DMatrix::from_fn(n_cells, days.len(), |s, k| field.get(s, days[k]));
        let g = &v * v.transpose();
        let mut sums = vec![0.0; bins.n_bins];
        for &(i, j, b) in &table.pairs {
            sums[b] += g[(i, i)] + g[(j, j)] - 2.0 * g[(j, i)];
        }
        let mut month_bins = Vec::new();
        for b in 0..bins.n_bins {
            if table.counts[b] == 0 {
                tracing::debug!(bin = b, month = m, "empty variogram bin dropped");
                continue;
            }
            let gamma = sums[b] / (2.0 * table.counts[b] as f64 * days.len() as f64);
            month_bins.push(VariogramBin {
                h: table.mean_h[b],
                gamma: gamma.max(0.0),
                pairs: table.counts[b],
            });
        }
        out.push(month_bins);
    }
    Ok(EmpiricalVariogram { months: out })
}

pub const MIN_BINS: usize = 4;
const STARTS: usize = 5;

/// Weighted least-squares fit of the exponential semi-variogram with weights
/// `|S(h)|/h²` and non-negative parameters.
///
/// For a fixed range the nugget and partial sill solve a two-variable
/// non-negative least-squares problem, so only the range is searched:
/// Brent's method in log-range on five sub-intervals, keeping the best.
pub fn variogram_fit(bins: &[VariogramBin]) -> Result<VariogramParams> {
    let usable: Vec<&VariogramBin> = bins
        .iter()
        .filter(|b| b.pairs > 0 && b.h > 0.0 && b.gamma.is_finite())
        .collect();
    if usable.len() < MIN_BINS {
        return Err(Error::VariogramFit(format!(
            "need at least {MIN_BINS} usable bins, got {}",
            usable.len()
        )));
    }
    let h: Vec<f64> = usable.iter().map(|b| b.h).collect();
    let y: Vec<f64> = usable.iter().map(|b| b.gamma).collect();
    let w: Vec<f64> = usable.iter().map(|b| b.pairs as f64 / (b.h * b.h)).collect();
    let h_min = h.iter().copied().fold(f64::INFINITY, f64::min);
    let h_max = h.iter().copied().fold(0.0, f64::max);

    let profile = |log_range: f64| -> (f64, f64, f64) {
        let r = log_range.exp();
        let b: Vec<f64> = h.iter().map(|hj| 1.0 - (-hj / r).exp()).collect();
        nnls2(&b, &y, &w)
    };

    let (lo, hi) = ((0.05 * h_min).ln(), (20.0 * h_max).ln());
    let width = (hi - lo) / STARTS as f64;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..STARTS {
        let a = lo + k as f64 * width;
        let (x, fx) = brent_min(|v| profile(v).0, a, a + width, 1e-12);
        if fx.is_finite() && best.is_none_or(|b| fx < b.1) {
            best = Some((x, fx));
        }
    }
    let (x, _) = best.ok_or_else(|| {
        Error::VariogramFit(format!(
            "no start produced a finite objective ({} bins, distances {h_min:.3}..{h_max:.3} km)",
            usable.len()
        ))
    })?;
    let (_, nugget, sill) = profile(x);
    VariogramParams::new(nugget, sill, x.exp()).map_err(|e| Error::VariogramFit(e.to_string()))
}

/// Minimizes `Σ w (y − θ0 − θ1 b)²` over `θ0, θ1 ≥ 0`. Returns `(objective, θ0, θ1)`.
fn nnls2(b: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let obj = |t0: f64, t1: f64| -> f64 {
        b.iter()
            .zip(y)
            .zip(w)
            .map(|((bj, yj), wj)| wj * (yj - t0 - t1 * bj).powi(2))
            .sum()
    };
    let (mut sw, mut sb, mut sbb, mut sy, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((bj, yj), wj) in b.iter().zip(y).zip(w) {
        sw += wj;
        sb += wj * bj;
        sbb += wj * bj * bj;
        sy += wj * yj;
        sby += wj * bj * yj;
    }
    let mut cands = vec![((sy / sw).max(0.0), 0.0)];
    if sbb > 0.0 {
        cands.push((0.0, (sby / sbb).max(0.0)));
    }
    let det = sw * sbb - sb * sb;
    if det > 1e-12 * sw * sbb {
        let t0 = (sy * sbb - sb * sby) / det;
        let t1 = (sw * sby - sb * sy) / det;
        if t0 >= 0.0 && t1 >= 0.0 {
            cands.push((t0, t1));
        }
    }
    cands
        .into_iter()
        .map(|(t0, t1)| (obj(t0, t1), t0, t1))
        .fold((f64::INFINITY, 0.0, 0.0), |a, c| if c.0 < a.0 { c } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::Period;
    use crate::residual::sampler::FieldSampler;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn flat(_: f64, _: f64) -> (f64, f64, f64) {
        (0.0, 0.0, 0.0)
    }

    #[test]
    fn model_shape() {
        let p = VariogramParams::new(0.1, 0.8, 30.0).unwrap();
        assert_eq!(p.gamma(0.0), 0.0);
        assert!((p.covariance(0.0) - 0.9).abs() < 1e-15);
        assert!((p.covariance(30.0) - 0.8 * (-1.0f64).exp()).abs() < 1e-15);
        let mut prev = 0.0;
        for k in 1..200 {
            let g = p.gamma(k as f64);
            assert!(g >= prev);
            assert!((g + p.covariance(k as f64) - 0.9).abs() < 1e-12);
            prev = g;
        }
        assert!((p.gamma(1e6) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_and_offset_fields() {
        let g = Arc::new(GridSpec::regular(4, 4, 2.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2000, 2000).dates();
        let f = Field::constant(g.clone(), dates.clone(), 3.0).unwrap();
        let bins = DistanceBins::for_grid(&g);
        let emp = empirical_variogram(&f, &bins).unwrap();
        assert!(emp.months.iter().flatten().all(|b| b.gamma == 0.0));

        // two cells differing by 2 everywhere
        let g2 = Arc::new(GridSpec::regular(2, 1, 5.0, (0.0, 0.0), 1, flat).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let base: Vec<f64> = (0..dates.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = Field::from_series(g2, dates, vec![base.clone(), base.iter().map(|v| v + 2.0).collect()]).unwrap();
        let emp = empirical_variogram(&f, &DistanceBins { n_bins: 3, max_km: 6.0 }).unwrap();
        for m in &emp.months {
            assert_eq!(m.len(), 1);
            assert!((m[0].gamma - 2.0).abs() < 1e-9);
            assert_eq!(m[0].pairs, 1);
            assert!((m[0].h - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_matches_pair_loop() {
        let g = Arc::new(GridSpec::regular(3, 3, 2.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2001, 2001).dates();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f = Field::from_fn(g.clone(), dates, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let bins = DistanceBins { n_bins: 4, max_km: 4.0 };
        let emp = empirical_variogram(&f, &bins).unwrap();
        let months = f.calendar(0).month;
        for m in 1..=12u8 {
            let days: Vec<usize> = (0..f.n_days()).filter(|&t| months[t] == m).collect();
            let mut sums = [0.0; 4];
            let mut counts = [0usize; 4];
            for i in 0..9 {
                for j in i + 1..9 {
                    let h = g.cell(i).distance_km(g.cell(j));
                    let Some(b) = bins.index(h) else { continue };
                    counts[b] += 1;
                    for &t in &days {
                        sums[b] += (f.get(i, t) - f.get(j, t)).powi(2);
                    }
                }
            }
            let want: Vec<f64> = (0..4)
                .filter(|b| counts[*b] > 0)
                .map(|b| sums[b] / (2.0 * counts[b] as f64 * days.len() as f64))
                .collect();
            let got: Vec<f64> = emp.months[m as usize - 1].iter().map(|b| b.gamma).collect();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_values_are_inverted() {
        let truth = VariogramParams::new(0.05, 0.8, 30.0).unwrap();
        let bins: Vec<VariogramBin> = (1..=15)
            .map(|k| {
                let h = 4.0 * k as f64;
                VariogramBin {
                    h,
                    gamma: truth.gamma(h),
                    pairs: 100 + k,
                }
            })
            .collect();
        let fit = variogram_fit(&bins).unwrap();
        assert!((fit.nugget - 0.05).abs() < 1e-6, "{fit:?}");
        assert!((fit.sill - 0.8).abs() < 1e-6, "{fit:?}");
        assert!((fit.range_km - 30.0).abs() < 1e-6 * 30.0, "{fit:?}");
    }

    #[test]
    fn flat_variogram_is_pure_nugget() {
        let bins: Vec<VariogramBin> = (1..=10)
            .map(|k| VariogramBin {
                h: k as f64,
                gamma: 1.0,
                pairs: 50,
            })
            .collect();
        let fit = variogram_fit(&bins).unwrap();
        assert!((fit.nugget - 1.0).abs() < 1e-3, "{fit:?}");
        assert!(fit.sill < 1e-3, "{fit:?}");
        assert!(variogram_fit(&bins[..3]).is_err());
    }

    #[test]
    fn simulated_exponential_field_is_recovered() {
        let truth = VariogramParams::new(0.0, 0.8, 30.0).unwrap();
        let g = Arc::new(GridSpec::regular(24, 24, 5.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2001, 2001).dates();
        let mut sampler = FieldSampler::new(g.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let days = dates.len();
        let mut values = vec![0.0; g.len() * days];
        for t in 0..days {
            let v = sampler.sample(&truth, &mut rng).unwrap();
            for (c, x) in v.iter().enumerate() {
                values[c * days + t] = *x;
            }
        }
        let f = Field::new(g.clone(), dates, values).unwrap();
        let bins = DistanceBins { n_bins: 15, max_km: 90.0 };
        let emp = empirical_variogram(&f, &bins).unwrap();
        // pool the year
        let n = emp.months[0].len();
        let pooled: Vec<VariogramBin> = (0..n)
            .map(|b| VariogramBin {
                h: emp.months[0][b].h,
                gamma: emp.months.iter().map(|m| m[b].gamma).sum::<f64>() / 12.0,
                pairs: emp.months[0][b].pairs,
            })
            .collect();
        for b in pooled.iter().filter(|b| b.h <= 60.0) {
            let want = truth.gamma(b.h);
            assert!((b.gamma - want).abs() < 0.1 * want, "h {}: {} vs {want}", b.h, b.gamma);
        }
        let fit = variogram_fit(&pooled).unwrap();
        assert!((fit.range_km - 30.0).abs() < 6.0, "{fit:?}");
    }
}
