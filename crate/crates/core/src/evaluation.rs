//! Out-of-sample verification: weighted integrated quadratic distance (IQD)
//! with cell bootstrap bounds, CRPS, aggregated autocorrelation and monthly
//! semi-variogram comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eqm::quantile_sorted;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::io::{write_atomic, write_json};
use crate::residual::variogram::{empirical_variogram, DistanceBins, EmpiricalVariogram, VariogramBin};
use crate::rng::{substream, Stream};

pub const DEFAULT_BOOTSTRAP: usize = 10_000;
pub const DEFAULT_MAX_LAG: usize = 30;
pub const WINTER_MONTHS: [u8; 3] = [12, 1, 2];

/// Emphasis of the IQD integrand. Window edges come from quantiles of the
/// reference sample G.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Full,
    UpperTail,
    Center,
    LowerTail,
}

impl WeightKind {
    pub const ALL: [WeightKind; 4] = [
        WeightKind::Full,
        WeightKind::UpperTail,
        WeightKind::Center,
        WeightKind::LowerTail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Full => "full",
            WeightKind::UpperTail => "upper_tail",
            WeightKind::Center => "center",
            WeightKind::LowerTail => "lower_tail",
        }
    }

    /// Integration window `[a, b]` given the sorted reference sample.
    pub fn window(self, g_sorted: &[f64]) -> (f64, f64) {
        let q = |p| quantile_sorted(g_sorted, p);
        match self {
            WeightKind::Full => (f64::NEG_INFINITY, f64::INFINITY),
            WeightKind::UpperTail => (q(0.95), f64::INFINITY),
            WeightKind::Center => (q(0.45), q(0.55)),
            WeightKind::LowerTail => (f64::NEG_INFINITY, q(0.05)),
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightKind::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weight {s:?}")))
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `∫ (F − G)² ω dx` for the empirical CDFs of two samples, with ω the
/// indicator of `window`. Exact: both step functions are constant between
/// consecutive merged sample points.
pub fn iqd_window(f_sorted: &[f64], g_sorted: &[f64], window: (f64, f64)) -> f64 {
    let (n, m) = (f_sorted.len() as f64, g_sorted.len() as f64);
    let (a, b) = window;
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    while i < f_sorted.len() || j < g_sorted.len() {
        let z = match (f_sorted.get(i), g_sorted.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            let len = (z.min(b) - p.max(a)).max(0.0);
            if len > 0.0 {
                let d = i as f64 / n - j as f64 / m;
                total += d * d * len;
            }
        }
        while i < f_sorted.len() && f_sorted[i] == z {
            i += 1;
        }
        while j < g_sorted.len() && g_sorted[j] == z {
            j += 1;
        }
        prev = Some(z);
    }
    total
}

/// IQD of sample F against reference sample G under `weight`.
pub fn iqd(f: &[f64], g: &[f64], weight: WeightKind) -> Result<f64> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::InvalidInput("IQD needs two non-empty samples".into()));
    }
    let (fs, gs) = (sorted(f), sorted(g));
    Ok(iqd_window(&fs, &gs, weight.window(&gs)))
}

/// `Σ_i |x_i − x_j|` pairs for a sorted sample, divided by `n²`.
fn mean_abs_pair(s: &[f64]) -> f64 {
    let n = s.len();
    let sum: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x)
        .sum();
    2.0 * sum / (n * n) as f64
}

/// Mean CRPS of the ensemble `f` evaluated at each observation in `g`:
/// `mean_j E|X − y_j| − ½ E|X − X'|`.
pub fn crps_mean(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.is_empty() || g.is_empty() {
        return Err(Error::InvalidInput("CRPS needs two non-empty samples".into()));
    }
    let fs = sorted(f);
    let n = fs.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for x in &fs {
        prefix.push(prefix.last().unwrap() + x);
    }
    let total = prefix[n];
    let abs_to: f64 = g
        .iter()
        .map(|y| {
            let k = fs.partition_point(|x| x <= y);
            let (below, above) = (prefix[k], total - prefix[k]);
            (y * k as f64 - below + above - y * (n - k) as f64) / n as f64
        })
        .sum();
    Ok(abs_to / g.len() as f64 - 0.5 * mean_abs_pair(&fs))
}

/// Mean with a 90% percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo90: f64,
    pub hi90: f64,
}

/// Percentile bootstrap of the mean, resampling the given values with
/// replacement. The interval is widened if needed to contain the mean.
pub fn bootstrap_mean(values: &[f64], resamples: usize, rng: &mut impl Rng) -> Result<Interval> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidInput("bootstrap needs values and resamples".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&means, 0.05);
    let hi = quantile_sorted(&means, 0.95);
    Ok(Interval {
        mean,
        lo90: lo.min(mean),
        hi90: hi.max(mean),
    })
}

/// Per-cell IQD between a method field and the observations.
pub fn iqd_per_cell(method: &Field, obs: &Field, weight: WeightKind) -> Result<Vec<f64>> {
    method.check_aligned(obs)?;
    (0..obs.n_cells())
        .into_par_iter()
        .map(|c| iqd(method.series(c), obs.series(c), weight))
        .collect()
}

/// Catchment mean of per-cell IQDs with cell-bootstrap bounds.
pub fn iqd_catchment(
    method: &Field,
    obs: &Field,
    weight: WeightKind,
    resamples: usize,
    rng: &mut impl Rng,
) -> Result<Interval> {
    let per_cell = iqd_per_cell(method, obs, weight)?;
    bootstrap_mean(&per_cell, resamples, rng)
}

/// Sample autocorrelation at lags `1..=max_lag` with the biased (1/n)
/// autocovariance.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if max_lag == 0 || max_lag * 4 >= n {
        return Err(Error::InvalidInput(format!(
            "max lag {max_lag} must be positive and below a quarter of the {n} days"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0: f64 = d.iter().map(|x| x * x).sum();
    if c0 == 0.0 {
        return Err(Error::Degenerate("constant series has no autocorrelation".into()));
    }
    Ok((1..=max_lag)
        .map(|k| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

/// ACF of the daily spatial-mean series.
pub fn acf_aggregated(field: &Field, max_lag: usize) -> Result<Vec<f64>> {
    acf(&field.spatial_mean(), max_lag)
}

/// Monthly empirical semi-variograms of raw daily fields, one per method.
pub fn variogram_compare(
    fields: &[(&str, &Field)],
    bins: &DistanceBins,
) -> Result<BTreeMap<String, EmpiricalVariogram>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidInput("no fields to compare".into()))?
        .1;
    for (_, f) in fields {
        first.check_aligned(f)?;
    }
    fields
        .par_iter()
        .map(|(name, f)| Ok((name.to_string(), empirical_variogram(f, bins)?)))
        .collect()
}

/// Plateau level of an empirical variogram: mean γ̂ over the upper third of
/// its distance bins.
pub fn sill(bins: &[VariogramBin]) -> Option<f64> {
    if bins.is_empty() {
        return None;
    }
    let start = bins.len() - bins.len().div_ceil(3);
    let upper = &bins[start..];
    Some(upper.iter().map(|b| b.gamma).sum::<f64>() / upper.len() as f64)
}

/// Mean sill over the given calendar months (1-based), skipping empty ones.
pub fn seasonal_sill(v: &EmpiricalVariogram, months: &[u8]) -> Option<f64> {
    let s: Vec<f64> = months
        .iter()
        .filter_map(|m| sill(&v.months[*m as usize - 1]))
        .collect();
    (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub iqd: BTreeMap<WeightKind, Interval>,
    pub crps: f64,
    pub acf: Vec<f64>,
    pub winter_sill: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchmentReport {
    pub catchment: String,
    pub n_cells: usize,
    pub obs_acf: Vec<f64>,
    pub obs_winter_sill: Option<f64>,
    pub methods: Vec<MethodReport>,
    pub variograms: BTreeMap<String, EmpiricalVariogram>,
}

impl CatchmentReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub catchments: Vec<CatchmentReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub resamples: usize,
    pub max_lag: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_BOOTSTRAP,
            max_lag: DEFAULT_MAX_LAG,
            seed: 0,
        }
    }
}

/// Scores every method field against the observations of one catchment.
/// `index` keys the bootstrap substreams.
pub fn evaluate_catchment(
    name: &str,
    index: u64,
    obs: &Field,
    methods: &[(String, Field)],
    opts: &EvalOptions,
) -> Result<CatchmentReport> {
    let bins = DistanceBins::for_grid(obs.grid());
    let mut named: Vec<(&str, &Field)> = vec![("obs", obs)];
    named.extend(methods.iter().map(|(n, f)| (n.as_str(), f)));
    let variograms = variogram_compare(&named, &bins)?;
    let mut reports = Vec::with_capacity(methods.len());
    for (k, (method, field)) in methods.iter().enumerate() {
        let mut iqd = BTreeMap::new();
        for (w, weight) in WeightKind::ALL.into_iter().enumerate() {
            let counter = (index << 32) | ((k as u64) << 8) | w as u64;
            let mut rng = substream(opts.seed, Stream::Bootstrap, counter);
            iqd.insert(weight, iqd_catchment(field, obs, weight, opts.resamples, &mut rng)?);
        }
        let crps = (0..obs.n_cells())
            .into_par_iter()
            .map(|c| crps_mean(field.series(c), obs.series(c)))
            .collect::<Result<Vec<_>>>()?;
        reports.push(MethodReport {
            method: method.clone(),
            iqd,
            crps: crps.iter().sum::<f64>() / crps.len() as f64,
            acf: acf_aggregated(field, opts.max_lag)?,
            winter_sill: seasonal_sill(&variograms[method.as_str()], &WINTER_MONTHS),
        });
    }
    Ok(CatchmentReport {
        catchment: name.to_string(),
        n_cells: obs.n_cells(),
        obs_acf: acf_aggregated(obs, opts.max_lag)?,
        obs_winter_sill: seasonal_sill(&variograms["obs"], &WINTER_MONTHS),
        methods: reports,
        variograms,
    })
}

impl EvalReport {
    /// JSON report plus three flat CSV tables next to it: IQD
    /// (`<stem>_iqd.csv`), ACF (`<stem>_acf.csv`) and variograms
    /// (`<stem>_variogram.csv`).
    pub fn write(&self, json_path: &Path) -> Result<()> {
        write_json(json_path, self)?;
        let stem = json_path.with_extension("");
        let sibling = |suffix: &str| {
            let mut p = stem.clone().into_os_string();
            p.push(suffix);
            std::path::PathBuf::from(p)
        };
        let iqd_path = sibling("_iqd.csv");
        write_atomic(&iqd_path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            let e = |err| Error::csv(&iqd_path, err);
            csv.write_record(["catchment", "method", "weight", "mean", "lo90", "hi90"]).map_err(e)?;
            for c in &self.catchments {
                for m in &c.methods {
                    for (w, i) in &m.iqd {
                        csv.write_record([
                            c.catchment.clone(),
                            m.method.clone(),
                            w.name().to_string(),
                            i.mean.to_string(),
                            i.lo90.to_string(),
                            i.hi90.to_string(),
                        ])
                        .map_err(e)?;
                    }
                }
            }
            csv.flush().map_err(|err| Error::io(&iqd_path, err))
        })?;
        let acf_path = sibling("_acf.csv");
        write_atomic(&acf_path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            let e = |err| Error::csv(&acf_path, err);
            csv.write_record(["catchment", "method", "lag", "acf"]).map_err(e)?;
            for c in &self.catchments {
                let rows = std::iter::once(("obs", &c.obs_acf))
                    .chain(c.methods.iter().map(|m| (m.method.as_str(), &m.acf)));
                for (name, acf) in rows {
                    for (k, r) in acf.iter().enumerate() {
                        csv.write_record([c.catchment.as_str(), name, &(k + 1).to_string(), &r.to_string()])
                            .map_err(e)?;
                    }
                }
            }
            csv.flush().map_err(|err| Error::io(&acf_path, err))
        })?;
        let vg_path = sibling("_variogram.csv");
        write_atomic(&vg_path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            let e = |err| Error::csv(&vg_path, err);
            csv.write_record(["catchment", "method", "month", "h_km", "gamma", "pairs"]).map_err(e)?;
            for c in &self.catchments {
                for (name, v) in &c.variograms {
                    for (m, bins) in v.months.iter().enumerate() {
                        for b in bins {
                            csv.write_record([
                                c.catchment.clone(),
                                name.clone(),
                                (m + 1).to_string(),
                                b.h.to_string(),
                                b.gamma.to_string(),
                                b.pairs.to_string(),
                            ])
                            .map_err(e)?;
                        }
                    }
                }
            }
            csv.flush().map_err(|err| Error::io(&vg_path, err))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::Period;
    use crate::grid::GridSpec;
    use crate::normal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal, StandardNormal};
    use std::sync::Arc;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn normals(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        let d = Normal::new(mu, sd).unwrap();
        let mut r = rng(seed);
        (0..n).map(|_| d.sample(&mut r)).collect()
    }

    fn flat(_: f64, _: f64) -> (f64, f64, f64) {
        (0.0, 0.0, 0.0)
    }

    #[test]
    fn trivial_cases() {
        let f = normals(500, 0.0, 1.0, 1);
        for w in WeightKind::ALL {
            assert_eq!(iqd(&f, &f, w).unwrap(), 0.0);
        }
        assert_eq!(iqd(&[0.0], &[1.0], WeightKind::Full).unwrap(), 1.0);
        assert!(iqd(&[], &[1.0], WeightKind::Full).is_err());
    }

    #[test]
    fn gaussian_shift_matches_quadrature() {
        let f = normals(100_000, 0.0, 1.0, 2);
        let g = normals(100_000, 1.0, 1.0, 3);
        let got = iqd(&f, &g, WeightKind::Full).unwrap();
        // composite Simpson on [-12, 13]
        let n = 20_000;
        let (a, b) = (-12.0, 13.0);
        let h = (b - a) / n as f64;
        let integrand = |x: f64| (normal::cdf(x) - normal::cdf(x - 1.0)).powi(2);
        let mut s = integrand(a) + integrand(b);
        for k in 1..n {
            s += integrand(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let want = s * h / 3.0;
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
    }

    #[test]
    fn iqd_equals_energy_form() {
        // ∫(F−G)² = E|X−Y| − ½E|X−X'| − ½E|Y−Y'|, so the CRPS route differs
        // from the IQD by a G-only constant.
        let f = normals(300, 0.2, 1.3, 4);
        let g = normals(200, -0.1, 0.8, 5);
        let i = iqd(&f, &g, WeightKind::Full).unwrap();
        let c = crps_mean(&f, &g).unwrap();
        let half_gg = 0.5 * mean_abs_pair(&sorted(&g));
        assert!((c - half_gg - i).abs() < 1e-12);
        // brute-force CRPS
        let brute = g
            .iter()
            .map(|y| {
                let a = f.iter().map(|x| (x - y).abs()).sum::<f64>() / f.len() as f64;
                let b = f.iter().flat_map(|x| f.iter().map(move |z| (x - z).abs())).sum::<f64>()
                    / (f.len() * f.len()) as f64;
                a - 0.5 * b
            })
            .sum::<f64>()
            / g.len() as f64;
        assert!((brute - c).abs() < 1e-12);
    }

    #[test]
    fn iqd_and_crps_rank_methods_alike() {
        let obs = normals(2000, 0.0, 1.0, 6);
        let methods: Vec<Vec<f64>> = [(0.0, 1.0), (0.3, 1.0), (0.0, 1.5), (1.0, 0.7), (-0.2, 1.1), (0.6, 2.0)]
            .iter()
            .enumerate()
            .map(|(k, (m, s))| normals(2000, *m, *s, 10 + k as u64))
            .collect();
        let rank = |scores: Vec<f64>| {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
            idx
        };
        let by_iqd = rank(methods.iter().map(|m| iqd(m, &obs, WeightKind::Full).unwrap()).collect());
        let by_crps = rank(methods.iter().map(|m| crps_mean(m, &obs).unwrap()).collect());
        assert_eq!(by_iqd, by_crps);
    }

    #[test]
    fn weighted_windows_bounded_by_full() {
        let f = normals(1000, 0.5, 1.2, 7);
        let g = normals(1000, 0.0, 1.0, 8);
        let full = iqd(&f, &g, WeightKind::Full).unwrap();
        for w in [WeightKind::UpperTail, WeightKind::Center, WeightKind::LowerTail] {
            let v = iqd(&f, &g, w).unwrap();
            assert!(v >= 0.0 && v <= full, "{w}");
        }
        let gs = sorted(&g);
        let (a, b) = WeightKind::Center.window(&gs);
        assert!(a < b);
        assert_eq!("upper_tail".parse::<WeightKind>().unwrap(), WeightKind::UpperTail);
    }

    #[test]
    fn bootstrap_degenerate_and_identity() {
        let g = Arc::new(GridSpec::regular(3, 3, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2000, 2001).dates();
        let mut r = rng(9);
        let obs = Field::from_fn(g, dates, |_, _| StandardNormal.sample(&mut r)).unwrap();
        let same = iqd_catchment(&obs, &obs, WeightKind::Full, 1000, &mut rng(1)).unwrap();
        assert_eq!((same.mean, same.lo90, same.hi90), (0.0, 0.0, 0.0));
        // a constant offset shifts each eCDF identically only when every cell
        // has the same sample, so build that case explicitly
        let first: Vec<f64> = obs.series(0).to_vec();
        let rep = obs.map(|_, t, _| first[t]).unwrap();
        let shifted = rep.map(|_, _, v| v + 1.0).unwrap();
        let i = iqd_catchment(&shifted, &rep, WeightKind::Full, 1000, &mut rng(2)).unwrap();
        assert!(i.mean > 0.0);
        assert_eq!(i.lo90, i.mean);
        assert_eq!(i.hi90, i.mean);
    }

    #[test]
    fn bootstrap_covers_mixture_mean() {
        // per-cell scores from two populations; the analytic mean is 2.0
        let mut r = rng(10);
        let low = Normal::new(1.0, 0.3).unwrap();
        let high = Normal::new(3.0, 0.6).unwrap();
        let reps = 200;
        let mut covered = 0;
        for k in 0..reps {
            let vals: Vec<f64> = (0..80)
                .map(|_| if r.random::<bool>() { low.sample(&mut r) } else { high.sample(&mut r) })
                .collect();
            let i = bootstrap_mean(&vals, 2000, &mut rng(100 + k)).unwrap();
            assert!(i.lo90 <= i.mean && i.mean <= i.hi90);
            covered += usize::from(i.lo90 <= 2.0 && 2.0 <= i.hi90);
        }
        assert!(covered as f64 >= 0.85 * reps as f64, "{covered}");
    }

    #[test]
    fn acf_cases() {
        let n = 7000;
        let mut r = rng(11);
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let a = acf(&noise, 30).unwrap();
        let band = 2.0 / (n as f64).sqrt();
        assert!(a.iter().filter(|x| x.abs() < band).count() >= 27);

        let mut x = vec![0.0; n];
        for t in 1..n {
            x[t] = 0.6 * x[t - 1] + noise[t];
        }
        let g = Arc::new(GridSpec::regular(2, 2, 1.0, (0.0, 0.0), 1, flat).unwrap());
        let start = chrono::NaiveDate::from_ymd_opt(1961, 1, 1).unwrap();
        let dates: Vec<_> = start.iter_days().take(n).collect();
        let f = Field::from_fn(g, dates, |_, t| x[t]).unwrap();
        let agg = acf_aggregated(&f, 30).unwrap();
        assert!((agg[0] - 0.6).abs() < 0.03);
        assert_eq!(agg, acf(&x, 30).unwrap());
        assert!(acf(&x[..100], 30).is_err());
    }

    #[test]
    fn variogram_shift_invariance_and_sill() {
        let g = Arc::new(GridSpec::regular(4, 4, 5.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2000, 2001).dates();
        let mut r = rng(12);
        let a = Field::from_fn(g, dates, |_, _| StandardNormal.sample(&mut r)).unwrap();
        let b = a.map(|_, _, v| v + 7.0).unwrap();
        let bins = DistanceBins::for_grid(a.grid());
        let out = variogram_compare(&[("a", &a), ("b", &b)], &bins).unwrap();
        for (ma, mb) in out["a"].months.iter().zip(&out["b"].months) {
            for (x, y) in ma.iter().zip(mb) {
                assert!((x.gamma - y.gamma).abs() < 1e-9);
            }
        }
        let s = sill(&out["a"].months[0]).unwrap();
        assert!((s - 1.0).abs() < 0.2, "{s}");
        assert_eq!(sill(&[]), None);
    }

    #[test]
    fn report_round_trip() {
        let g = Arc::new(GridSpec::regular(3, 3, 5.0, (0.0, 0.0), 1, flat).unwrap());
        let dates = Period::years(2000, 2001).dates();
        let mut r = rng(13);
        let obs = Field::from_fn(g, dates, |_, _| StandardNormal.sample(&mut r)).unwrap();
        let m = obs.map(|_, _, v| 1.2 * v + 0.3).unwrap();
        let opts = EvalOptions {
            resamples: 200,
            ..Default::default()
        };
        let c = evaluate_catchment("c1", 0, &obs, &[("m".into(), m)], &opts).unwrap();
        let report = EvalReport { catchments: vec![c] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        report.write(&p).unwrap();
        let back: EvalReport = crate::io::read_json(&p).unwrap();
        assert_eq!(back, report);
        let iqd_csv = std::fs::read_to_string(dir.path().join("report_iqd.csv")).unwrap();
        assert_eq!(iqd_csv.lines().count(), 1 + 4);
        assert!(dir.path().join("report_acf.csv").exists());
        assert!(dir.path().join("report_variogram.csv").exists());
    }

    proptest! {
        #[test]
        fn iqd_nonnegative_and_symmetric(
            f in prop::collection::vec(-50.0f64..50.0, 1..60),
            g in prop::collection::vec(-50.0f64..50.0, 1..60),
        ) {
            let (fs, gs) = (sorted(&f), sorted(&g));
            let all = (f64::NEG_INFINITY, f64::INFINITY);
            let a = iqd_window(&fs, &gs, all);
            let b = iqd_window(&gs, &fs, all);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            for w in WeightKind::ALL {
                prop_assert!(iqd(&f, &g, w).unwrap() <= a + 1e-12);
            }
        }
    }
}
