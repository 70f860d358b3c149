//! Space-time Gaussian moment model for daily mean temperature.
//!
//! For cell `r` and day `t`
//!
//! ```text
//! μ_rt      = α11 + α12 c1 + α13 c2 + α14 c3 + Σ harmonics(d(t))·α2 + α3 y(t)
//! log σ_rt  = β11 + β12 c1 + β13 c2 + β14 c3 + Σ harmonics(d(t))·β2
//! ```
//!
//! where `c` are the normalized (latitude, longitude, elevation) covariates,
//! `d(t)` the day of a 365-day year and `y(t)` the decade offset from the
//! reference year. The 17 coefficients are fitted jointly by maximum
//! likelihood. Both predictors separate into a cell part plus a day part,
//! which keeps every likelihood evaluation a single pass over the data.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calendar::CalendarIndex;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::GridSpec;
use crate::optim::{bfgs, BfgsOptions};

/// E[log |Z|] for standard normal Z is −(γ + ln 2)/2 ≈ −0.635.
const LOG_HALF_NORMAL_OFFSET: f64 = 0.635;

/// The 17 coefficients, in normalized covariate units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentCoefficients {
    pub alpha_11: f64,
    pub alpha_12: f64,
    pub alpha_13: f64,
    pub alpha_14: f64,
    pub alpha_21: f64,
    pub alpha_22: f64,
    pub alpha_23: f64,
    pub alpha_24: f64,
    pub alpha_3: f64,
    pub beta_11: f64,
    pub beta_12: f64,
    pub beta_13: f64,
    pub beta_14: f64,
    pub beta_21: f64,
    pub beta_22: f64,
    pub beta_23: f64,
    pub beta_24: f64,
}

impl MomentCoefficients {
    pub const NAMES: [&'static str; 17] = [
        "alpha_11", "alpha_12", "alpha_13", "alpha_14", "alpha_21", "alpha_22", "alpha_23",
        "alpha_24", "alpha_3", "beta_11", "beta_12", "beta_13", "beta_14", "beta_21", "beta_22",
        "beta_23", "beta_24",
    ];

    pub fn to_array(&self) -> [f64; 17] {
        [
            self.alpha_11,
            self.alpha_12,
            self.alpha_13,
            self.alpha_14,
            self.alpha_21,
            self.alpha_22,
            self.alpha_23,
            self.alpha_24,
            self.alpha_3,
            self.beta_11,
            self.beta_12,
            self.beta_13,
            self.beta_14,
            self.beta_21,
            self.beta_22,
            self.beta_23,
            self.beta_24,
        ]
    }

    pub fn from_array(a: [f64; 17]) -> Self {
        Self {
            alpha_11: a[0],
            alpha_12: a[1],
            alpha_13: a[2],
            alpha_14: a[3],
            alpha_21: a[4],
            alpha_22: a[5],
            alpha_23: a[6],
            alpha_24: a[7],
            alpha_3: a[8],
            beta_11: a[9],
            beta_12: a[10],
            beta_13: a[11],
            beta_14: a[12],
            beta_21: a[13],
            beta_22: a[14],
            beta_23: a[15],
            beta_24: a[16],
        }
    }

    fn mean_spatial(&self) -> [f64; 4] {
        [self.alpha_11, self.alpha_12, self.alpha_13, self.alpha_14]
    }

    fn mean_harmonics(&self) -> [f64; 4] {
        [self.alpha_21, self.alpha_22, self.alpha_23, self.alpha_24]
    }

    fn sd_spatial(&self) -> [f64; 4] {
        [self.beta_11, self.beta_12, self.beta_13, self.beta_14]
    }

    fn sd_harmonics(&self) -> [f64; 4] {
        [self.beta_21, self.beta_22, self.beta_23, self.beta_24]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Centering and scaling applied to (lat, lon, elevation) before regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateNormalizer {
    pub center: [f64; 3],
    pub scale: [f64; 3],
}

impl CovariateNormalizer {
    /// Zero mean, unit standard deviation over the cells of `grid`. A covariate
    /// that is constant over the grid keeps scale 1 (its column is then zero).
    pub fn from_grid(grid: &GridSpec) -> Self {
        let n = grid.len() as f64;
        let mut center = [0.0; 3];
        let mut scale = [0.0; 3];
        for k in 0..3 {
            let m = grid.cells().iter().map(|c| c.covariates()[k]).sum::<f64>() / n;
            let v = grid
                .cells()
                .iter()
                .map(|c| (c.covariates()[k] - m).powi(2))
                .sum::<f64>()
                / n;
            center[k] = m;
            scale[k] = if v.sqrt() > 1e-12 * m.abs().max(1.0) {
                v.sqrt()
            } else {
                1.0
            };
        }
        Self { center, scale }
    }

    pub fn apply(&self, raw: [f64; 3]) -> [f64; 3] {
        [
            (raw[0] - self.center[0]) / self.scale[0],
            (raw[1] - self.center[1]) / self.scale[1],
            (raw[2] - self.center[2]) / self.scale[2],
        ]
    }
}

/// `[cos 2πd/365, sin 2πd/365, cos 4πd/365, sin 4πd/365]`.
pub fn harmonics(day: f64) -> [f64; 4] {
    let w = 2.0 * PI * day / 365.0;
    [w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin()]
}

/// Design rows for one observation. The mean row is
/// `[1, c1, c2, c3, h1, h2, h3, h4, y]` (no `y` without trend); the log-sd
/// row is the same without `y`.
pub fn design_row(
    normalized_covariates: [f64; 3],
    day: f64,
    decade: f64,
    include_trend: bool,
) -> (Vec<f64>, Vec<f64>) {
    let h = harmonics(day);
    let mut sd = vec![1.0];
    sd.extend_from_slice(&normalized_covariates);
    sd.extend_from_slice(&h);
    let mut mean = sd.clone();
    if include_trend {
        mean.push(decade);
    }
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentModel {
    pub coefficients: MomentCoefficients,
    pub normalizer: CovariateNormalizer,
    pub reference_year: i32,
    pub include_trend: bool,
}

/// Cell and day components of the two linear predictors.
#[derive(Debug, Clone)]
pub struct PredictorParts {
    /// Mean baseline per cell.
    pub mean_spatial: Vec<f64>,
    /// Mean seasonal term per day.
    pub mean_seasonal: Vec<f64>,
    /// Mean trend term per day.
    pub mean_trend: Vec<f64>,
    /// Log-sd baseline per cell.
    pub sd_spatial: Vec<f64>,
    /// Log-sd seasonal term per day.
    pub sd_seasonal: Vec<f64>,
}

/// Modeled mean and standard deviation per cell and day (cell-major).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSurface {
    pub n_cells: usize,
    pub n_days: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MomentSurface {
    pub fn mu(&self, cell: usize, day: usize) -> f64 {
        self.mu[cell * self.n_days + day]
    }

    pub fn sigma(&self, cell: usize, day: usize) -> f64 {
        self.sigma[cell * self.n_days + day]
    }
}

impl MomentModel {
    /// A model with explicit coefficients whose normalizer is taken from `grid`.
    pub fn with_coefficients(
        coefficients: MomentCoefficients,
        grid: &GridSpec,
        reference_year: i32,
    ) -> Self {
        Self {
            coefficients,
            normalizer: CovariateNormalizer::from_grid(grid),
            reference_year,
            include_trend: true,
        }
    }

    pub fn parts(&self, grid: &GridSpec, calendar: &CalendarIndex) -> PredictorParts {
        let c = &self.coefficients;
        let spatial = |w: [f64; 4]| -> Vec<f64> {
            grid.cells()
                .iter()
                .map(|cell| {
                    let z = self.normalizer.apply(cell.covariates());
                    w[0] + w[1] * z[0] + w[2] * z[1] + w[3] * z[2]
                })
                .collect()
        };
        let seasonal = |w: [f64; 4]| -> Vec<f64> {
            calendar
                .day
                .iter()
                .map(|&d| {
                    let h = harmonics(f64::from(d));
                    w[0] * h[0] + w[1] * h[1] + w[2] * h[2] + w[3] * h[3]
                })
                .collect()
        };
        let alpha_3 = if self.include_trend { c.alpha_3 } else { 0.0 };
        PredictorParts {
            mean_spatial: spatial(c.mean_spatial()),
            mean_seasonal: seasonal(c.mean_harmonics()),
            mean_trend: calendar.decade.iter().map(|y| alpha_3 * y).collect(),
            sd_spatial: spatial(c.sd_spatial()),
            sd_seasonal: seasonal(c.sd_harmonics()),
        }
    }

    pub fn predict(&self, grid: &GridSpec, calendar: &CalendarIndex) -> MomentSurface {
        self.check_calendar(calendar);
        let p = self.parts(grid, calendar);
        let n_days = calendar.len();
        let mut mu = Vec::with_capacity(grid.len() * n_days);
        let mut sigma = Vec::with_capacity(grid.len() * n_days);
        for r in 0..grid.len() {
            for t in 0..n_days {
                mu.push(p.mean_spatial[r] + p.mean_seasonal[t] + p.mean_trend[t]);
                sigma.push((p.sd_spatial[r] + p.sd_seasonal[t]).exp());
            }
        }
        MomentSurface {
            n_cells: grid.len(),
            n_days,
            mu,
            sigma,
        }
    }

    /// Predicts on the grid and dates of `field`.
    pub fn predict_on(&self, field: &Field) -> MomentSurface {
        self.predict(field.grid(), &field.calendar(self.reference_year))
    }

    fn check_calendar(&self, calendar: &CalendarIndex) {
        debug_assert_eq!(calendar.reference_year, self.reference_year);
    }

    /// Gaussian log-likelihood of `field` under the model.
    pub fn log_likelihood(&self, field: &Field) -> f64 {
        let data = SeparableData::new(field, &self.normalizer, self.reference_year);
        let theta = pack(&self.coefficients, self.include_trend);
        data.evaluate(&theta, self.include_trend, false).0
    }
}

/// Result of a maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct MomentFit {
    pub model: MomentModel,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub include_trend: bool,
    pub max_iter: usize,
    /// Tolerance on the sup-norm of the per-observation log-likelihood gradient.
    pub grad_tol: f64,
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            include_trend: true,
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

/// Joint maximum-likelihood fit of all coefficients to `field`.
///
/// Covariates are normalized over the field's grid. Starts from OLS for the
/// mean and OLS of `log|residual| + 0.635` for the log-sd, then runs BFGS on
/// the mean log-likelihood per observation, seeded with the inverse Fisher
/// information at the start point.
pub fn fit(field: &Field, reference_year: i32, opts: &FitOptions) -> Result<MomentFit> {
    if field.n_days() < 730 {
        return Err(Error::InvalidInput(format!(
            "moment fit needs at least two years of daily data, got {} days",
            field.n_days()
        )));
    }
    let mut triples: Vec<[u64; 3]> = field
        .grid()
        .cells()
        .iter()
        .map(|c| c.covariates().map(f64::to_bits))
        .collect();
    triples.sort_unstable();
    triples.dedup();
    if triples.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "moment fit needs at least 4 distinct covariate triples, got {}",
            triples.len()
        )));
    }

    let normalizer = CovariateNormalizer::from_grid(field.grid());
    let data = SeparableData::new(field, &normalizer, reference_year);
    let trend = opts.include_trend;
    let theta0 = data.initial(trend);
    let n_obs = data.n_obs() as f64;
    let init_ll = data.evaluate(&theta0, trend, false).0;
    let inv_h = data.inverse_fisher(&theta0, trend).map(|m| m * n_obs);

    let bfgs_opts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        rel_tol: opts.rel_tol,
    };
    let result = bfgs(
        |theta| {
            let (ll, g) = data.evaluate(theta, trend, true);
            (-ll / n_obs, -g / n_obs)
        },
        theta0.clone(),
        inv_h,
        &bfgs_opts,
    );
    let ll = -result.value * n_obs;
    let (theta, ll) = if ll >= init_ll {
        (result.x, ll)
    } else {
        (theta0, init_ll)
    };
    let model = MomentModel {
        coefficients: unpack(&theta, trend),
        normalizer,
        reference_year,
        include_trend: trend,
    };
    if !result.converged || !model.coefficients.is_finite() {
        return Err(Error::NotConverged {
            iterations: result.iterations,
            log_likelihood: ll,
            grad_norm: result.grad_norm,
            best: Box::new(model),
        });
    }
    tracing::debug!(
        iterations = result.iterations,
        log_likelihood = ll,
        initial = init_ll,
        "moment model fitted"
    );
    Ok(MomentFit {
        model,
        log_likelihood: ll,
        initial_log_likelihood: init_ll,
        iterations: result.iterations,
        grad_norm: result.grad_norm,
    })
}

/// Standard errors from the inverse expected information, assuming
/// independent observations. Returned in coefficient order.
pub fn standard_errors(model: &MomentModel, field: &Field) -> Option<[f64; 17]> {
    let data = SeparableData::new(field, &model.normalizer, model.reference_year);
    let theta = pack(&model.coefficients, model.include_trend);
    let cov = data.inverse_fisher(&theta, model.include_trend)?;
    let mut out = [0.0; 17];
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        if i == 8 && !model.include_trend {
            continue;
        }
        *o = cov[(k, k)].sqrt();
        k += 1;
    }
    Some(out)
}

/// `(X − μ)/σ`.
pub fn standardize(field: &Field, surface: &MomentSurface) -> Result<Field> {
    check_surface(field, surface)?;
    field.map(|c, t, v| {
        let s = surface.sigma(c, t);
        (v - surface.mu(c, t)) / s
    })
}

/// `Z·σ + μ`, the inverse of [`standardize`].
pub fn destandardize(resid: &Field, surface: &MomentSurface) -> Result<Field> {
    check_surface(resid, surface)?;
    resid.map(|c, t, z| z * surface.sigma(c, t) + surface.mu(c, t))
}

fn check_surface(field: &Field, surface: &MomentSurface) -> Result<()> {
    if field.n_cells() != surface.n_cells || field.n_days() != surface.n_days {
        return Err(Error::Dimension(format!(
            "field is {}×{}, moment surface is {}×{}",
            field.n_cells(),
            field.n_days(),
            surface.n_cells,
            surface.n_days
        )));
    }
    if let Some(k) = surface.sigma.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "non-positive standard deviation at cell index {}, day index {}",
            k / surface.n_days,
            k % surface.n_days
        )));
    }
    Ok(())
}

fn pack(c: &MomentCoefficients, trend: bool) -> DVector<f64> {
    let a = c.to_array();
    DVector::from_iterator(
        if trend { 17 } else { 16 },
        a.iter()
            .enumerate()
            .filter(|(i, _)| trend || *i != 8)
            .map(|(_, v)| *v),
    )
}

fn unpack(theta: &DVector<f64>, trend: bool) -> MomentCoefficients {
    let mut a = [0.0; 17];
    let mut k = 0;
    for (i, slot) in a.iter_mut().enumerate() {
        if i == 8 && !trend {
            continue;
        }
        *slot = theta[k];
        k += 1;
    }
    MomentCoefficients::from_array(a)
}

/// Field data arranged for separable design evaluation.
struct SeparableData<'a> {
    field: &'a Field,
    /// Per cell `[1, c1, c2, c3]`.
    spatial: Vec<[f64; 4]>,
    /// Per day harmonics.
    seasonal: Vec<[f64; 4]>,
    decade: Vec<f64>,
}

/// Layout of `theta`: mean spatial (4), mean harmonics (4), [trend], sd spatial (4), sd harmonics (4).
struct Layout {
    trend: bool,
}

impl Layout {
    fn n_mean(&self) -> usize {
        if self.trend {
            9
        } else {
            8
        }
    }
    fn sd_start(&self) -> usize {
        self.n_mean()
    }
    fn len(&self) -> usize {
        self.n_mean() + 8
    }
}

impl<'a> SeparableData<'a> {
    fn new(field: &'a Field, normalizer: &CovariateNormalizer, reference_year: i32) -> Self {
        let cal = field.calendar(reference_year);
        Self {
            field,
            spatial: field
                .grid()
                .cells()
                .iter()
                .map(|c| {
                    let z = normalizer.apply(c.covariates());
                    [1.0, z[0], z[1], z[2]]
                })
                .collect(),
            seasonal: cal.day.iter().map(|&d| harmonics(f64::from(d))).collect(),
            decade: cal.decade,
        }
    }

    fn n_obs(&self) -> usize {
        self.spatial.len() * self.seasonal.len()
    }

    fn temporal_mean_features(&self, t: usize, trend: bool) -> Vec<f64> {
        let mut q = self.seasonal[t].to_vec();
        if trend {
            q.push(self.decade[t]);
        }
        q
    }

    /// Cell and day parts of both predictors for parameter vector `theta`.
    fn predictors(&self, theta: &DVector<f64>, trend: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let l = Layout { trend };
        let s0 = l.sd_start();
        let dot4 = |a: &[f64; 4], off: usize| -> f64 { (0..4).map(|k| a[k] * theta[off + k]).sum() };
        let mean_r: Vec<f64> = self.spatial.iter().map(|p| dot4(p, 0)).collect();
        let sd_r: Vec<f64> = self.spatial.iter().map(|p| dot4(p, s0)).collect();
        let mean_t: Vec<f64> = (0..self.seasonal.len())
            .map(|t| {
                let mut v = dot4(&self.seasonal[t], 4);
                if trend {
                    v += theta[8] * self.decade[t];
                }
                v
            })
            .collect();
        let sd_t: Vec<f64> = self.seasonal.iter().map(|h| dot4(h, s0 + 4)).collect();
        (mean_r, mean_t, sd_r, sd_t)
    }

    /// Log-likelihood and (optionally) its gradient.
    fn evaluate(&self, theta: &DVector<f64>, trend: bool, with_grad: bool) -> (f64, DVector<f64>) {
        let l = Layout { trend };
        let (mean_r, mean_t, sd_r, sd_t) = self.predictors(theta, trend);
        let n_days = self.seasonal.len();
        let inv_t: Vec<f64> = sd_t.iter().map(|v| (-v).exp()).collect();
        let sum_sd_t: f64 = sd_t.iter().sum();

        let mut day_mu = vec![0.0; n_days];
        let mut day_sd = vec![0.0; n_days];
        let mut cell_mu = vec![0.0; self.spatial.len()];
        let mut cell_sd = vec![0.0; self.spatial.len()];
        let mut ll = 0.0;
        for r in 0..self.spatial.len() {
            let inv_r = (-sd_r[r]).exp();
            let x = self.field.series(r);
            let (mut quad, mut g_mu, mut g_sd) = (0.0, 0.0, 0.0);
            for t in 0..n_days {
                let z = (x[t] - mean_r[r] - mean_t[t]) * inv_r * inv_t[t];
                let z2 = z * z;
                quad += z2;
                if with_grad {
                    // ∂/∂μ = z/σ, ∂/∂logσ = z² − 1
                    let gm = z * inv_r * inv_t[t];
                    g_mu += gm;
                    g_sd += z2 - 1.0;
                    day_mu[t] += gm;
                    day_sd[t] += z2 - 1.0;
                }
            }
            cell_mu[r] = g_mu;
            cell_sd[r] = g_sd;
            ll += -(n_days as f64) * sd_r[r] - sum_sd_t - 0.5 * quad;
        }

        let mut grad = DVector::zeros(l.len());
        if with_grad {
            for (r, p) in self.spatial.iter().enumerate() {
                for k in 0..4 {
                    grad[k] += cell_mu[r] * p[k];
                    grad[l.sd_start() + k] += cell_sd[r] * p[k];
                }
            }
            for t in 0..n_days {
                let q = self.temporal_mean_features(t, trend);
                for (k, qk) in q.iter().enumerate() {
                    grad[4 + k] += day_mu[t] * qk;
                }
                for k in 0..4 {
                    grad[l.sd_start() + 4 + k] += day_sd[t] * self.seasonal[t][k];
                }
            }
        }
        (ll, grad)
    }

    /// Σ_rt a_r b_t [P_r; Q_t][P_r; Q_t]ᵀ for cell features P and day features Q.
    fn cross(&self, a: &[f64], b: &[f64], q: &[Vec<f64>]) -> DMatrix<f64> {
        let ps = 4;
        let qs = q.first().map_or(0, Vec::len);
        let n = ps + qs;
        let mut m = DMatrix::zeros(n, n);
        let sum_a: f64 = a.iter().sum();
        let sum_b: f64 = b.iter().sum();
        let mut pa = [0.0; 4];
        for (r, p) in self.spatial.iter().enumerate() {
            for i in 0..ps {
                pa[i] += a[r] * p[i];
                for j in 0..ps {
                    m[(i, j)] += sum_b * a[r] * p[i] * p[j];
                }
            }
        }
        let mut qb = vec![0.0; qs];
        for (t, qt) in q.iter().enumerate() {
            for i in 0..qs {
                qb[i] += b[t] * qt[i];
                for j in 0..qs {
                    m[(ps + i, ps + j)] += sum_a * b[t] * qt[i] * qt[j];
                }
            }
        }
        for i in 0..ps {
            for j in 0..qs {
                m[(i, ps + j)] = pa[i] * qb[j];
                m[(ps + j, i)] = pa[i] * qb[j];
            }
        }
        m
    }

    /// Least-squares solve via SVD, tolerant of all-zero covariate columns.
    fn solve(m: DMatrix<f64>, rhs: DVector<f64>) -> DVector<f64> {
        m.svd(true, true)
            .solve(&rhs, 1e-12)
            .expect("SVD was computed with U and V")
    }

    fn initial(&self, trend: bool) -> DVector<f64> {
        let l = Layout { trend };
        let n_cells = self.spatial.len();
        let n_days = self.seasonal.len();
        let ones_r = vec![1.0; n_cells];
        let ones_t = vec![1.0; n_days];
        let q_mean: Vec<Vec<f64>> = (0..n_days)
            .map(|t| self.temporal_mean_features(t, trend))
            .collect();
        let q_sd: Vec<Vec<f64>> = self.seasonal.iter().map(|h| h.to_vec()).collect();

        // Mean OLS from per-cell and per-day sums.
        let xtx = self.cross(&ones_r, &ones_t, &q_mean);
        let rhs = self.separable_rhs(|r, t| self.field.get(r, t), &q_mean);
        let beta_mean = Self::solve(xtx, rhs);

        // Log-sd OLS on log|residual| + offset.
        let mut tmp = DVector::zeros(l.len());
        tmp.rows_mut(0, l.n_mean()).copy_from(&beta_mean);
        let (mean_r, mean_t, _, _) = self.predictors(&tmp, trend);
        let target = |r: usize, t: usize| {
            let res = (self.field.get(r, t) - mean_r[r] - mean_t[t]).abs().max(1e-12);
            res.ln() + LOG_HALF_NORMAL_OFFSET
        };
        let xtx = self.cross(&ones_r, &ones_t, &q_sd);
        let rhs = self.separable_rhs(target, &q_sd);
        let beta_sd = Self::solve(xtx, rhs);

        let mut theta = DVector::zeros(l.len());
        theta.rows_mut(0, l.n_mean()).copy_from(&beta_mean);
        theta.rows_mut(l.sd_start(), 8).copy_from(&beta_sd);
        theta
    }

    fn separable_rhs(&self, value: impl Fn(usize, usize) -> f64, q: &[Vec<f64>]) -> DVector<f64> {
        let qs = q.first().map_or(0, Vec::len);
        let n_days = self.seasonal.len();
        let mut rhs = DVector::zeros(4 + qs);
        let mut day_sum = vec![0.0; n_days];
        for (r, p) in self.spatial.iter().enumerate() {
            let mut cell_sum = 0.0;
            for (t, d) in day_sum.iter_mut().enumerate() {
                let v = value(r, t);
                cell_sum += v;
                *d += v;
            }
            for k in 0..4 {
                rhs[k] += p[k] * cell_sum;
            }
        }
        for (t, qt) in q.iter().enumerate() {
            for k in 0..qs {
                rhs[4 + k] += qt[k] * day_sum[t];
            }
        }
        rhs
    }

    /// Inverse of the expected information matrix at `theta`.
    fn inverse_fisher(&self, theta: &DVector<f64>, trend: bool) -> Option<DMatrix<f64>> {
        let l = Layout { trend };
        let (_, _, sd_r, sd_t) = self.predictors(theta, trend);
        let a: Vec<f64> = sd_r.iter().map(|v| (-2.0 * v).exp()).collect();
        let b: Vec<f64> = sd_t.iter().map(|v| (-2.0 * v).exp()).collect();
        let q_mean: Vec<Vec<f64>> = (0..self.seasonal.len())
            .map(|t| self.temporal_mean_features(t, trend))
            .collect();
        let q_sd: Vec<Vec<f64>> = self.seasonal.iter().map(|h| h.to_vec()).collect();
        let info_mean = self.cross(&a, &b, &q_mean);
        let ones_r = vec![1.0; self.spatial.len()];
        let ones_t = vec![1.0; self.seasonal.len()];
        let info_sd = self.cross(&ones_r, &ones_t, &q_sd) * 2.0;
        let mut info = DMatrix::zeros(l.len(), l.len());
        info.view_mut((0, 0), (l.n_mean(), l.n_mean()))
            .copy_from(&info_mean);
        info.view_mut((l.sd_start(), l.sd_start()), (8, 8))
            .copy_from(&info_sd);
        // Zero columns (constant covariates) get a unit diagonal so the inverse exists.
        for i in 0..l.len() {
            if info[(i, i)] == 0.0 {
                info[(i, i)] = 1.0;
            }
        }
        info.try_inverse()
    }
}

/// Surface of a model evaluated on a field's grid and dates, shared by several stages.
pub fn surface_for(model: &MomentModel, grid: &Arc<GridSpec>, dates: &[chrono::NaiveDate]) -> MomentSurface {
    model.predict(grid, &CalendarIndex::new(dates, model.reference_year))
}
