//! Gaussian ARMA(p, q) models: exact likelihood, order selection, simulation.
//!
//! `y_t − m = Σ φ_i (y_{t−i} − m) + e_t + Σ ψ_j e_{t−j}`, `e_t ~ N(0, σ²)`.
//! The likelihood is evaluated exactly with a Kalman filter on the state
//! space form of dimension `max(p, q + 1)`, started from the stationary
//! state covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{bfgs, numeric_gradient, BfgsOptions};

pub const MAX_ORDER: usize = 3;
const DIM: usize = MAX_ORDER + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaModel {
    pub p: usize,
    pub q: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Innovation variance σ².
    pub sigma2: f64,
    pub mean: f64,
}

/// `(T, R, m)` with `α_t = T α_{t−1} + R e_t`, `y_t = α_t[0]`.
type StateSpace = ([[f64; DIM]; DIM], [f64; DIM], usize);

impl ArmaModel {
    pub fn new(ar: Vec<f64>, ma: Vec<f64>, sigma2: f64, mean: f64) -> Result<Self> {
        if ar.len() > MAX_ORDER || ma.len() > MAX_ORDER {
            return Err(Error::InvalidInput(format!(
                "ARMA orders are limited to {MAX_ORDER}, got ({}, {})",
                ar.len(),
                ma.len()
            )));
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidInput(format!("invalid ARMA variance {sigma2} or mean {mean}")));
        }
        if !is_stationary(&ar) {
            return Err(Error::InvalidInput(format!("AR coefficients {ar:?} are not causal")));
        }
        let neg: Vec<f64> = ma.iter().map(|v| -v).collect();
        if !is_stationary(&neg) {
            return Err(Error::InvalidInput(format!("MA coefficients {ma:?} are not invertible")));
        }
        Ok(Self {
            p: ar.len(),
            q: ma.len(),
            ar,
            ma,
            sigma2,
            mean,
        })
    }

    pub fn white_noise(sigma2: f64) -> Self {
        Self {
            p: 0,
            q: 0,
            ar: vec![],
            ma: vec![],
            sigma2,
            mean: 0.0,
        }
    }

    fn state_space(&self) -> StateSpace {
        state_space(&self.ar, &self.ma)
    }

    /// Autocovariances at lags `0..=max_lag`.
    pub fn autocovariance(&self, max_lag: usize) -> Vec<f64> {
        let (t, r, m) = self.state_space();
        let p0 = stationary_covariance(&t, &r, m);
        let mut cur = p0;
        let mut out = Vec::with_capacity(max_lag + 1);
        for _ in 0..=max_lag {
            out.push(cur[0][0] * self.sigma2);
            cur = matmul(&t, &cur, m);
        }
        out
    }

    /// Theoretical autocorrelations at lags `0..=max_lag`.
    pub fn acf(&self, max_lag: usize) -> Vec<f64> {
        let g = self.autocovariance(max_lag);
        g.iter().map(|v| v / g[0]).collect()
    }

    /// Marginal variance of the process.
    pub fn process_variance(&self) -> f64 {
        self.autocovariance(0)[0]
    }

    /// Exact Gaussian log-likelihood of `series`.
    pub fn log_likelihood(&self, series: &[f64]) -> f64 {
        let y: Vec<f64> = series.iter().map(|v| v - self.mean).collect();
        let (ss, sum_log_f) = kalman(&y, &self.ar, &self.ma);
        let n = y.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI * self.sigma2).ln() + sum_log_f + ss / self.sigma2)
    }

    /// Stationary simulation of `n` values.
    ///
    /// The state starts from its stationary distribution and a further
    /// `10·(p+q+1)` steps are discarded.
    pub fn simulate<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let (t, r, m) = self.state_space();
        let p0 = stationary_covariance(&t, &r, m);
        let root = sqrt_psd(&p0, m);
        let sd = self.sigma2.sqrt();
        let mut state = [0.0; DIM];
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..m {
            state[i] = sd * (0..m).map(|j| root[i][j] * z[j]).sum::<f64>();
        }
        let burn = 10 * (self.p + self.q + 1);
        let mut out = Vec::with_capacity(n);
        for k in 0..burn + n {
            let e: f64 = sd * rng.sample::<f64, _>(StandardNormal);
            let mut next = [0.0; DIM];
            for i in 0..m {
                let mut v = r[i] * e;
                for j in 0..m {
                    v += t[i][j] * state[j];
                }
                next[i] = v;
            }
            state = next;
            if k >= burn {
                out.push(state[0] + self.mean);
            }
        }
        out
    }
}

/// Result of an order search.
#[derive(Debug, Clone)]
pub struct ArmaFit {
    pub model: ArmaModel,
    pub log_likelihood: f64,
    pub aicc: f64,
    /// `(p, q, AICc)` for every candidate that converged.
    pub candidates: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ArmaOptions {
    pub max_p: usize,
    pub max_q: usize,
}

impl Default for ArmaOptions {
    fn default() -> Self {
        Self {
            max_p: MAX_ORDER,
            max_q: MAX_ORDER,
        }
    }
}

pub const MIN_LENGTH: usize = 500;

/// Candidates with an AR or MA root closer to the unit circle than this are
/// not eligible for selection.
pub const MIN_ROOT_MODULUS: f64 = 1.01;

/// Fits every ARMA(p, q) up to the maximum orders by exact maximum likelihood
/// and returns the one with the smallest AICc.
pub fn arma_fit(series: &[f64], opts: &ArmaOptions) -> Result<ArmaFit> {
    if series.len() < MIN_LENGTH {
        return Err(Error::InvalidInput(format!(
            "ARMA fit needs at least {MIN_LENGTH} values, got {}",
            series.len()
        )));
    }
    if opts.max_p > MAX_ORDER || opts.max_q > MAX_ORDER {
        return Err(Error::InvalidInput(format!("ARMA orders are limited to {MAX_ORDER}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("ARMA input contains non-finite values".into()));
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = series.iter().map(|v| v - mean).collect();

    let mut best: Option<ArmaFit> = None;
    let mut candidates = Vec::new();
    for p in 0..=opts.max_p {
        for q in 0..=opts.max_q {
            let Some((model, ll)) = fit_order(&y, p, q) else {
                tracing::debug!(p, q, "ARMA candidate failed");
                continue;
            };
            let neg_ma: Vec<f64> = model.ma.iter().map(|v| -v).collect();
            let min_root = min_root_modulus(&model.ar).min(min_root_modulus(&neg_ma));
            if min_root < MIN_ROOT_MODULUS {
                tracing::debug!(p, q, min_root, "ARMA candidate rejected: root near the unit circle");
                continue;
            }
            let k = (p + q + 2) as f64;
            let aicc = -2.0 * ll + 2.0 * k + 2.0 * k * (k + 1.0) / (n as f64 - k - 1.0);
            candidates.push((p, q, aicc));
            if best.as_ref().is_none_or(|b| aicc < b.aicc) {
                best = Some(ArmaFit {
                    model: ArmaModel { mean, ..model },
                    log_likelihood: ll,
                    aicc,
                    candidates: vec![],
                });
            }
        }
    }
    let mut best = best.ok_or(Error::ArmaAllFailed {
        max_p: opts.max_p,
        max_q: opts.max_q,
    })?;
    best.candidates = candidates;
    Ok(best)
}

/// Maximum-likelihood fit of one order to a zero-mean series.
pub fn fit_order(y: &[f64], p: usize, q: usize) -> Option<(ArmaModel, f64)> {
    let n = y.len() as f64;
    let profile = |u: &DVector<f64>| -> f64 {
        let (ar, ma) = unconstrain(u, p);
        let (ss, sum_log_f) = kalman(y, &ar, &ma);
        let s2 = ss / n;
        // negative concentrated log-likelihood per observation
        0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0) + 0.5 * sum_log_f / n
    };

    let mut starts = vec![DVector::zeros(p + q)];
    if p + q > 0 {
        if let Some((ar, ma)) = hannan_rissanen(y, p, q) {
            if let Some(u) = constrain(&ar, &ma) {
                starts.push(u);
            }
        }
    }
    let opts = BfgsOptions {
        max_iter: 200,
        grad_tol: 1e-7,
        rel_tol: 1e-12,
    };
    let mut best: Option<(DVector<f64>, f64)> = None;
    for x0 in starts {
        let r = if p + q == 0 {
            let v = profile(&x0);
            (x0, v)
        } else {
            let mut f = |u: &DVector<f64>| profile(u);
            let res = bfgs(
                |u| {
                    let v = f(u);
                    let g = numeric_gradient(&mut f, u);
                    (v, g)
                },
                x0,
                None,
                &opts,
            );
            (res.x, res.value)
        };
        if r.1.is_finite() && best.as_ref().is_none_or(|b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (u, value) = best?;
    let (ar, ma) = unconstrain(&u, p);
    let (ss, _) = kalman(y, &ar, &ma);
    let model = ArmaModel::new(ar, ma, ss / n, 0.0).ok()?;
    Some((model, -value * n))
}

/// Standard errors of (AR, MA) coefficients from a numeric Hessian of the
/// concentrated log-likelihood.
pub fn standard_errors(model: &ArmaModel, series: &[f64]) -> Option<Vec<f64>> {
    let y: Vec<f64> = series.iter().map(|v| v - model.mean).collect();
    let n = y.len() as f64;
    let (p, k) = (model.p, model.p + model.q);
    let f = |x: &[f64]| -> f64 {
        let (ss, sum_log_f) = kalman(&y, &x[..p], &x[p..]);
        -0.5 * n * (ss / n).ln() - 0.5 * sum_log_f
    };
    let x0: Vec<f64> = model.ar.iter().chain(&model.ma).copied().collect();
    let h = 1e-4;
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let eval = |di: f64, dj: f64| {
                let mut x = x0.clone();
                x[i] += di;
                x[j] += dj;
                f(&x)
            };
            hess[(i, j)] = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
        }
    }
    let cov = (-hess).try_inverse()?;
    Some((0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
}

fn state_space(ar: &[f64], ma: &[f64]) -> StateSpace {
    let m = ar.len().max(ma.len() + 1);
    let mut t = [[0.0; DIM]; DIM];
    let mut r = [0.0; DIM];
    for (i, phi) in ar.iter().enumerate() {
        t[i][0] = *phi;
    }
    for i in 0..m.saturating_sub(1) {
        t[i][i + 1] = 1.0;
    }
    r[0] = 1.0;
    for (j, psi) in ma.iter().enumerate() {
        r[j + 1] = *psi;
    }
    (t, r, m)
}

fn matmul(a: &[[f64; DIM]; DIM], b: &[[f64; DIM]; DIM], m: usize) -> [[f64; DIM]; DIM] {
    let mut c = [[0.0; DIM]; DIM];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i][k];
            for j in 0..m {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

/// Solves `P = T P Tᵀ + R Rᵀ`.
fn stationary_covariance(t: &[[f64; DIM]; DIM], r: &[f64; DIM], m: usize) -> [[f64; DIM]; DIM] {
    let mm = m * m;
    let mut a = DMatrix::<f64>::identity(mm, mm);
    let mut b = DVector::<f64>::zeros(mm);
    for i in 0..m {
        for j in 0..m {
            b[i * m + j] = r[i] * r[j];
            for k in 0..m {
                for l in 0..m {
                    a[(i * m + j, k * m + l)] -= t[i][k] * t[j][l];
                }
            }
        }
    }
    let x = a.lu().solve(&b).unwrap_or_else(|| DVector::from_element(mm, f64::NAN));
    let mut p = [[0.0; DIM]; DIM];
    for i in 0..m {
        for j in 0..m {
            p[i][j] = 0.5 * (x[i * m + j] + x[j * m + i]);
        }
    }
    p
}

/// Symmetric square root factor `L` with `L Lᵀ = P` for positive semidefinite `P`.
fn sqrt_psd(p: &[[f64; DIM]; DIM], m: usize) -> [[f64; DIM]; DIM] {
    let mat = DMatrix::from_fn(m, m, |i, j| p[i][j]);
    let eig = mat.symmetric_eigen();
    let mut out = [[0.0; DIM]; DIM];
    for i in 0..m {
        for j in 0..m {
            out[i][j] = eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt();
        }
    }
    out
}

/// Kalman filter with unit innovation variance. Returns `(Σ v²/F, Σ log F)`.
fn kalman(y: &[f64], ar: &[f64], ma: &[f64]) -> (f64, f64) {
    let (t, r, m) = state_space(ar, ma);
    let mut p = stationary_covariance(&t, &r, m);
    if !p[0][0].is_finite() || p[0][0] <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rr = [[0.0; DIM]; DIM];
    for i in 0..m {
        for j in 0..m {
            rr[i][j] = r[i] * r[j];
        }
    }
    let mut a = [0.0; DIM];
    let (mut ss, mut sum_log_f) = (0.0, 0.0);
    let mut steady: Option<([f64; DIM], f64)> = None;
    for &yt in y {
        if let Some((k, f)) = steady {
            let v = yt - a[0];
            ss += v * v / f;
            sum_log_f += f.ln();
            let mut next = [0.0; DIM];
            for i in 0..m {
                let mut s = k[i] * v;
                for j in 0..m {
                    s += t[i][j] * a[j];
                }
                next[i] = s;
            }
            a = next;
            continue;
        }
        let f = p[0][0];
        if !(f > 0.0) {
            return (f64::NAN, f64::NAN);
        }
        let v = yt - a[0];
        ss += v * v / f;
        sum_log_f += f.ln();
        // K = T P e1 / F
        let mut k = [0.0; DIM];
        for i in 0..m {
            k[i] = (0..m).map(|j| t[i][j] * p[j][0]).sum::<f64>() / f;
        }
        let mut next = [0.0; DIM];
        for i in 0..m {
            next[i] = k[i] * v + (0..m).map(|j| t[i][j] * a[j]).sum::<f64>();
        }
        a = next;
        // P = T P Tᵀ + R Rᵀ − K Kᵀ F
        let tp = matmul(&t, &p, m);
        let mut np = [[0.0; DIM]; DIM];
        let mut change: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let mut s = rr[i][j] - k[i] * k[j] * f;
                for l in 0..m {
                    s += tp[i][l] * t[j][l];
                }
                np[i][j] = s;
                change = change.max((s - p[i][j]).abs());
            }
        }
        p = np;
        if change < 1e-13 {
            let f = p[0][0];
            let mut k = [0.0; DIM];
            for i in 0..m {
                k[i] = (0..m).map(|j| t[i][j] * p[j][0]).sum::<f64>() / f;
            }
            steady = Some((k, f));
        }
    }
    (ss, sum_log_f)
}

/// Partial autocorrelations to polynomial coefficients (Levinson recursion).
fn pacf_to_coeffs(r: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(r.len());
    for (k, &rk) in r.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - rk * prev[k - 1 - j];
        }
        phi.push(rk);
    }
    phi
}

/// Inverse of [`pacf_to_coeffs`]; `None` when the polynomial is not stationary.
fn coeffs_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let mut cur = phi.to_vec();
    let mut r = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let rk = cur[k];
        if !(rk.abs() < 1.0) {
            return None;
        }
        r[k] = rk;
        let denom = 1.0 - rk * rk;
        cur = (0..k).map(|j| (cur[j] + rk * cur[k - 1 - j]) / denom).collect();
    }
    Some(r)
}

/// Smallest root modulus of `1 − Σ φ_i z^i` (infinite for an empty polynomial).
pub fn min_root_modulus(phi: &[f64]) -> f64 {
    let k = phi.len();
    if k == 0 || phi.iter().all(|v| *v == 0.0) {
        return f64::INFINITY;
    }
    // roots are the reciprocals of the companion matrix eigenvalues
    let m = DMatrix::from_fn(k, k, |i, j| {
        if i == 0 {
            phi[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    m.complex_eigenvalues()
        .iter()
        .map(|c| 1.0 / c.norm())
        .fold(f64::INFINITY, f64::min)
}

/// Whether `1 − Σ φ_i z^i` has all roots outside the unit circle.
pub fn is_stationary(phi: &[f64]) -> bool {
    coeffs_to_pacf(phi).is_some()
}

fn unconstrain(u: &DVector<f64>, p: usize) -> (Vec<f64>, Vec<f64>) {
    let squash = |v: f64| v.tanh().clamp(-0.9999, 0.9999);
    let r_ar: Vec<f64> = u.iter().take(p).map(|v| squash(*v)).collect();
    let r_ma: Vec<f64> = u.iter().skip(p).map(|v| squash(*v)).collect();
    let ar = pacf_to_coeffs(&r_ar);
    let ma = pacf_to_coeffs(&r_ma).into_iter().map(|v| -v).collect();
    (ar, ma)
}

fn constrain(ar: &[f64], ma: &[f64]) -> Option<DVector<f64>> {
    let r_ar = coeffs_to_pacf(ar)?;
    let neg: Vec<f64> = ma.iter().map(|v| -v).collect();
    let r_ma = coeffs_to_pacf(&neg)?;
    let v: Vec<f64> = r_ar
        .iter()
        .chain(&r_ma)
        .map(|r| r.clamp(-0.99, 0.99).atanh())
        .collect();
    Some(DVector::from_vec(v))
}

/// Two-stage regression estimate used as a starting point.
fn hannan_rissanen(y: &[f64], p: usize, q: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let long = 20.min(n / 10);
    let resid = if q > 0 {
        let (coef, _) = least_squares(y, long, |t, j| y[t - 1 - j], long)?;
        let mut e = vec![0.0; n];
        for t in long..n {
            e[t] = y[t] - (0..long).map(|j| coef[j] * y[t - 1 - j]).sum::<f64>();
        }
        e
    } else {
        vec![0.0; n]
    };
    let start = long.max(p).max(q) + if q > 0 { long } else { 0 };
    let (coef, _) = least_squares(
        y,
        p + q,
        |t, j| if j < p { y[t - 1 - j] } else { resid[t - 1 - (j - p)] },
        start,
    )?;
    Some((coef[..p].to_vec(), coef[p..].to_vec()))
}

fn least_squares(
    y: &[f64],
    k: usize,
    x: impl Fn(usize, usize) -> f64,
    start: usize,
) -> Option<(Vec<f64>, f64)> {
    if start >= y.len() || k == 0 {
        return None;
    }
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for t in start..y.len() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = x(t, j);
        }
        for i in 0..k {
            xty[i] += row[i] * y[t];
            for j in 0..k {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    let sol = xtx.cholesky()?.solve(&xty);
    Some((sol.iter().copied().collect(), 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn sample_acf(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let ck: f64 = (lag..n).map(|t| (x[t] - m) * (x[t - lag] - m)).sum();
        ck / c0
    }

    #[test]
    fn pacf_map_round_trips() {
        let r = [0.5, -0.3, 0.8];
        let phi = pacf_to_coeffs(&r);
        let back = coeffs_to_pacf(&phi).unwrap();
        for (a, b) in r.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(is_stationary(&[0.5]));
        assert!(!is_stationary(&[1.0]));
        assert!(!is_stationary(&[0.5, 0.6]));
        assert!(is_stationary(&[1.2, -0.5]));
    }

    #[test]
    fn theoretical_acf() {
        let m = ArmaModel::new(vec![0.5], vec![], 1.0, 0.0).unwrap();
        let acf = m.acf(5);
        assert_eq!(acf[3], 0.125);
        for (k, v) in acf.iter().enumerate() {
            assert!((v - 0.5f64.powi(k as i32)).abs() <= f64::EPSILON);
        }
        assert!((m.process_variance() - 1.0 / 0.75).abs() < 1e-12);

        // MA(1): ρ1 = ψ/(1+ψ²), zero beyond
        let m = ArmaModel::new(vec![], vec![0.4], 2.0, 0.0).unwrap();
        let acf = m.acf(3);
        assert!((acf[1] - 0.4 / 1.16).abs() < 1e-12);
        assert!(acf[2].abs() < 1e-12);
        assert!((m.process_variance() - 2.0 * 1.16).abs() < 1e-12);

        // ARMA(1,1): γ0 = (1 + 2φψ + ψ²)/(1 − φ²)
        let (phi, psi) = (0.6, 0.3);
        let m = ArmaModel::new(vec![phi], vec![psi], 1.0, 0.0).unwrap();
        let g0 = (1.0 + 2.0 * phi * psi + psi * psi) / (1.0 - phi * phi);
        let rho1 = (1.0 + phi * psi) * (phi + psi) / (1.0 + 2.0 * phi * psi + psi * psi);
        let acf = m.acf(2);
        assert!((m.process_variance() - g0).abs() < 1e-12);
        assert!((acf[1] - rho1).abs() < 1e-12);
        assert!((acf[2] - phi * rho1).abs() < 1e-12);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(ArmaModel::new(vec![1.1], vec![], 1.0, 0.0).is_err());
        assert!(ArmaModel::new(vec![], vec![1.5], 1.0, 0.0).is_err());
        assert!(ArmaModel::new(vec![0.1; 4], vec![], 1.0, 0.0).is_err());
    }

    #[test]
    fn likelihood_matches_dense_gaussian() {
        let m = ArmaModel::new(vec![0.7, -0.2], vec![0.4], 1.3, 0.5).unwrap();
        let y = m.simulate(60, &mut rng(1));
        let n = y.len();
        let g = m.autocovariance(n);
        let cov = DMatrix::from_fn(n, n, |i, j| g[i.abs_diff(j)]);
        let chol = cov.cholesky().unwrap();
        let d = DVector::from_iterator(n, y.iter().map(|v| v - m.mean));
        let quad = d.dot(&chol.solve(&d));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let want = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        assert!((m.log_likelihood(&y) - want).abs() < 1e-8, "{} vs {want}", m.log_likelihood(&y));
    }

    #[test]
    fn white_noise_simulation() {
        let m = ArmaModel::white_noise(1.0);
        let x = m.simulate(10_000, &mut rng(2));
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.03);
        let again = m.simulate(10_000, &mut rng(2));
        assert_eq!(x, again);
    }

    #[test]
    fn ar1_simulation_autocorrelation() {
        let m = ArmaModel::new(vec![0.5], vec![], 1.0, 0.0).unwrap();
        let x = m.simulate(10_000, &mut rng(3));
        assert!((sample_acf(&x, 1) - 0.5).abs() < 0.03);
    }

    #[test]
    fn ar1_fit_recovers_phi() {
        let m = ArmaModel::new(vec![0.8], vec![], 1.0, 0.0).unwrap();
        let x = m.simulate(5000, &mut rng(4));
        let fit = arma_fit(&x, &ArmaOptions::default()).unwrap();
        assert!(fit.model.p >= 1);
        let (one, _) = fit_order(&x.iter().map(|v| v - fit.model.mean).collect::<Vec<_>>(), 1, 0).unwrap();
        assert!((one.ar[0] - 0.8).abs() < 0.05, "{:?}", one);
        assert!(fit.candidates.len() == 16);
    }

    #[test]
    fn refit_recovers_arma22() {
        let m = ArmaModel::new(vec![0.9, -0.3], vec![0.3, 0.2], 1.0, 0.0).unwrap();
        let x = m.simulate(10_000, &mut rng(5));
        let (fit, _) = fit_order(&x, 2, 2).unwrap();
        let se = standard_errors(&fit, &x).unwrap();
        let est: Vec<f64> = fit.ar.iter().chain(&fit.ma).copied().collect();
        let truth = [0.9, -0.3, 0.3, 0.2];
        for i in 0..4 {
            assert!((est[i] - truth[i]).abs() < 3.0 * se[i], "{i}: {} vs {} (se {})", est[i], truth[i], se[i]);
        }
    }

    #[test]
    fn short_series_rejected() {
        assert!(arma_fit(&[0.0; 100], &ArmaOptions::default()).is_err());
    }
}
