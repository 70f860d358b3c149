//! Small unconstrained optimizers: BFGS for smooth multivariate objectives
//! and Brent's method for one-dimensional profiles.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative change in the objective falls below this.
    pub rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns the objective and its gradient.
///
/// `inv_hessian` seeds the inverse-Hessian approximation; the identity is used
/// when `None`. Non-finite objective values are treated as +∞ by the line search.
pub fn bfgs(
    mut f: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    x0: DVector<f64>,
    inv_hessian: Option<DMatrix<f64>>,
    opts: &BfgsOptions,
) -> BfgsResult {
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h = inv_hessian.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut iterations = 0;
    let mut converged = g.amax() < opts.grad_tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Lost descent; restart from steepest descent.
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }

        // Backtracking with the Armijo condition.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + step * &dir;
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        let rel = (fx - fn_).abs() / fx.abs().max(1e-300);
        x = xn;
        fx = fn_;
        g = gn;

        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= rho * (&hy * s.transpose() + &s * hy.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }

        if g.amax() < opts.grad_tol || rel < opts.rel_tol {
            converged = true;
        }
    }

    BfgsResult {
        grad_norm: g.amax(),
        x,
        value: fx,
        iterations,
        converged,
    }
}

/// Central-difference gradient.
pub fn numeric_gradient(f: &mut impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Brent's method for a minimum of `f` on `[a, b]`. Returns `(x, f(x))`.
pub fn brent_min(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let rosen = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (v, g)
        };
        let opts = BfgsOptions {
            rel_tol: 0.0,
            grad_tol: 1e-9,
            max_iter: 1000,
        };
        let r = bfgs(rosen, DVector::from_vec(vec![-1.2, 1.0]), None, &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let (x, fx) = brent_min(|x| (x - 0.3).powi(2) + 2.0, -5.0, 7.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((fx - 2.0).abs() < 1e-14);
        let (x, _) = brent_min(|x| x.cos(), 2.0, 4.0, 1e-10);
        // flat minimum: function values pin x down to about sqrt(eps)·|x|
        let err = (x - std::f64::consts::PI).abs();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1];
        let g = numeric_gradient(&mut f, &DVector::from_vec(vec![1.0, 2.0]));
        assert!((g[0] - 8.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }
}
