//! Empirical quantile mapping per fine cell and calendar month.
//!
//! For every cell-month the empirical quantiles of the regridded RCM sample
//! (source) and the observations (target) are taken at a fixed probability
//! grid. The transfer function is the monotone piecewise-cubic Hermite
//! interpolant through the (source, target) pairs, continued linearly with the
//! end-segment slopes outside the trained range.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::month;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::io::write_atomic;

pub const DEFAULT_KNOT_STEP: f64 = 0.001;
pub const MIN_DAYS: usize = 100;
const MAGIC: &[u8; 8] = b"SGEQM\x001\x00";

/// Probability knots `step, 2·step, ...` strictly inside (0, 1).
pub fn knot_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 0.5) {
        return Err(Error::InvalidInput(format!("knot step {step} must lie in (0, 0.5)")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((1..n)
        .map(|k| k as f64 * step)
        .filter(|p| *p > 0.0 && *p < 1.0)
        .collect())
}

/// Linear interpolation between order statistics: position `(n−1)p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monotone cubic Hermite interpolant with linear extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneSpline {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
}

impl MonotoneSpline {
    /// `x` strictly increasing, `y` nondecreasing.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::InvalidInput("spline needs matching, non-empty knots".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("spline abscissae must be strictly increasing".into()));
        }
        let d = pchip_slopes(&x, &y);
        Ok(Self { x, y, d })
    }

    /// Builds the map through (source, target) quantile pairs. Runs of equal
    /// source values collapse to one knot carrying the mean target.
    pub fn from_quantiles(source: &[f64], target: &[f64]) -> Result<Self> {
        let mut x: Vec<f64> = Vec::with_capacity(source.len());
        let mut y: Vec<f64> = Vec::with_capacity(source.len());
        let mut i = 0;
        while i < source.len() {
            let mut j = i;
            while j + 1 < source.len() && source[j + 1] == source[i] {
                j += 1;
            }
            let mean = target[i..=j].iter().sum::<f64>() / (j - i + 1) as f64;
            x.push(source[i]);
            y.push(mean);
            i = j + 1;
        }
        Self::new(x, y)
    }

    pub fn eval(&self, v: f64) -> f64 {
        let n = self.x.len();
        if n == 1 {
            return self.y[0] + (v - self.x[0]);
        }
        if v <= self.x[0] {
            let s = (self.y[1] - self.y[0]) / (self.x[1] - self.x[0]);
            return self.y[0] + s * (v - self.x[0]);
        }
        if v >= self.x[n - 1] {
            let s = (self.y[n - 1] - self.y[n - 2]) / (self.x[n - 1] - self.x[n - 2]);
            return self.y[n - 1] + s * (v - self.x[n - 1]);
        }
        let k = self.x.partition_point(|x| *x <= v) - 1;
        let h = self.x[k + 1] - self.x[k];
        let t = (v - self.x[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

/// Fritsch–Carlson derivatives with the shape-preserving three-point end rule.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![1.0];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| -> f64 {
        let mut d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() || m0 == 0.0 {
            d = 0.0;
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            d = 3.0 * m0;
        }
        d
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Transfer functions for every fine cell and calendar month.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTable {
    pub knot_step: f64,
    pub knots: Vec<f64>,
    pub grid_hash: String,
    pub cell_ids: Vec<i64>,
    /// Index `cell * 12 + (month − 1)`.
    pub maps: Vec<MonotoneSpline>,
}

/// Empirical quantiles of both samples at `knots` and the spline through them.
pub fn cell_month_transfer(obs: &[f64], rcm: &[f64], knots: &[f64]) -> Result<MonotoneSpline> {
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (so, sr) = (sort(obs), sort(rcm));
    let target: Vec<f64> = knots.iter().map(|p| quantile_sorted(&so, *p)).collect();
    let source: Vec<f64> = knots.iter().map(|p| quantile_sorted(&sr, *p)).collect();
    MonotoneSpline::from_quantiles(&source, &target)
}

/// Trains transfer functions from fine observations and regridded RCM output
/// over the same training period.
pub fn eqm_train(obs_fine: &Field, rcm_regridded: &Field, knot_step: f64) -> Result<TransferTable> {
    obs_fine.check_aligned(rcm_regridded)?;
    let knots = knot_grid(knot_step)?;
    let months: Vec<u8> = obs_fine.dates().iter().map(|d| month(*d)).collect();
    let by_month: Vec<Vec<usize>> = (1..=12u8)
        .map(|m| (0..months.len()).filter(|&t| months[t] == m).collect())
        .collect();
    let maps = (0..obs_fine.n_cells() * 12)
        .into_par_iter()
        .map(|k| {
            let (c, m) = (k / 12, k % 12);
            let days = &by_month[m];
            if days.len() < MIN_DAYS {
                return Err(Error::InvalidInput(format!(
                    "cell {} month {} has {} days; quantile mapping needs at least {MIN_DAYS}",
                    obs_fine.grid().cell(c).cell_id,
                    m + 1,
                    days.len()
                )));
            }
            let o: Vec<f64> = days.iter().map(|&t| obs_fine.get(c, t)).collect();
            let r: Vec<f64> = days.iter().map(|&t| rcm_regridded.get(c, t)).collect();
            cell_month_transfer(&o, &r, &knots)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferTable {
        knot_step,
        knots,
        grid_hash: obs_fine.grid().hash(),
        cell_ids: obs_fine.grid().ids(),
        maps,
    })
}

/// Maps every value through its cell-month transfer function.
pub fn eqm_apply(table: &TransferTable, rcm: &Field) -> Result<Field> {
    if rcm.grid().hash() != table.grid_hash {
        return Err(Error::Grid(
            "quantile mapping table was trained on a different grid".into(),
        ));
    }
    let months: Vec<u8> = rcm.dates().iter().map(|d| month(*d)).collect();
    rcm.map(|c, t, v| table.maps[c * 12 + months[t] as usize - 1].eval(v))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    grid_hash: String,
    knot_step: f64,
    knots: Vec<f64>,
    cell_ids: Vec<i64>,
    months: usize,
    /// Knots kept per cell-month after collapsing ties.
    lengths: Vec<usize>,
}

impl TransferTable {
    /// Binary layout: 8-byte magic, u64 header length, JSON header, then for
    /// each cell-month the knot abscissae and ordinates as little-endian f64.
    /// Slopes are rebuilt on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            grid_hash: self.grid_hash.clone(),
            knot_step: self.knot_step,
            knots: self.knots.clone(),
            cell_ids: self.cell_ids.clone(),
            months: 12,
            lengths: self.maps.iter().map(|m| m.x.len()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        write_atomic(path, |w| {
            let io = |e| Error::io(path, e);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&json).map_err(io)?;
            for m in &self.maps {
                for v in m.x.iter().chain(&m.y) {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Ingest {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a quantile mapping table"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
        if header.lengths.len() != header.cell_ids.len() * header.months {
            return Err(bad("header lengths do not match cells × months"));
        }
        let mut data = bytes[16 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut maps = Vec::with_capacity(header.lengths.len());
        for &n in &header.lengths {
            let mut take = || -> Result<Vec<f64>> {
                let v: Vec<f64> = data.by_ref().take(n).collect();
                if v.len() != n {
                    return Err(bad("truncated data"));
                }
                Ok(v)
            };
            let (x, y) = (take()?, take()?);
            maps.push(MonotoneSpline::new(x, y).map_err(|e| bad(&e.to_string()))?);
        }
        if data.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(Self {
            knot_step: header.knot_step,
            knots: header.knots,
            grid_hash: header.grid_hash,
            cell_ids: header.cell_ids,
            maps,
        })
    }
}
