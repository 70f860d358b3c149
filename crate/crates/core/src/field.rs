//! Daily temperature fields on a grid.

use std::sync::Arc;

use chrono::NaiveDate;

use crate::calendar::{CalendarIndex, Period};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// A (cells × days) matrix of daily mean temperatures. Storage is cell-major,
/// so each cell's time series is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<GridSpec>,
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<GridSpec>, dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * dates.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} cells × {} days",
                values.len(),
                grid.len(),
                dates.len()
            )));
        }
        check_daily(&dates)?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (c, t) = (k / dates.len(), k % dates.len());
            return Err(Error::InvalidInput(format!(
                "non-finite value at cell {}, day {} ({})",
                grid.cell(c).cell_id,
                t + 1,
                dates[t]
            )));
        }
        Ok(Self {
            grid,
            dates,
            values,
        })
    }

    pub fn from_fn(
        grid: Arc<GridSpec>,
        dates: Vec<NaiveDate>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let n_days = dates.len();
        let values = (0..grid.len() * n_days)
            .map(|k| f(k / n_days, k % n_days))
            .collect();
        Self::new(grid, dates, values)
    }

    pub fn constant(grid: Arc<GridSpec>, dates: Vec<NaiveDate>, value: f64) -> Result<Self> {
        let n = grid.len() * dates.len();
        Self::new(grid, dates, vec![value; n])
    }

    /// Builds a field from per-cell series, one `Vec` per cell.
    pub fn from_series(
        grid: Arc<GridSpec>,
        dates: Vec<NaiveDate>,
        series: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if series.len() != grid.len() || series.iter().any(|s| s.len() != dates.len()) {
            return Err(Error::Dimension(
                "series count or lengths do not match the grid and time axis".into(),
            ));
        }
        Self::new(grid, dates, series.concat())
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_cells(&self) -> usize {
        self.grid.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn get(&self, cell: usize, day: usize) -> f64 {
        self.values[cell * self.dates.len() + day]
    }

    pub fn series(&self, cell: usize) -> &[f64] {
        let n = self.dates.len();
        &self.values[cell * n..(cell + 1) * n]
    }

    pub fn day_values(&self, day: usize) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.get(c, day)).collect()
    }

    pub fn calendar(&self, reference_year: i32) -> CalendarIndex {
        CalendarIndex::new(&self.dates, reference_year)
    }

    /// Mean over cells for every day.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let n_days = self.n_days();
        let mut out = vec![0.0; n_days];
        for c in 0..self.n_cells() {
            for (o, v) in out.iter_mut().zip(self.series(c)) {
                *o += v;
            }
        }
        let s = self.n_cells() as f64;
        out.iter_mut().for_each(|o| *o /= s);
        out
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Elementwise map `(cell, day, value) -> value` onto the same grid and dates.
    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let n = self.n_days();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / n, k % n, v))
            .collect();
        Self::new(self.grid.clone(), self.dates.clone(), values)
    }

    pub fn check_aligned(&self, other: &Field) -> Result<()> {
        if self.grid.ids() != other.grid.ids() {
            return Err(Error::Dimension("fields are on different grids".into()));
        }
        if self.dates != other.dates {
            return Err(Error::Dimension("fields cover different dates".into()));
        }
        Ok(())
    }

    pub fn select_period(&self, period: &Period) -> Result<Self> {
        let first = self.dates.iter().position(|d| period.contains(*d));
        let last = self.dates.iter().rposition(|d| period.contains(*d));
        let (Some(a), Some(b)) = (first, last) else {
            return Err(Error::InvalidInput(format!(
                "field has no dates in {} – {}",
                period.start, period.end
            )));
        };
        let n = self.n_days();
        let mut values = Vec::with_capacity(self.n_cells() * (b - a + 1));
        for c in 0..self.n_cells() {
            values.extend_from_slice(&self.values[c * n + a..=c * n + b]);
        }
        Self::new(self.grid.clone(), self.dates[a..=b].to_vec(), values)
    }

    /// Restricts to the cells at `indices`; `grid` must list those cells in order.
    pub fn select_cells(&self, indices: &[usize], grid: Arc<GridSpec>) -> Result<Self> {
        let series = indices.iter().map(|&c| self.series(c).to_vec()).collect();
        Self::from_series(grid, self.dates.clone(), series)
    }
}

pub(crate) fn check_daily(dates: &[NaiveDate]) -> Result<()> {
    for (k, w) in dates.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::InvalidInput(format!(
                "non-monotone time axis at record {} ({} after {})",
                k + 2,
                w[1],
                w[0]
            )));
        }
        if (w[1] - w[0]).num_days() != 1 {
            return Err(Error::InvalidInput(format!(
                "time axis is not daily at record {} ({} after {})",
                k + 2,
                w[1],
                w[0]
            )));
        }
    }
    Ok(())
}
