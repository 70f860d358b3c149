//! Moving fields between the coarse and the fine grid.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{GridSpec, OverlapMap};

/// Area-weighted average of the fine cells overlapping each coarse cell.
pub fn upscale(fine: &Field, coarse_grid: Arc<GridSpec>, overlap: &OverlapMap) -> Result<Field> {
    if overlap.members.len() != coarse_grid.len() {
        return Err(Error::Dimension(format!(
            "overlap map has {} coarse cells, grid has {}",
            overlap.members.len(),
            coarse_grid.len()
        )));
    }
    if overlap.major.len() != fine.n_cells() {
        return Err(Error::Dimension(format!(
            "overlap map has {} fine cells, field has {}",
            overlap.major.len(),
            fine.n_cells()
        )));
    }
    let empty: Vec<i64> = overlap
        .members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.iter().map(|p| p.1).sum::<f64>() <= 0.0)
        .map(|(ci, _)| coarse_grid.cell(ci).cell_id)
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyOverlap(empty));
    }

    let n_days = fine.n_days();
    let mut series = Vec::with_capacity(coarse_grid.len());
    for members in &overlap.members {
        let total: f64 = members.iter().map(|p| p.1).sum();
        let mut acc = vec![0.0; n_days];
        for &(fi, area) in members {
            for (a, x) in acc.iter_mut().zip(fine.series(fi)) {
                *a += area * x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        series.push(acc);
    }
    Field::from_series(coarse_grid, fine.dates().to_vec(), series)
}

/// Index of the coarse cell whose center is nearest to each fine cell center.
/// Ties go to the lowest coarse cell id.
pub fn nearest_assignment(coarse: &GridSpec, fine: &GridSpec) -> Result<Vec<usize>> {
    if coarse.is_empty() {
        return Err(Error::Grid("empty coarse grid".into()));
    }
    Ok(fine
        .cells()
        .iter()
        .map(|f| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in coarse.cells().iter().enumerate() {
                let d = f.distance_km(c);
                if d < best_d || (d == best_d && c.cell_id < coarse.cell(best).cell_id) {
                    best = ci;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

pub fn nearest_neighbor_regrid(coarse: &Field, fine_grid: Arc<GridSpec>) -> Result<Field> {
    let assign = nearest_assignment(coarse.grid(), &fine_grid)?;
    let series = assign.iter().map(|&c| coarse.series(c).to_vec()).collect();
    Field::from_series(fine_grid, coarse.dates().to_vec(), series)
}
