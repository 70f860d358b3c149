//! Grid geometry: cells, covariates and coarse/fine overlap bookkeeping.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One grid cell: an axis-aligned rectangle in projected km plus the
/// geographic covariates used by the moment model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: i64,
    pub easting_km: f64,
    pub northing_km: f64,
    pub width_km: f64,
    pub height_km: f64,
    pub lat: f64,
    pub lon: f64,
    pub elev_m: f64,
}

impl Cell {
    pub fn area(&self) -> f64 {
        self.width_km * self.height_km
    }

    pub fn covariates(&self) -> [f64; 3] {
        [self.lat, self.lon, self.elev_m]
    }

    fn x_range(&self) -> (f64, f64) {
        let half = 0.5 * self.width_km;
        (self.easting_km - half, self.easting_km + half)
    }

    fn y_range(&self) -> (f64, f64) {
        let half = 0.5 * self.height_km;
        (self.northing_km - half, self.northing_km + half)
    }

    /// Area of the intersection of the two cell rectangles.
    pub fn intersection_area(&self, other: &Cell) -> f64 {
        let (ax0, ax1) = self.x_range();
        let (bx0, bx1) = other.x_range();
        let (ay0, ay1) = self.y_range();
        let (by0, by1) = other.y_range();
        let w = ax1.min(bx1) - ax0.max(bx0);
        let h = ay1.min(by1) - ay0.max(by0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn distance_km(&self, other: &Cell) -> f64 {
        (self.easting_km - other.easting_km).hypot(self.northing_km - other.northing_km)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    cells: Vec<Cell>,
    index: HashMap<i64, usize>,
}

impl GridSpec {
    pub fn new(cells: Vec<Cell>) -> Result<Self> {
        let mut index = HashMap::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            if index.insert(c.cell_id, i).is_some() {
                return Err(Error::Grid(format!("duplicate cell id {}", c.cell_id)));
            }
            let finite = [
                c.easting_km,
                c.northing_km,
                c.width_km,
                c.height_km,
                c.lat,
                c.lon,
                c.elev_m,
            ]
            .iter()
            .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Grid(format!(
                    "cell {} has a missing or non-finite attribute",
                    c.cell_id
                )));
            }
            if c.width_km <= 0.0 || c.height_km <= 0.0 {
                return Err(Error::Grid(format!(
                    "cell {} has a degenerate polygon",
                    c.cell_id
                )));
            }
        }
        Ok(Self { cells, index })
    }

    /// A `nx` by `ny` block of square cells. Ids run row by row from `first_id`;
    /// covariates come from `covariates(easting, northing)`.
    pub fn regular(
        nx: usize,
        ny: usize,
        cell_km: f64,
        origin_km: (f64, f64),
        first_id: i64,
        covariates: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let e = origin_km.0 + (i as f64 + 0.5) * cell_km;
                let n = origin_km.1 + (j as f64 + 0.5) * cell_km;
                let (lat, lon, elev_m) = covariates(e, n);
                cells.push(Cell {
                    cell_id: first_id + (j * nx + i) as i64,
                    easting_km: e,
                    northing_km: n,
                    width_km: cell_km,
                    height_km: cell_km,
                    lat,
                    lon,
                    elev_m,
                });
            }
        }
        Self::new(cells)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &Cell {
        &self.cells[i]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn ids(&self) -> Vec<i64> {
        self.cells.iter().map(|c| c.cell_id).collect()
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Sub-grid with the cells at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.cells[i].clone()).collect())
    }

    /// Largest center-to-center distance between any two cells.
    pub fn diameter_km(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.cells.iter().enumerate() {
            for b in &self.cells[i + 1..] {
                d = d.max(a.distance_km(b));
            }
        }
        d
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cells {
            h.update(
                format!(
                    "{},{},{},{},{},{},{},{}\n",
                    c.cell_id,
                    c.easting_km,
                    c.northing_km,
                    c.width_km,
                    c.height_km,
                    c.lat,
                    c.lon,
                    c.elev_m
                )
                .as_bytes(),
            );
        }
        hex(&h.finalize())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        let expected = [
            "cell_id",
            "easting_km",
            "northing_km",
            "width_km",
            "height_km",
            "lat",
            "lon",
            "elev_m",
        ];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Ingest {
                path: path.into(),
                message: format!("grid header must be `{}`", expected.join(",")),
            });
        }
        let cells = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<Cell>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Self::new(cells)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::write_atomic(path, |w| {
            let mut wtr = csv::Writer::from_writer(w);
            for c in &self.cells {
                wtr.serialize(c).map_err(|e| Error::csv(path, e))?;
            }
            wtr.flush().map_err(|e| Error::io(path, e))?;
            Ok(())
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Area overlaps between a coarse and a fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMap {
    /// Per coarse cell index: (fine cell index, overlap area in km²).
    pub members: Vec<Vec<(usize, f64)>>,
    /// Per fine cell index: coarse cell index with the largest intersection.
    pub major: Vec<Option<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverlapRecord {
    coarse_id: i64,
    fine_id: i64,
    area_km2: f64,
}

impl OverlapMap {
    /// Exact rectangle intersections between every coarse/fine pair.
    pub fn build(coarse: &GridSpec, fine: &GridSpec) -> Self {
        let mut triples = Vec::new();
        for (ci, c) in coarse.cells().iter().enumerate() {
            for (fi, f) in fine.cells().iter().enumerate() {
                let a = c.intersection_area(f);
                if a > 0.0 {
                    triples.push((ci, fi, a));
                }
            }
        }
        Self::from_triples(coarse, fine.len(), triples)
    }

    fn from_triples(coarse: &GridSpec, n_fine: usize, triples: Vec<(usize, usize, f64)>) -> Self {
        let mut members = vec![Vec::new(); coarse.len()];
        let mut best: Vec<Option<(usize, f64)>> = vec![None; n_fine];
        for (ci, fi, a) in triples {
            members[ci].push((fi, a));
            let replace = match best[fi] {
                None => true,
                Some((bc, ba)) => {
                    a > ba || (a == ba && coarse.cell(ci).cell_id < coarse.cell(bc).cell_id)
                }
            };
            if replace {
                best[fi] = Some((ci, a));
            }
        }
        for m in &mut members {
            m.sort_by_key(|&(fi, _)| fi);
        }
        Self {
            members,
            major: best.into_iter().map(|b| b.map(|(c, _)| c)).collect(),
        }
    }

    /// Checks non-negative areas and that no coarse cell is over-covered.
    pub fn validate(&self, coarse: &GridSpec) -> Result<()> {
        for (ci, m) in self.members.iter().enumerate() {
            let total: f64 = m.iter().map(|&(_, a)| a).sum();
            if m.iter().any(|&(_, a)| a < 0.0 || !a.is_finite()) {
                return Err(Error::Grid(format!(
                    "negative overlap area for coarse cell {}",
                    coarse.cell(ci).cell_id
                )));
            }
            let area = coarse.cell(ci).area();
            if total > area * (1.0 + 1e-9) {
                return Err(Error::Grid(format!(
                    "overlaps of coarse cell {} sum to {total} > cell area {area}",
                    coarse.cell(ci).cell_id
                )));
            }
        }
        Ok(())
    }

    /// Fine cell indices whose largest-intersection coarse cell is one of `coarse_ids`.
    pub fn fine_cells_within(&self, coarse: &GridSpec, coarse_ids: &[i64]) -> Result<Vec<usize>> {
        let wanted: HashSet<usize> = coarse_ids
            .iter()
            .map(|id| {
                coarse
                    .index_of(*id)
                    .ok_or_else(|| Error::Grid(format!("unknown coarse cell id {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .major
            .iter()
            .enumerate()
            .filter_map(|(fi, c)| c.filter(|c| wanted.contains(c)).map(|_| fi))
            .collect())
    }

    /// Restricts the map to the fine cells at `fine_indices` (renumbered in order).
    pub fn restrict_fine(&self, coarse: &GridSpec, fine_indices: &[usize]) -> Self {
        let remap: HashMap<usize, usize> = fine_indices
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let triples = self
            .members
            .iter()
            .enumerate()
            .flat_map(|(ci, m)| {
                let remap = &remap;
                m.iter()
                    .filter_map(move |&(fi, a)| remap.get(&fi).map(|&nf| (ci, nf, a)))
            })
            .collect();
        Self::from_triples(coarse, fine_indices.len(), triples)
    }

    pub fn read_csv(path: impl AsRef<Path>, coarse: &GridSpec, fine: &GridSpec) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut triples = Vec::new();
        for rec in rdr.deserialize::<OverlapRecord>() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let ci = coarse.index_of(rec.coarse_id).ok_or_else(|| Error::Ingest {
                path: path.into(),
                message: format!("unknown coarse id {}", rec.coarse_id),
            })?;
            let fi = fine.index_of(rec.fine_id).ok_or_else(|| Error::Ingest {
                path: path.into(),
                message: format!("unknown fine id {}", rec.fine_id),
            })?;
            triples.push((ci, fi, rec.area_km2));
        }
        let map = Self::from_triples(coarse, fine.len(), triples);
        map.validate(coarse)?;
        Ok(map)
    }

    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        coarse: &GridSpec,
        fine: &GridSpec,
    ) -> Result<()> {
        let path = path.as_ref();
        crate::io::write_atomic(path, |w| {
            let mut wtr = csv::Writer::from_writer(w);
            for (ci, m) in self.members.iter().enumerate() {
                for &(fi, a) in m {
                    wtr.serialize(OverlapRecord {
                        coarse_id: coarse.cell(ci).cell_id,
                        fine_id: fine.cell(fi).cell_id,
                        area_km2: a,
                    })
                    .map_err(|e| Error::csv(path, e))?;
                }
            }
            wtr.flush().map_err(|e| Error::io(path, e))?;
            Ok(())
        })
    }
}
