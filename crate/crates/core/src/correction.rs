//! Coarse-scale correction of RCM output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::moments::{MomentModel, MomentSurface};

/// Variance floor (°C²) for the corrected variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    Corr,
    Simple,
    LocalSimple,
}

impl CorrectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionMethod::Corr => "corr",
            CorrectionMethod::Simple => "simple",
            CorrectionMethod::LocalSimple => "local_simple",
        }
    }
}

/// Fitted moment models for the Corr method.
#[derive(Debug, Clone)]
pub struct CorrectionContext {
    pub obs_train: MomentModel,
    pub rcm_train: MomentModel,
    pub rcm_test: MomentModel,
}

#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    pub field: Field,
    /// Number of entries where the corrected variance hit [`VARIANCE_FLOOR`].
    pub floored: usize,
}

/// Corrects `raw_test` with the Corr method.
///
/// Per cell and day of the test period:
/// `μ_obs,train + (μ_rcm,test − μ_rcm,train)
///  + sqrt(max(σ²_obs,train + σ²_rcm,test − σ²_rcm,train, ε)) · (raw − μ_rcm,test)/σ_rcm,test`.
pub fn correct(raw_test: &Field, ctx: &CorrectionContext) -> Result<CorrectionOutput> {
    let year = ctx.obs_train.reference_year;
    if ctx.rcm_train.reference_year != year || ctx.rcm_test.reference_year != year {
        return Err(Error::InvalidInput(
            "moment models for correction use different reference years".into(),
        ));
    }
    let obs = ctx.obs_train.predict_on(raw_test);
    let rtr = ctx.rcm_train.predict_on(raw_test);
    let rte = ctx.rcm_test.predict_on(raw_test);
    correct_with_surfaces(raw_test, &obs, &rtr, &rte)
}

/// Formula-level Corr given the three evaluated moment surfaces.
pub fn correct_with_surfaces(
    raw_test: &Field,
    obs_train: &MomentSurface,
    rcm_train: &MomentSurface,
    rcm_test: &MomentSurface,
) -> Result<CorrectionOutput> {
    for s in [obs_train, rcm_train, rcm_test] {
        if s.n_cells != raw_test.n_cells() || s.n_days != raw_test.n_days() {
            return Err(Error::Dimension(format!(
                "moment surface is {}×{}, field is {}×{}",
                s.n_cells,
                s.n_days,
                raw_test.n_cells(),
                raw_test.n_days()
            )));
        }
    }
    let mut floored = 0usize;
    let field = raw_test.map(|c, t, raw| {
        let k = c * raw_test.n_days() + t;
        let mu = obs_train.mu[k] + (rcm_test.mu[k] - rcm_train.mu[k]);
        let mut var = obs_train.sigma[k].powi(2) + rcm_test.sigma[k].powi(2)
            - rcm_train.sigma[k].powi(2);
        if var < VARIANCE_FLOOR {
            var = VARIANCE_FLOOR;
            floored += 1;
        }
        mu + var.sqrt() * (raw - rcm_test.mu[k]) / rcm_test.sigma[k]
    })?;
    let total = field.values().len();
    if floored * 100 > total {
        tracing::warn!(
            floored,
            total,
            "variance floor applied to more than 1% of entries; RCM and observation models may be incompatible"
        );
    }
    Ok(CorrectionOutput { field, floored })
}

/// Shifts `raw_test` by one domain-wide constant: mean(obs_train) − mean(rcm_train).
pub fn simple_correct(raw_test: &Field, obs_train: &Field, rcm_train: &Field) -> Result<Field> {
    obs_train.check_aligned(rcm_train)?;
    check_cells(raw_test, obs_train)?;
    let shift = obs_train.mean() - rcm_train.mean();
    raw_test.map(|_, _, v| v + shift)
}

/// Per-cell version of [`simple_correct`].
pub fn local_simple_correct(
    raw_test: &Field,
    obs_train: &Field,
    rcm_train: &Field,
) -> Result<Field> {
    obs_train.check_aligned(rcm_train)?;
    check_cells(raw_test, obs_train)?;
    let n = obs_train.n_days() as f64;
    let shifts: Vec<f64> = (0..obs_train.n_cells())
        .map(|c| {
            obs_train.series(c).iter().sum::<f64>() / n
                - rcm_train.series(c).iter().sum::<f64>() / n
        })
        .collect();
    raw_test.map(|c, _, v| v + shifts[c])
}

fn check_cells(a: &Field, b: &Field) -> Result<()> {
    if a.grid().ids() != b.grid().ids() {
        return Err(Error::Dimension(
            "test and training fields are on different grids".into(),
        ));
    }
    Ok(())
}
