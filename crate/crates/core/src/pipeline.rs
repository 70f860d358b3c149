//! Config-driven stages from raw fields to the evaluation report.
//!
//! Every stage reads its inputs from the configured files or from the
//! artifacts of earlier stages under `output_dir`, and writes its own
//! artifacts atomically next to a `<artifact>.prov.json` sidecar holding the
//! config hash, the seed and the hashes of the inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::Period;
use crate::correction::{correct, CorrectionContext};
use crate::downscale::{largest_intersection, Baseline, Signal, Variant};
use crate::eqm::{eqm_apply, eqm_train, knot_grid, DEFAULT_KNOT_STEP};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_catchment, EvalOptions, EvalReport, DEFAULT_BOOTSTRAP, DEFAULT_MAX_LAG};
use crate::field::Field;
use crate::grid::{GridSpec, OverlapMap};
use crate::io::{field_hash, hash_json, load_field, read_json, save_field, sha256_hex, write_json};
use crate::moments::{fit, standardize, FitOptions, MomentModel};
use crate::regrid::{nearest_neighbor_regrid, upscale};
use crate::residual::arma::{ArmaOptions, MAX_ORDER};
use crate::residual::{fit_residual_model, simulate_residuals, ResidualModel, ResidualOptions};
use crate::rng::{substream, Stream};
use crate::synth::{generate_world, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthWorld,
    Upscale,
    FitMoments,
    BiasCorrect,
    FitResiduals,
    Downscale,
    Eqm,
    Evaluate,
    /// Every stage in order; `synth-world` only with a `[synth]` section.
    Run,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::SynthWorld,
        Stage::Upscale,
        Stage::FitMoments,
        Stage::BiasCorrect,
        Stage::FitResiduals,
        Stage::Downscale,
        Stage::Eqm,
        Stage::Evaluate,
        Stage::Run,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthWorld => "synth-world",
            Stage::Upscale => "upscale",
            Stage::FitMoments => "fit-moments",
            Stage::BiasCorrect => "bias-correct",
            Stage::FitResiduals => "fit-residuals",
            Stage::Downscale => "downscale",
            Stage::Eqm => "eqm",
            Stage::Evaluate => "evaluate",
            Stage::Run => "run",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Method names accepted in `evaluation.methods`.
pub const METHODS: [&str; 5] = ["xstar", "trend", "trendvar", "eqm", "raw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Periods {
    pub train: [NaiveDate; 2],
    pub test: [NaiveDate; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub coarse_grid: Option<PathBuf>,
    pub fine_grid: Option<PathBuf>,
    pub overlap: Option<PathBuf>,
    pub obs_fine: Option<PathBuf>,
    pub rcm_coarse: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatchmentConfig {
    pub name: String,
    pub coarse_ids: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSection {
    pub gaussian_marginals: bool,
    pub window: u16,
    pub max_p: usize,
    pub max_q: usize,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self {
            gaussian_marginals: false,
            window: 7,
            max_p: MAX_ORDER,
            max_q: MAX_ORDER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub methods: Vec<String>,
    pub bootstrap: usize,
    pub max_lag: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            methods: METHODS.iter().map(|m| m.to_string()).collect(),
            bootstrap: DEFAULT_BOOTSTRAP,
            max_lag: DEFAULT_MAX_LAG,
        }
    }
}

fn default_knot_step() -> f64 {
    DEFAULT_KNOT_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Variant written by `downscale`; all three when unset.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default = "default_knot_step")]
    pub knot_step: f64,
    /// Defaults to the first training year.
    #[serde(default)]
    pub reference_year: Option<i32>,
    pub periods: Periods,
    #[serde(default)]
    pub inputs: Inputs,
    /// Synthetic world written by `synth-world`; its seed is the master seed.
    #[serde(default)]
    pub synth: Option<WorldSpec>,
    pub catchments: Vec<CatchmentConfig>,
    #[serde(default)]
    pub residual: ResidualSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl PipelineConfig {
    /// Reads a TOML config; relative paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        for p in [
            &mut cfg.inputs.coarse_grid,
            &mut cfg.inputs.fine_grid,
            &mut cfg.inputs.overlap,
            &mut cfg.inputs.obs_fine,
            &mut cfg.inputs.rcm_coarse,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn train(&self) -> Result<Period> {
        Period::new(self.periods.train[0], self.periods.train[1])
    }

    pub fn test(&self) -> Result<Period> {
        Period::new(self.periods.test[0], self.periods.test[1])
    }

    pub fn reference_year(&self) -> i32 {
        use chrono::Datelike;
        self.reference_year.unwrap_or(self.periods.train[0].year())
    }

    pub fn validate(&self) -> Result<()> {
        let (train, test) = (self.train()?, self.test()?);
        if train.overlaps(&test) {
            return Err(Error::Config("training and test periods overlap".into()));
        }
        if self.catchments.is_empty() {
            return Err(Error::Config("at least one catchment is required".into()));
        }
        let mut names: Vec<&str> = self.catchments.iter().map(|c| c.name.as_str()).collect();
        for n in &names {
            if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "catchment name {n:?} must be non-empty and use letters, digits, '_' or '-'"
                )));
            }
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("catchment names must be unique".into()));
        }
        if self.catchments.iter().any(|c| c.coarse_ids.is_empty()) {
            return Err(Error::Config("every catchment needs coarse cell ids".into()));
        }
        knot_grid(self.knot_step).map_err(|e| Error::Config(e.to_string()))?;
        for m in &self.evaluation.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "unknown method {m:?}; expected one of {}",
                    METHODS.join(", ")
                )));
            }
        }
        if let Some(v) = self.variant {
            if let Some(m) = self
                .evaluation
                .methods
                .iter()
                .find(|m| Variant::ALL.iter().any(|a| a.name() == m.as_str()) && m.as_str() != v.name())
            {
                return Err(Error::Config(format!(
                    "method {m:?} is evaluated but only variant {v} is downscaled"
                )));
            }
        }
        if self.evaluation.bootstrap == 0 || self.evaluation.max_lag == 0 {
            return Err(Error::Config("bootstrap count and max lag must be positive".into()));
        }
        if let Some(w) = &self.synth {
            w.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        }
        Ok(())
    }

    /// Hash of everything but the output directory.
    pub fn hash(&self) -> String {
        hash_json(&PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        })
    }

    pub fn variants(&self) -> Vec<Variant> {
        match self.variant {
            Some(v) => vec![v],
            None => Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn prov_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}

/// Runtime view of one catchment on the fine grid.
struct Catchment {
    name: String,
    index: u64,
    fine_indices: Vec<usize>,
    grid: Arc<GridSpec>,
}

struct Grids {
    coarse: Arc<GridSpec>,
    fine: Arc<GridSpec>,
    overlap: OverlapMap,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    config_hash: String,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash();
        let root = cfg.output_dir.clone();
        Ok(Self {
            cfg,
            config_hash,
            root,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn output_dir(&self) -> &Path {
        &self.root
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let _span = tracing::info_span!("stage", name = stage.name()).entered();
        tracing::info!("starting");
        match stage {
            Stage::SynthWorld => self.synth_world()?,
            Stage::Upscale => self.upscale()?,
            Stage::FitMoments => self.fit_moments()?,
            Stage::BiasCorrect => self.bias_correct()?,
            Stage::FitResiduals => self.fit_residuals()?,
            Stage::Downscale => self.downscale()?,
            Stage::Eqm => self.eqm()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Run => {
                let first = if self.cfg.synth.is_some() { 0 } else { 1 };
                for s in &Stage::ALL[first..Stage::ALL.len() - 1] {
                    self.run_stage(*s)?;
                }
            }
        }
        tracing::info!("done");
        Ok(())
    }

    // ---- paths ----

    fn world_path(&self, name: &str) -> PathBuf {
        self.root.join("world").join(name)
    }

    pub fn obs_coarse_path(&self) -> PathBuf {
        self.root.join("upscale").join("obs_coarse.bin")
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.root.join("moments").join(format!("{name}.json"))
    }

    pub fn corrected_path(&self) -> PathBuf {
        self.root.join("correct").join("rcm_corr_test.bin")
    }

    fn corrected_model_path(&self) -> PathBuf {
        self.root.join("correct").join("corr_test_model.json")
    }

    pub fn residual_path(&self, catchment: &str) -> PathBuf {
        self.root.join("residuals").join(format!("{catchment}.json"))
    }

    pub fn downscaled_path(&self, catchment: &str, variant: Variant) -> PathBuf {
        self.root
            .join("downscale")
            .join(format!("{catchment}_{}.bin", variant.name()))
    }

    pub fn eqm_table_path(&self, catchment: &str) -> PathBuf {
        self.root.join("eqm").join(format!("{catchment}_table.bin"))
    }

    pub fn eqm_output_path(&self, catchment: &str) -> PathBuf {
        self.root.join("eqm").join(format!("{catchment}_test.bin"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("evaluate").join("report.json")
    }

    fn input_path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.world_path(default))
    }

    /// Fails with the stage that produces `path` when it is missing.
    fn require(&self, path: &Path, stage: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                stage,
                path: path.to_path_buf(),
            })
        }
    }

    fn require_input(&self, given: &Option<PathBuf>, path: &Path) -> Result<()> {
        match given {
            Some(_) if !path.exists() => Err(Error::Config(format!(
                "input file {} does not exist",
                path.display()
            ))),
            Some(_) => Ok(()),
            None => self.require(path, "synth-world"),
        }
    }

    fn provenance(
        &self,
        stage: Stage,
        artifact: &Path,
        inputs: &[(&str, &str)],
        details: serde_json::Value,
    ) -> Result<()> {
        let p = Provenance {
            stage: stage.name().to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            artifact_sha256: file_sha(artifact)?,
            inputs: inputs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            details,
        };
        write_json(prov_path(artifact), &p)
    }

    // ---- inputs ----

    fn grids(&self) -> Result<Grids> {
        let i = &self.cfg.inputs;
        let cp = self.input_path(&i.coarse_grid, "coarse_grid.csv");
        let fp = self.input_path(&i.fine_grid, "fine_grid.csv");
        self.require_input(&i.coarse_grid, &cp)?;
        self.require_input(&i.fine_grid, &fp)?;
        let coarse = Arc::new(GridSpec::read_csv(&cp)?);
        let fine = Arc::new(GridSpec::read_csv(&fp)?);
        let overlap = match &i.overlap {
            Some(p) => {
                self.require_input(&i.overlap, p)?;
                OverlapMap::read_csv(p, &coarse, &fine)?
            }
            None => OverlapMap::build(&coarse, &fine),
        };
        overlap.validate(&coarse)?;
        Ok(Grids {
            coarse,
            fine,
            overlap,
        })
    }

    fn obs_fine_path(&self) -> PathBuf {
        self.input_path(&self.cfg.inputs.obs_fine, "obs_fine.bin")
    }

    fn rcm_path(&self) -> PathBuf {
        self.input_path(&self.cfg.inputs.rcm_coarse, "rcm_coarse.bin")
    }

    fn obs_fine(&self, g: &Grids) -> Result<Field> {
        let p = self.obs_fine_path();
        self.require_input(&self.cfg.inputs.obs_fine, &p)?;
        load_field(&p, g.fine.clone())
    }

    fn rcm_coarse(&self, g: &Grids) -> Result<Field> {
        let p = self.rcm_path();
        self.require_input(&self.cfg.inputs.rcm_coarse, &p)?;
        load_field(&p, g.coarse.clone())
    }

    fn catchments(&self, g: &Grids) -> Result<Vec<Catchment>> {
        self.cfg
            .catchments
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let fine_indices = g.overlap.fine_cells_within(&g.coarse, &c.coarse_ids)?;
                if fine_indices.is_empty() {
                    return Err(Error::Config(format!("catchment {} has no fine cells", c.name)));
                }
                let grid = Arc::new(g.fine.subset(&fine_indices)?);
                Ok(Catchment {
                    name: c.name.clone(),
                    index: k as u64,
                    fine_indices,
                    grid,
                })
            })
            .collect()
    }

    fn load_model(&self, path: &Path, stage: &'static str) -> Result<MomentModel> {
        self.require(path, stage)?;
        read_json(path)
    }

    fn fit_model(&self, field: &Field, what: &str) -> Result<MomentModel> {
        let f = fit(field, self.cfg.reference_year(), &FitOptions::default())?;
        tracing::info!(
            model = what,
            iterations = f.iterations,
            log_likelihood = f.log_likelihood,
            "moment model fitted"
        );
        Ok(f.model)
    }

    fn save_model(&self, stage: Stage, name: &str, model: &MomentModel, inputs: &[(&str, &str)]) -> Result<()> {
        let p = self.model_path(name);
        write_json(&p, model)?;
        self.provenance(stage, &p, inputs, serde_json::json!({ "model": name }))
    }

    // ---- stages ----

    fn synth_world(&self) -> Result<()> {
        let spec = self
            .cfg
            .synth
            .clone()
            .ok_or_else(|| Error::Config("synth-world needs a [synth] section".into()))?;
        let spec = WorldSpec {
            seed: self.cfg.seed,
            ..spec
        };
        let w = generate_world(&spec)?;
        let stage = Stage::SynthWorld;
        let details = serde_json::json!({
            "fine_cells": w.fine.len(),
            "coarse_cells": w.coarse.len(),
            "days": w.obs_fine.n_days(),
        });
        let cg = self.world_path("coarse_grid.csv");
        let fg = self.world_path("fine_grid.csv");
        let ov = self.world_path("overlap.csv");
        let sp = self.world_path("spec.json");
        let tr = self.world_path("truth.json");
        w.coarse.write_csv(&cg)?;
        w.fine.write_csv(&fg)?;
        w.overlap.write_csv(&ov, &w.coarse, &w.fine)?;
        write_json(&sp, &spec)?;
        write_json(&tr, &w.truth)?;
        save_field(self.world_path("obs_fine.bin"), &w.obs_fine)?;
        save_field(self.world_path("rcm_coarse.bin"), &w.rcm_coarse)?;
        for p in [cg, fg, ov, sp, tr, self.world_path("obs_fine.bin"), self.world_path("rcm_coarse.bin")] {
            self.provenance(stage, &p, &[], details.clone())?;
        }
        Ok(())
    }

    fn upscale(&self) -> Result<()> {
        let g = self.grids()?;
        let obs = self.obs_fine(&g)?;
        let coarse = upscale(&obs, g.coarse.clone(), &g.overlap)?;
        let out = self.obs_coarse_path();
        save_field(&out, &coarse)?;
        let h = field_hash(&obs);
        self.provenance(Stage::Upscale, &out, &[("obs_fine", &h)], serde_json::json!({}))
    }

    fn fit_moments(&self) -> Result<()> {
        let g = self.grids()?;
        let (train, test) = (self.cfg.train()?, self.cfg.test()?);
        let stage = Stage::FitMoments;
        self.require(&self.obs_coarse_path(), "upscale")?;
        let obs_coarse = load_field(self.obs_coarse_path(), g.coarse.clone())?;
        let rcm = self.rcm_coarse(&g)?;

        let oc = obs_coarse.select_period(&train)?;
        let oc_h = field_hash(&oc);
        self.save_model(stage, "obs_coarse_train", &self.fit_model(&oc, "obs_coarse_train")?, &[("obs_coarse_train", &oc_h)])?;
        drop(oc);
        for (name, period) in [("rcm_train", &train), ("rcm_test", &test)] {
            let f = rcm.select_period(period)?;
            let h = field_hash(&f);
            self.save_model(stage, name, &self.fit_model(&f, name)?, &[(name, &h)])?;
        }

        let obs = self.obs_fine(&g)?.select_period(&train)?;
        for c in self.catchments(&g)? {
            let f = obs.select_cells(&c.fine_indices, c.grid.clone())?;
            let name = format!("fine_{}", c.name);
            let h = field_hash(&f);
            self.save_model(stage, &name, &self.fit_model(&f, &name)?, &[("obs_fine_train", &h)])?;
        }
        Ok(())
    }

    fn bias_correct(&self) -> Result<()> {
        let g = self.grids()?;
        let test = self.cfg.test()?;
        let stage = Stage::BiasCorrect;
        let ctx = CorrectionContext {
            obs_train: self.load_model(&self.model_path("obs_coarse_train"), "fit-moments")?,
            rcm_train: self.load_model(&self.model_path("rcm_train"), "fit-moments")?,
            rcm_test: self.load_model(&self.model_path("rcm_test"), "fit-moments")?,
        };
        let raw = self.rcm_coarse(&g)?.select_period(&test)?;
        let out = correct(&raw, &ctx)?;
        let path = self.corrected_path();
        save_field(&path, &out.field)?;
        let hashes = [
            ("obs_coarse_train", hash_json(&ctx.obs_train)),
            ("rcm_train", hash_json(&ctx.rcm_train)),
            ("rcm_test", hash_json(&ctx.rcm_test)),
            ("rcm_coarse_test", field_hash(&raw)),
        ];
        let inputs: Vec<(&str, &str)> = hashes.iter().map(|(k, v)| (*k, v.as_str())).collect();
        self.provenance(
            stage,
            &path,
            &inputs,
            serde_json::json!({ "method": "corr", "floored": out.floored }),
        )?;

        let model = self.fit_model(&out.field, "corrected_test")?;
        let mp = self.corrected_model_path();
        write_json(&mp, &model)?;
        let h = field_hash(&out.field);
        self.provenance(stage, &mp, &[("corrected_test", &h)], serde_json::json!({}))
    }

    fn fit_residuals(&self) -> Result<()> {
        let g = self.grids()?;
        let train = self.cfg.train()?;
        let r = &self.cfg.residual;
        let opts = ResidualOptions {
            window: r.window,
            gaussian_marginals: r.gaussian_marginals,
            arma: ArmaOptions {
                max_p: r.max_p,
                max_q: r.max_q,
            },
            ..Default::default()
        };
        let obs = self.obs_fine(&g)?.select_period(&train)?;
        for c in self.catchments(&g)? {
            let model = self.load_model(&self.model_path(&format!("fine_{}", c.name)), "fit-moments")?;
            let f = obs.select_cells(&c.fine_indices, c.grid.clone())?;
            let training_hash = field_hash(&f);
            let z = standardize(&f, &model.predict_on(&f))?;
            let fitted = fit_residual_model(&z, &c.name, &training_hash, &opts)?;
            tracing::info!(
                catchment = %c.name,
                p = fitted.model.arma.p,
                q = fitted.model.arma.q,
                "residual model fitted"
            );
            let path = self.residual_path(&c.name);
            write_json(&path, &fitted.model)?;
            let mh = hash_json(&model);
            self.provenance(
                Stage::FitResiduals,
                &path,
                &[("obs_fine_train", &training_hash), ("fine_model", &mh)],
                serde_json::json!({
                    "arma_order": [fitted.model.arma.p, fitted.model.arma.q],
                    "arma_candidates": fitted.arma_candidates,
                }),
            )?;
        }
        Ok(())
    }

    fn catchment_seed(&self, c: &Catchment) -> u64 {
        substream(self.cfg.seed, Stream::Misc, c.index).random()
    }

    fn downscale(&self) -> Result<()> {
        let g = self.grids()?;
        let (train, test) = (self.cfg.train()?, self.cfg.test()?);
        let (train_dates, test_dates) = (train.dates(), test.dates());
        let reference = self.load_model(&self.model_path("obs_coarse_train"), "fit-moments")?;
        let corrected = self.load_model(&self.corrected_model_path(), "bias-correct")?;
        let signal = Signal::from_models(&reference, &corrected, &g.coarse, &train_dates, &test_dates)?;
        if signal.clamped > 0 {
            tracing::warn!(clamped = signal.clamped, "variance ratios clamped");
        }
        for c in self.catchments(&g)? {
            let rp = self.residual_path(&c.name);
            self.require(&rp, "fit-residuals")?;
            let residual: ResidualModel = read_json(&rp)?;
            let fine_model = self.load_model(&self.model_path(&format!("fine_{}", c.name)), "fit-moments")?;
            let baseline = Baseline::new(&fine_model, &c.grid, &train_dates, &test_dates)?;
            let mapping = largest_intersection(&g.overlap.restrict_fine(&g.coarse, &c.fine_indices), &c.grid)?;
            let seed = self.catchment_seed(&c);
            let z = simulate_residuals(&residual, c.grid.clone(), test_dates.clone(), seed, 0)?;
            let hashes = [
                ("residual_model", hash_json(&residual)),
                ("fine_model", hash_json(&fine_model)),
                ("reference_model", hash_json(&reference)),
                ("corrected_model", hash_json(&corrected)),
            ];
            let inputs: Vec<(&str, &str)> = hashes.iter().map(|(k, v)| (*k, v.as_str())).collect();
            for v in self.cfg.variants() {
                let out = crate::downscale::assemble(v, &z, &baseline, Some((&signal, &mapping)))?;
                let path = self.downscaled_path(&c.name, v);
                save_field(&path, &out)?;
                self.provenance(
                    Stage::Downscale,
                    &path,
                    &inputs,
                    serde_json::json!({
                        "variant": v.name(),
                        "catchment_seed": seed,
                        "mean_delta": signal.mean_delta(),
                        "mean_rho": signal.mean_rho(),
                        "clamped": signal.clamped,
                    }),
                )?;
            }
        }
        Ok(())
    }

    fn eqm(&self) -> Result<()> {
        let g = self.grids()?;
        let (train, test) = (self.cfg.train()?, self.cfg.test()?);
        let obs = self.obs_fine(&g)?.select_period(&train)?;
        let rcm = self.rcm_coarse(&g)?;
        let (rcm_train, rcm_test) = (rcm.select_period(&train)?, rcm.select_period(&test)?);
        for c in self.catchments(&g)? {
            let o = obs.select_cells(&c.fine_indices, c.grid.clone())?;
            let src = nearest_neighbor_regrid(&rcm_train, c.grid.clone())?;
            let table = eqm_train(&o, &src, self.cfg.knot_step)?;
            let tp = self.eqm_table_path(&c.name);
            table.save(&tp)?;
            let (oh, sh) = (field_hash(&o), field_hash(&src));
            let details = serde_json::json!({ "knot_step": self.cfg.knot_step, "knots": table.knots.len() });
            self.provenance(Stage::Eqm, &tp, &[("obs_fine_train", &oh), ("rcm_train_regridded", &sh)], details.clone())?;

            let target = nearest_neighbor_regrid(&rcm_test, c.grid.clone())?;
            let mapped = eqm_apply(&table, &target)?;
            let op = self.eqm_output_path(&c.name);
            save_field(&op, &mapped)?;
            let (th, rh) = (file_sha(&tp)?, field_hash(&target));
            self.provenance(Stage::Eqm, &op, &[("table", &th), ("rcm_test_regridded", &rh)], details)?;
        }
        Ok(())
    }

    fn method_field(&self, method: &str, c: &Catchment, rcm_test: &Field) -> Result<Field> {
        match method {
            "eqm" => {
                let p = self.eqm_output_path(&c.name);
                self.require(&p, "eqm")?;
                load_field(&p, c.grid.clone())
            }
            "raw" => nearest_neighbor_regrid(rcm_test, c.grid.clone()),
            v => {
                let p = self.downscaled_path(&c.name, v.parse()?);
                self.require(&p, "downscale")?;
                load_field(&p, c.grid.clone())
            }
        }
    }

    fn evaluate(&self) -> Result<()> {
        let g = self.grids()?;
        let test = self.cfg.test()?;
        let catchments = self.catchments(&g)?;
        // check every artifact before the slow part
        for c in &catchments {
            for m in &self.cfg.evaluation.methods {
                match m.as_str() {
                    "eqm" => self.require(&self.eqm_output_path(&c.name), "eqm")?,
                    "raw" => {}
                    v => self.require(&self.downscaled_path(&c.name, v.parse()?), "downscale")?,
                }
            }
        }
        let obs = self.obs_fine(&g)?.select_period(&test)?;
        let rcm_test = self.rcm_coarse(&g)?.select_period(&test)?;
        let opts = EvalOptions {
            resamples: self.cfg.evaluation.bootstrap,
            max_lag: self.cfg.evaluation.max_lag,
            seed: self.cfg.seed,
        };
        let mut reports = Vec::with_capacity(catchments.len());
        let mut inputs = Vec::new();
        for c in &catchments {
            let o = obs.select_cells(&c.fine_indices, c.grid.clone())?;
            inputs.push((format!("{}/obs", c.name), field_hash(&o)));
            let mut methods = Vec::new();
            for m in &self.cfg.evaluation.methods {
                let f = self.method_field(m, c, &rcm_test)?;
                inputs.push((format!("{}/{m}", c.name), field_hash(&f)));
                methods.push((m.clone(), f));
            }
            let r = evaluate_catchment(&c.name, c.index, &o, &methods, &opts)?;
            for m in &r.methods {
                tracing::info!(
                    catchment = %c.name,
                    method = %m.method,
                    iqd = m.iqd[&crate::evaluation::WeightKind::Full].mean,
                    "evaluated"
                );
            }
            reports.push(r);
        }
        let report = EvalReport { catchments: reports };
        let path = self.report_path();
        report.write(&path)?;
        let inputs: Vec<(&str, &str)> = inputs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        self.provenance(
            Stage::Evaluate,
            &path,
            &inputs,
            serde_json::json!({ "bootstrap": opts.resamples, "max_lag": opts.max_lag }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> String {
        format!(
            r#"
output_dir = "{}"
seed = 7

[periods]
train = ["1961-01-01", "1970-12-31"]
test = ["1971-01-01", "1975-12-31"]

[[catchments]]
name = "A"
coarse_ids = [100001]
"#,
            dir.join("out").display()
        )
    }

    #[test]
    fn parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, config(dir.path())).unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.reference_year(), 1961);
        assert_eq!(cfg.variants().len(), 3);
        assert_eq!(cfg.evaluation.methods.len(), 5);
        assert_eq!(cfg.knot_step, DEFAULT_KNOT_STEP);

        let overlapping = config(dir.path()).replace("1971-01-01", "1970-06-01");
        std::fs::write(&p, overlapping).unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        std::fs::write(&p, config(dir.path()) + "bogus = 1\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, config(dir.path())).unwrap();
        let pipe = Pipeline::new(PipelineConfig::load(&p).unwrap()).unwrap();
        let err = pipe.run_stage(Stage::Upscale).unwrap_err();
        assert!(err.to_string().contains("run synth-world first"), "{err}");
        assert!(err.is_user_error());
    }
}
