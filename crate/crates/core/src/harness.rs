//! Monte Carlo orchestration over the design cells of a study.
//!
//! Each replication simulates a cohort through the CAT engine, cleans the
//! logs into item frames and fits every configured model to every frame. A
//! cell's replications are then folded into per-item flag rates: an item's
//! replication only counts when all models converged for it, and rates are
//! kept separately for the replications in which the item was clean and
//! those in which it was contaminated.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cat::{self, CatConfig, CohortRun, Estimator, PrecisionSummary};
use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::glm::{fit_glm, GlmSpec, WaldTest};
use crate::glmm::{self, fit_glmm, GlmmSpec, IccSummary};
use crate::model::ModelName;
use crate::pool::{self, DifConfig, FocalMap, ItemPool};
use crate::prep::{self, CleaningOptions, DropReport, ItemFrame};
use crate::stats;

const POOL_STREAM: u64 = 0x706f_6f6c;
const FIXED_DIF_STREAM: u64 = 0x6669_7864;
const COHORT_STREAM: u64 = 1;
const DIF_STREAM: u64 = 2;
const CAT_STREAM: u64 = 3;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit mix of several integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// One combination of the study factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub estimator: Estimator,
    pub test_length: usize,
    pub max_exposure: f64,
    pub dif: Option<DifConfig>,
}

impl Cell {
    pub fn id(&self) -> String {
        let base = format!("{}-{}-{:.2}", self.estimator, self.test_length, self.max_exposure);
        match &self.dif {
            Some(d) => format!("{base}-{}-{:.1}", d.parameter, d.proportion),
            None => base,
        }
    }

    pub fn cat_config(&self, base: &CatConfig) -> CatConfig {
        CatConfig {
            test_length: self.test_length,
            max_exposure: self.max_exposure,
            provisional_estimator: self.estimator,
            ..base.clone()
        }
    }
}

/// Cartesian product of the configured factors, DIF conditions varying fastest.
pub fn cells(cfg: &StudyConfig) -> Vec<Cell> {
    let difs: Vec<Option<DifConfig>> = match cfg.dif_conditions() {
        Some(d) => d.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut out = Vec::new();
    for &estimator in &cfg.estimators {
        for &test_length in &cfg.test_lengths {
            for &max_exposure in &cfg.exposure_rates {
                for dif in &difs {
                    out.push(Cell {
                        index: out.len(),
                        estimator,
                        test_length,
                        max_exposure,
                        dif: *dif,
                    });
                }
            }
        }
    }
    out
}

/// One model fitted to one item frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub item_id: String,
    pub model: ModelName,
    pub contaminated: bool,
    pub converged: bool,
    pub estimate_g: f64,
    pub se_g: f64,
    pub p_g: f64,
    pub flagged: bool,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub tau0_sq: Option<f64>,
    pub tau1_sq: Option<f64>,
    pub tau10: Option<f64>,
    pub icc: Option<f64>,
    pub n_level1: usize,
    pub n_level2: usize,
    pub error: Option<String>,
}

impl FitRecord {
    fn failed(item_id: &str, model: ModelName, contaminated: bool, frame: &ItemFrame, err: &Error) -> Self {
        FitRecord {
            item_id: item_id.to_string(),
            model,
            contaminated,
            converged: false,
            estimate_g: f64::NAN,
            se_g: f64::NAN,
            p_g: f64::NAN,
            flagged: false,
            deviance: f64::NAN,
            aic: f64::NAN,
            bic: f64::NAN,
            coefficients: Vec::new(),
            std_errors: Vec::new(),
            tau0_sq: None,
            tau1_sq: None,
            tau10: None,
            icc: None,
            n_level1: frame.len(),
            n_level2: frame.n_intervals(),
            error: Some(err.to_string()),
        }
    }
}

/// Fit `model` to `frame` and classify the item by the Wald test on `g`.
pub fn fit_model(frame: &ItemFrame, model: ModelName, contaminated: bool, alpha: f64) -> FitRecord {
    let id = frame.item_id.as_str();
    let result = if model.is_multilevel() {
        GlmmSpec::named(model).and_then(|spec| fit_glmm(frame, &spec)).map(|f| {
            let wald = f.wald("g").ok();
            let (est, se) = f.coefficient("g").unwrap_or((f64::NAN, f64::NAN));
            FitRecord {
                item_id: id.to_string(),
                model,
                contaminated,
                converged: f.converged && wald.is_some(),
                estimate_g: est,
                se_g: se,
                p_g: wald.map_or(f64::NAN, |w| w.p_value),
                flagged: false,
                deviance: f.deviance,
                aic: f.aic,
                bic: f.bic,
                tau0_sq: Some(f.tau0_sq),
                tau1_sq: f.tau1_sq,
                tau10: f.tau10,
                icc: Some(f.icc),
                n_level1: f.n_level1,
                n_level2: f.n_level2,
                coefficients: f.coefficients,
                std_errors: f.std_errors,
                error: None,
            }
        })
    } else {
        GlmSpec::named(model).and_then(|spec| fit_glm(frame, &spec)).map(|f| {
            let (est, se) = f.coefficient("g").unwrap_or((f64::NAN, f64::NAN));
            let wald = WaldTest::new(est, se);
            FitRecord {
                item_id: id.to_string(),
                model,
                contaminated,
                converged: f.converged && !f.separation && se.is_finite(),
                estimate_g: est,
                se_g: se,
                p_g: wald.p_value,
                flagged: false,
                deviance: f.deviance,
                aic: f.aic,
                bic: f.bic,
                tau0_sq: None,
                tau1_sq: None,
                tau10: None,
                icc: None,
                n_level1: f.n,
                n_level2: frame.n_intervals(),
                coefficients: f.coefficients,
                std_errors: f.std_errors,
                error: None,
            }
        })
    };
    match result {
        Ok(mut rec) => {
            // p <= alpha so that alpha = 1 flags everything, including an
            // estimate of exactly zero.
            rec.flagged = rec.converged && alpha > 0.0 && rec.p_g <= alpha;
            rec
        }
        Err(e) => FitRecord::failed(id, model, contaminated, frame, &e),
    }
}

/// ICC and interval counts for the items of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cell_id: String,
    pub replication: usize,
    pub rho: BTreeMap<String, f64>,
    pub failed: Vec<String>,
    pub summary: IccSummary,
    /// Rows per (item, interval).
    pub intervals: BTreeMap<String, BTreeMap<usize, usize>>,
    pub frame_sizes: BTreeMap<String, usize>,
}

impl Diagnostics {
    pub fn from_frames(cell_id: String, replication: usize, frames: &BTreeMap<String, ItemFrame>) -> Self {
        let screen = glmm::icc_screen(frames);
        Diagnostics {
            cell_id,
            replication,
            rho: screen.rho,
            failed: screen.failed,
            summary: screen.summary,
            intervals: frames.iter().map(|(id, f)| (id.clone(), f.cluster_sizes.clone())).collect(),
            frame_sizes: frames.iter().map(|(id, f)| (id.clone(), f.len())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    pub precision: PrecisionSummary,
    pub drops: DropReport,
    pub fits: Vec<FitRecord>,
    pub contaminated: BTreeSet<String>,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample SD; missing with a single value.
    pub sd: Option<f64>,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Spread {
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAggregate {
    pub bias: Spread,
    pub mse: Spread,
    pub correlation: Spread,
    pub csem: Spread,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropAggregate {
    pub proportion: Spread,
    pub count: Spread,
    pub total: Spread,
}

/// Mean and SD over items of per-item flag rates for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub model: ModelName,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_items: usize,
}

/// Flag counts for one item under one DIF status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTally {
    pub item_id: String,
    pub contaminated: bool,
    /// Replications in which the item had a frame with this status.
    pub present: usize,
    /// ... and every model converged.
    pub kept: usize,
    pub flags: BTreeMap<ModelName, usize>,
}

impl ItemTally {
    pub fn rate(&self, model: ModelName) -> Option<f64> {
        (self.kept > 0).then(|| self.flags.get(&model).copied().unwrap_or(0) as f64 / self.kept as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub cell: Cell,
    pub replications: usize,
    pub failed_replications: Vec<(usize, String)>,
    pub precision: Option<PrecisionAggregate>,
    pub drops: Option<DropAggregate>,
    pub type1: Vec<RateSummary>,
    pub power: Vec<RateSummary>,
    pub items: Vec<ItemTally>,
    /// Pooled flags over kept (item, replication) pairs: (flags, kept) for
    /// clean and contaminated status.
    pub pooled: BTreeMap<ModelName, [(usize, usize); 2]>,
    pub annotations: Vec<String>,
    /// Seeds of the successful replications, in replication order.
    pub seeds: Vec<u64>,
    /// Every fit, keyed by replication; empty unless fits are recorded.
    pub fits: Vec<(usize, FitRecord)>,
}

impl ConditionResult {
    fn empty(cell: Cell, failed: Vec<(usize, String)>, note: String) -> Self {
        ConditionResult {
            cell,
            replications: 0,
            failed_replications: failed,
            precision: None,
            drops: None,
            type1: Vec::new(),
            power: Vec::new(),
            items: Vec::new(),
            pooled: BTreeMap::new(),
            annotations: vec![note],
            seeds: Vec::new(),
            fits: Vec::new(),
        }
    }

    pub fn type1_of(&self, model: ModelName) -> Option<&RateSummary> {
        self.type1.iter().find(|r| r.model == model)
    }

    pub fn power_of(&self, model: ModelName) -> Option<&RateSummary> {
        self.power.iter().find(|r| r.model == model)
    }

    /// Flags over all kept (item, replication) pairs with the given status.
    pub fn pooled_rate(&self, model: ModelName, contaminated: bool) -> Option<f64> {
        let (flags, kept) = self.pooled.get(&model)?[usize::from(contaminated)];
        (kept > 0).then(|| flags as f64 / kept as f64)
    }
}

/// A configured study: the validated configuration and its fixed item pool.
#[derive(Debug, Clone)]
pub struct Study {
    pub cfg: StudyConfig,
    pub pool: ItemPool,
    pub cells: Vec<Cell>,
}

impl Study {
    pub fn new(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = pool::generate_pool(&cfg.pool, derive_seed(&[cfg.base_seed, POOL_STREAM]))?;
        let cells = cells(&cfg);
        Ok(Study { cfg, pool, cells })
    }

    pub fn replication_seed(&self, cell: &Cell, replication: usize) -> u64 {
        derive_seed(&[self.cfg.base_seed, cell.index as u64, replication as u64])
    }

    fn focal_map(&self, cell: &Cell, seed: u64) -> Result<FocalMap> {
        match &cell.dif {
            None => Ok(FocalMap::dif_free(&self.pool)),
            Some(d) if d.per_replication => pool::inject_dif(&self.pool, d, derive_seed(&[seed, DIF_STREAM])),
            Some(d) => pool::inject_dif(
                &self.pool,
                d,
                derive_seed(&[self.cfg.base_seed, cell.index as u64, FIXED_DIF_STREAM]),
            ),
        }
    }

    pub fn cleaning(&self) -> CleaningOptions {
        CleaningOptions {
            grid: self.cfg.grid,
            random_effects: self.cfg.models.iter().map(|m| m.random_terms().len()).max().unwrap_or(0),
            polytomous: BTreeSet::new(),
        }
    }

    /// The simulation half of a replication: cohort, focal parameters and
    /// administration logs.
    pub fn simulate(&self, cell: &Cell, replication: usize) -> Result<(CohortRun, FocalMap)> {
        let seed = self.replication_seed(cell, replication);
        let cohort = pool::generate_cohort(self.cfg.n_examinees, derive_seed(&[seed, COHORT_STREAM]))?;
        let focal = self.focal_map(cell, seed)?;
        let cat_cfg = cell.cat_config(&self.cfg.cat);
        let run = cat::simulate_cohort(&cohort, &self.pool, &focal, &cat_cfg, derive_seed(&[seed, CAT_STREAM]))?;
        Ok((run, focal))
    }

    /// Simulate, clean and fit one replication of `cell`.
    pub fn run_replication(&self, cell: &Cell, replication: usize) -> Result<ReplicationResult> {
        let seed = self.replication_seed(cell, replication);
        let (run, focal) = self.simulate(cell, replication)?;
        let (frames, drops) = prep::build_frames(&run.logs, &self.cleaning());
        let contaminated: BTreeSet<String> = focal.contaminated_ids().map(str::to_string).collect();

        let mut fits = Vec::with_capacity(frames.len() * self.cfg.models.len());
        for (id, frame) in &frames {
            let dif = contaminated.contains(id);
            for &model in &self.cfg.models {
                fits.push(fit_model(frame, model, dif, self.cfg.alpha));
            }
        }
        let diagnostics = (self.cfg.diagnostics && cell.index == 0 && replication == 0)
            .then(|| Diagnostics::from_frames(cell.id(), replication, &frames));
        log::debug!("cell {} replication {replication}: {} frames", cell.id(), frames.len());
        Ok(ReplicationResult {
            replication,
            seed,
            precision: run.precision,
            drops,
            fits,
            contaminated,
            diagnostics,
        })
    }

    /// Fold the successful replications of one cell.
    pub fn aggregate(&self, cell: &Cell, results: &[ReplicationResult]) -> Result<ConditionResult> {
        if results.is_empty() {
            return Err(Error::EmptyCell(cell.id()));
        }
        let models = &self.cfg.models;
        let mut ordered: Vec<&ReplicationResult> = results.iter().collect();
        ordered.sort_by_key(|r| r.replication);

        let mut tallies: BTreeMap<(String, bool), ItemTally> = BTreeMap::new();
        for rep in &ordered {
            let mut by_item: BTreeMap<&str, Vec<&FitRecord>> = BTreeMap::new();
            for fit in &rep.fits {
                by_item.entry(&fit.item_id).or_default().push(fit);
            }
            for (id, fits) in by_item {
                let dif = fits[0].contaminated;
                let tally = tallies.entry((id.to_string(), dif)).or_insert_with(|| ItemTally {
                    item_id: id.to_string(),
                    contaminated: dif,
                    present: 0,
                    kept: 0,
                    flags: models.iter().map(|&m| (m, 0)).collect(),
                });
                tally.present += 1;
                let all_converged = models
                    .iter()
                    .all(|m| fits.iter().any(|f| f.model == *m && f.converged));
                if !all_converged {
                    continue;
                }
                tally.kept += 1;
                for f in fits.iter().filter(|f| f.flagged) {
                    *tally.flags.entry(f.model).or_insert(0) += 1;
                }
            }
        }
        let items: Vec<ItemTally> = tallies.into_values().collect();

        let summarize = |contaminated: bool| -> Vec<RateSummary> {
            let eligible: Vec<&ItemTally> = items
                .iter()
                .filter(|t| t.contaminated == contaminated && t.kept >= self.cfg.min_item_replications)
                .collect();
            models
                .iter()
                .map(|&m| {
                    let rates: Vec<f64> = eligible.iter().filter_map(|t| t.rate(m)).collect();
                    RateSummary {
                        model: m,
                        mean: (!rates.is_empty()).then(|| stats::mean(&rates)),
                        sd: stats::sample_sd(&rates),
                        n_items: rates.len(),
                    }
                })
                .collect()
        };
        let type1 = summarize(false);
        let power = if cell.dif.is_some() { summarize(true) } else { Vec::new() };

        let mut pooled = BTreeMap::new();
        for &m in models {
            let mut acc = [(0, 0); 2];
            for t in &items {
                let slot = &mut acc[usize::from(t.contaminated)];
                slot.0 += t.flags.get(&m).copied().unwrap_or(0);
                slot.1 += t.kept;
            }
            pooled.insert(m, acc);
        }

        let pick = |f: fn(&PrecisionSummary) -> f64| -> Vec<f64> { ordered.iter().map(|r| f(&r.precision)).collect() };
        let precision = PrecisionAggregate {
            bias: Spread::of(&pick(|p| p.bias)).expect("non-empty"),
            mse: Spread::of(&pick(|p| p.mse)).expect("non-empty"),
            correlation: Spread::of(&pick(|p| p.correlation)).expect("non-empty"),
            csem: Spread::of(&pick(|p| p.csem)).expect("non-empty"),
        };
        let drops = DropAggregate {
            proportion: Spread::of(&ordered.iter().map(|r| r.drops.dropped_fraction()).collect::<Vec<_>>())
                .expect("non-empty"),
            count: Spread::of(&ordered.iter().map(|r| r.drops.dropped() as f64).collect::<Vec<_>>())
                .expect("non-empty"),
            total: Spread::of(&ordered.iter().map(|r| r.drops.total_administered as f64).collect::<Vec<_>>())
                .expect("non-empty"),
        };

        let mut annotations = Vec::new();
        if type1.iter().all(|r| r.n_items == 0) && power.iter().all(|r| r.n_items == 0) {
            annotations.push(Error::EmptyCell(cell.id()).to_string());
        }
        Ok(ConditionResult {
            cell: cell.clone(),
            replications: ordered.len(),
            failed_replications: Vec::new(),
            precision: Some(precision),
            drops: Some(drops),
            type1,
            power,
            items,
            pooled,
            annotations,
            seeds: ordered.iter().map(|r| r.seed).collect(),
            fits: if self.cfg.record_fits {
                ordered
                    .iter()
                    .flat_map(|r| r.fits.iter().map(move |f| (r.replication, f.clone())))
                    .collect()
            } else {
                Vec::new()
            },
        })
    }

    /// Run every replication of every cell on a pool of `workers` threads
    /// (all available cores when `None`).
    pub fn run(&self, workers: Option<usize>) -> Result<StudyReport> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = workers {
            builder = builder.num_threads(w.max(1));
        }
        let threads = builder
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let jobs: Vec<(usize, usize)> = (0..self.cells.len())
            .flat_map(|c| (0..self.cfg.n_replications).map(move |r| (c, r)))
            .collect();
        let started = Instant::now();
        let outcomes: Vec<(usize, usize, Result<ReplicationResult>, f64)> = threads.install(|| {
            jobs.par_iter()
                .map(|&(c, r)| {
                    let t = Instant::now();
                    let out = self.run_replication(&self.cells[c], r);
                    (c, r, out, t.elapsed().as_secs_f64())
                })
                .collect()
        });

        let mut per_cell: Vec<(Vec<ReplicationResult>, Vec<(usize, String)>, f64)> =
            (0..self.cells.len()).map(|_| (Vec::new(), Vec::new(), 0.0)).collect();
        let mut diagnostics = None;
        for (c, r, out, secs) in outcomes {
            per_cell[c].2 += secs;
            match out {
                Ok(mut rep) => {
                    if let Some(d) = rep.diagnostics.take() {
                        diagnostics = Some(d);
                    }
                    per_cell[c].0.push(rep);
                }
                Err(e) => {
                    log::warn!("cell {} replication {r} excluded: {e}", self.cells[c].id());
                    per_cell[c].1.push((r, e.to_string()));
                }
            }
        }

        let mut conditions = Vec::with_capacity(self.cells.len());
        let mut timings = Vec::with_capacity(self.cells.len());
        for (cell, (reps, failed, secs)) in self.cells.iter().zip(per_cell) {
            let mut result = match self.aggregate(cell, &reps) {
                Ok(r) => r,
                Err(e) => ConditionResult::empty(cell.clone(), Vec::new(), e.to_string()),
            };
            result.failed_replications = failed;
            log::info!(
                "cell {}: {} replications kept, {} failed",
                cell.id(),
                result.replications,
                result.failed_replications.len()
            );
            conditions.push(result);
            timings.push(secs);
        }
        Ok(StudyReport {
            config: self.cfg.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            pool_seed: derive_seed(&[self.cfg.base_seed, POOL_STREAM]),
            conditions,
            diagnostics,
            timings: Timings {
                total_seconds: started.elapsed().as_secs_f64(),
                cell_seconds: timings,
            },
        })
    }
}

/// Wall-clock figures; kept apart from the reproducible outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    /// Summed replication time per cell.
    pub cell_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub version: String,
    pub pool_seed: u64,
    pub conditions: Vec<ConditionResult>,
    pub diagnostics: Option<Diagnostics>,
    pub timings: Timings,
}

pub fn run_study(cfg: StudyConfig, workers: Option<usize>) -> Result<StudyReport> {
    Study::new(cfg)?.run(workers)
}
