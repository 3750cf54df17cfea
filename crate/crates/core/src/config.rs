//! Study configuration: the factor grid, fitted models, and engine settings.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cat::{CatConfig, Estimator};
use crate::error::{Error, Result};
use crate::model::ModelName;
use crate::pool::{DifConfig, DifParameter, PoolConfig};
use crate::prep::IntervalGrid;

/// DIF conditions crossed with the CAT factors in Study 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifGrid {
    #[serde(default = "default_dif_parameters")]
    pub parameters: Vec<DifParameter>,
    #[serde(default = "default_dif_proportions")]
    pub proportions: Vec<f64>,
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
}

impl Default for DifGrid {
    fn default() -> Self {
        DifGrid {
            parameters: default_dif_parameters(),
            proportions: default_dif_proportions(),
            magnitude: default_magnitude(),
        }
    }
}

fn default_dif_parameters() -> Vec<DifParameter> {
    vec![DifParameter::A, DifParameter::B]
}

fn default_dif_proportions() -> Vec<f64> {
    vec![0.2, 0.4]
}

fn default_magnitude() -> f64 {
    0.4
}

fn default_replications() -> usize {
    100
}

fn default_examinees() -> usize {
    5000
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Mle, Estimator::Eap]
}

fn default_lengths() -> Vec<usize> {
    vec![25, 35]
}

fn default_exposure() -> Vec<f64> {
    vec![0.20, 0.33]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_models() -> Vec<ModelName> {
    vec![ModelName::M6, ModelName::S1, ModelName::S2, ModelName::S3]
}

fn default_seed() -> u64 {
    20_190_601
}

fn default_min_reps() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// 1: DIF-free conditions; 2: DIF conditions.
    pub study: u8,
    #[serde(default = "default_replications")]
    pub n_replications: usize,
    #[serde(default = "default_examinees")]
    pub n_examinees: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_lengths")]
    pub test_lengths: Vec<usize>,
    #[serde(default = "default_exposure")]
    pub exposure_rates: Vec<f64>,
    /// Study 2 only; the standard grid is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dif: Option<DifGrid>,
    /// Draw the contaminated subset anew in every replication; otherwise once
    /// per cell.
    #[serde(default = "default_true")]
    pub dif_per_replication: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelName>,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default = "default_min_reps")]
    pub min_item_replications: usize,
    #[serde(default)]
    pub pool: PoolConfig,
    /// Engine settings; test length, exposure rate and provisional estimator
    /// are overridden per cell.
    #[serde(default)]
    pub cat: CatConfig,
    #[serde(default)]
    pub grid: IntervalGrid,
    /// Fit the empty model to every item of the first replication of the
    /// first cell and keep ICC and interval diagnostics.
    #[serde(default = "default_true")]
    pub diagnostics: bool,
    /// Keep every individual fit for `fits.csv`.
    #[serde(default = "default_true")]
    pub record_fits: bool,
}

impl StudyConfig {
    /// All defaults for the given study.
    pub fn new(study: u8) -> Self {
        StudyConfig {
            study,
            n_replications: default_replications(),
            n_examinees: default_examinees(),
            estimators: default_estimators(),
            test_lengths: default_lengths(),
            exposure_rates: default_exposure(),
            dif: None,
            dif_per_replication: true,
            alpha: default_alpha(),
            models: default_models(),
            base_seed: default_seed(),
            min_item_replications: default_min_reps(),
            pool: PoolConfig::default(),
            cat: CatConfig::default(),
            grid: IntervalGrid::default(),
            diagnostics: true,
            record_fits: true,
        }
    }

    /// DIF conditions in effect, or `None` for Study 1.
    pub fn dif_conditions(&self) -> Option<Vec<DifConfig>> {
        if self.study != 2 {
            return None;
        }
        let grid = self.dif.clone().unwrap_or_default();
        let mut out = Vec::new();
        for &parameter in &grid.parameters {
            for &proportion in &grid.proportions {
                out.push(DifConfig {
                    parameter,
                    magnitude: grid.magnitude,
                    proportion,
                    per_replication: self.dif_per_replication,
                });
            }
        }
        Some(out)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match self.study {
            1 if self.dif.is_some() => return fail("study 1 has no DIF conditions".into()),
            1 | 2 => {}
            s => return fail(format!("study must be 1 or 2 (got {s})")),
        }
        if self.n_replications == 0 {
            return fail("n_replications must be positive".into());
        }
        if self.n_examinees < 2 {
            return fail("n_examinees must be at least 2".into());
        }
        if self.estimators.is_empty() || self.test_lengths.is_empty() || self.exposure_rates.is_empty() {
            return fail("estimators, test_lengths and exposure_rates must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1] (got {})", self.alpha));
        }
        if self.models.is_empty() {
            return fail("at least one model must be fitted".into());
        }
        let unique: BTreeSet<_> = self.models.iter().collect();
        if unique.len() != self.models.len() {
            return fail("models must not repeat".into());
        }
        if self.min_item_replications == 0 {
            return fail("min_item_replications must be at least 1".into());
        }
        if !(self.grid.step > 0.0 && self.grid.hi > self.grid.lo) {
            return fail("interval grid must have positive step and hi > lo".into());
        }
        self.pool.validate()?;
        for &k in &self.test_lengths {
            for &r in &self.exposure_rates {
                let mut cat = self.cat.clone();
                cat.test_length = k;
                cat.max_exposure = r;
                cat.validate(self.pool.n_items)?;
            }
        }
        if let Some(conds) = self.dif_conditions() {
            if conds.is_empty() {
                return fail("the DIF grid is empty".into());
            }
            for c in &conds {
                c.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn parse_config_str(text: &str) -> Result<StudyConfig> {
    let cfg: StudyConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
