//! Item-adaptive test administration.
//!
//! Items are chosen with a weighted penalty model over a content index and an
//! information index, then drawn at random from the `randomesque_k` best
//! candidates among items that are still under their exposure cap. Selection
//! and scoring only ever see reference-group parameters; focal parameters are
//! used to generate responses for focal examinees on contaminated items.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irt::{self, IrtConfig, Item, MleOptions, Response};
use crate::pool::{Cohort, Examinee, FocalMap, ItemPool};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "EAP")]
    Eap,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Mle => "MLE",
            Estimator::Eap => "EAP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WpmWeights {
    pub content: f64,
    pub info: f64,
}

impl Default for WpmWeights {
    fn default() -> Self {
        WpmWeights {
            content: 1.0,
            info: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatConfig {
    pub test_length: usize,
    pub max_exposure: f64,
    pub provisional_estimator: Estimator,
    pub final_estimator: Estimator,
    pub theta_start: f64,
    pub wpm_weights: WpmWeights,
    pub randomesque_k: usize,
    /// Target content proportions, indexed by item category.
    pub blueprint: Vec<f64>,
    /// Replace boundary (all-correct / all-incorrect) provisional MLEs with
    /// the EAP estimate instead of the clamped value.
    pub mle_boundary_fallback: bool,
    pub irt: IrtConfig,
}

impl Default for CatConfig {
    fn default() -> Self {
        CatConfig {
            test_length: 25,
            max_exposure: 0.33,
            provisional_estimator: Estimator::Mle,
            final_estimator: Estimator::Mle,
            theta_start: 0.0,
            wpm_weights: WpmWeights::default(),
            randomesque_k: 5,
            blueprint: vec![0.30, 0.25, 0.25, 0.20],
            mle_boundary_fallback: false,
            irt: IrtConfig::default(),
        }
    }
}

impl CatConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        self.irt.validate()?;
        if self.test_length == 0 || self.test_length > pool_size {
            return Err(Error::Config(format!(
                "test length {} must lie in 1..={pool_size}",
                self.test_length
            )));
        }
        if !(self.max_exposure > 0.0 && self.max_exposure <= 1.0) {
            return Err(Error::Config("max_exposure must lie in (0, 1]".into()));
        }
        if self.randomesque_k == 0 {
            return Err(Error::Config("randomesque_k must be at least 1".into()));
        }
        if self.final_estimator != Estimator::Mle {
            return Err(Error::Config("the final estimator must be MLE".into()));
        }
        let w = self.wpm_weights;
        if !(w.content >= 0.0 && w.info >= 0.0) {
            return Err(Error::Config("WPM weights must be nonnegative".into()));
        }
        if self.blueprint.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("blueprint proportions must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of leading examinees for whom the exposure cap is not enforced.
    pub fn warm_up(&self) -> usize {
        (1.0 / self.max_exposure).ceil() as usize
    }
}

/// Pool-level administration counts shared by all examinees of a cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureTally {
    counts: Vec<usize>,
    examinees: usize,
}

impl ExposureTally {
    pub fn new(pool_size: usize) -> Self {
        ExposureTally {
            counts: vec![0; pool_size],
            examinees: 0,
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Examinees whose administration has completed.
    pub fn examinees(&self) -> usize {
        self.examinees
    }

    fn eligible(&self, index: usize, cfg: &CatConfig) -> bool {
        if self.examinees < cfg.warm_up() {
            return true;
        }
        (self.counts[index] as f64) / (self.examinees as f64) < cfg.max_exposure
    }
}

/// Running state of one examinee's administration.
#[derive(Debug, Clone, PartialEq)]
pub struct CatState {
    pub examinee_index: usize,
    pub administered: Vec<usize>,
    pub responses: Vec<bool>,
    pub theta_provisional: f64,
    pub category_counts: Vec<usize>,
}

impl CatState {
    pub fn new(examinee_index: usize, cfg: &CatConfig, n_categories: usize) -> Self {
        CatState {
            examinee_index,
            administered: Vec::with_capacity(cfg.test_length),
            responses: Vec::with_capacity(cfg.test_length),
            theta_provisional: cfg.theta_start,
            category_counts: vec![0; n_categories],
        }
    }

    fn record(&mut self, index: usize, category: u8, x: bool) {
        self.administered.push(index);
        self.responses.push(x);
        let c = category as usize;
        if c >= self.category_counts.len() {
            self.category_counts.resize(c + 1, 0);
        }
        self.category_counts[c] += 1;
    }

    fn scored<'p>(&self, pool: &'p ItemPool) -> Vec<Response<'p>> {
        self.administered
            .iter()
            .zip(&self.responses)
            .map(|(&k, &x)| (pool.get(k), x))
            .collect()
    }
}

struct Candidate {
    index: usize,
    info: f64,
    penalty: f64,
}

/// Pick the next item for `state` at its current provisional estimate.
pub fn select_next_item<R: Rng + ?Sized>(
    state: &CatState,
    pool: &ItemPool,
    cfg: &CatConfig,
    exposure: &ExposureTally,
    rng: &mut R,
) -> Result<usize> {
    let mut taken = vec![false; pool.len()];
    for &k in &state.administered {
        taken[k] = true;
    }
    let mut candidates: Vec<Candidate> = (0..pool.len())
        .filter(|&k| !taken[k] && exposure.eligible(k, cfg))
        .map(|index| Candidate {
            index,
            info: irt::fisher_information(state.theta_provisional, pool.get(index), &cfg.irt),
            penalty: 0.0,
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoEligibleItem {
            examinee: state.examinee_index,
            slot: state.administered.len() + 1,
        });
    }

    // Information index: rank of the item by descending information, scaled to [0, 1].
    candidates.sort_by(|x, y| y.info.total_cmp(&x.info).then(x.index.cmp(&y.index)));
    let denom = (candidates.len() - 1).max(1) as f64;
    for (rank, cand) in candidates.iter_mut().enumerate() {
        cand.penalty = cfg.wpm_weights.info * rank as f64 / denom;
    }

    // Content index: how far adding the item would push its category over the blueprint.
    let given = state.administered.len() as f64;
    let over = |cat: u8| {
        let c = cat as usize;
        let have = state.category_counts.get(c).copied().unwrap_or(0) as f64;
        let target = cfg.blueprint.get(c).copied().unwrap_or(0.0);
        ((have + 1.0) / (given + 1.0) - target).max(0.0)
    };
    let raw: Vec<f64> = candidates.iter().map(|c| over(pool.get(c.index).category)).collect();
    let max_over = raw.iter().copied().fold(0.0, f64::max);
    if max_over > 0.0 {
        for (cand, r) in candidates.iter_mut().zip(raw) {
            cand.penalty += cfg.wpm_weights.content * r / max_over;
        }
    }

    let order = |x: &Candidate, y: &Candidate| {
        x.penalty
            .total_cmp(&y.penalty)
            .then(y.info.total_cmp(&x.info))
            .then(x.index.cmp(&y.index))
    };
    let k = cfg.randomesque_k.min(candidates.len());
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, order);
    }
    candidates[..k].sort_by(order);
    Ok(candidates[rng.random_range(0..k)].index)
}

/// Provisional estimate from a response prefix, as used for item selection.
pub fn provisional_estimate(responses: &[Response<'_>], cfg: &CatConfig) -> f64 {
    let eap = || irt::estimate_eap(responses, &cfg.irt, 0.0, 1.0).theta;
    match cfg.provisional_estimator {
        Estimator::Eap => eap(),
        Estimator::Mle => {
            let est = irt::estimate_mle_with(responses, &cfg.irt, &mle_options(cfg));
            if cfg.mle_boundary_fallback && est.at_boundary(&cfg.irt) {
                eap()
            } else {
                est.theta
            }
        }
    }
}

fn mle_options(cfg: &CatConfig) -> MleOptions {
    MleOptions {
        start: cfg.theta_start,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    /// 1-based position in the test.
    pub k: usize,
    pub item_id: String,
    /// Provisional estimate in force when this item was selected.
    pub theta_prev: f64,
    pub response: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdministrationLog {
    pub examinee_id: usize,
    pub group: u8,
    pub theta_true: f64,
    pub slots: Vec<Slot>,
    pub theta_final: f64,
    pub se_final: f64,
}

/// Administer a full test to one examinee, updating the shared exposure tally.
pub fn administer<R: Rng + ?Sized>(
    examinee: &Examinee,
    pool: &ItemPool,
    focal: &FocalMap,
    cfg: &CatConfig,
    exposure: &mut ExposureTally,
    rng: &mut R,
) -> Result<AdministrationLog> {
    let n_categories = cfg.blueprint.len();
    let mut state = CatState::new(examinee.id, cfg, n_categories);
    let mut slots = Vec::with_capacity(cfg.test_length);

    for k in 1..=cfg.test_length {
        let index = select_next_item(&state, pool, cfg, exposure, rng)?;
        let item = pool.get(index);
        let generating: &Item = if examinee.group == 1 && focal.is_contaminated(index) {
            focal.focal(index)
        } else {
            item
        };
        let p = irt::prob_correct(examinee.theta_true, generating, &cfg.irt);
        let x = rng.random::<f64>() < p;

        slots.push(Slot {
            k,
            item_id: item.id.clone(),
            theta_prev: state.theta_provisional,
            response: x,
        });
        state.record(index, item.category, x);
        if k < cfg.test_length {
            state.theta_provisional = provisional_estimate(&state.scored(pool), cfg);
        }
    }

    for &index in &state.administered {
        exposure.counts[index] += 1;
    }
    exposure.examinees += 1;

    let final_est = irt::estimate_mle_with(&state.scored(pool), &cfg.irt, &mle_options(cfg));
    Ok(AdministrationLog {
        examinee_id: examinee.id,
        group: examinee.group,
        theta_true: examinee.theta_true,
        slots,
        theta_final: final_est.theta,
        se_final: final_est.se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub bias: f64,
    pub mse: f64,
    pub correlation: f64,
    pub csem: f64,
}

impl PrecisionSummary {
    pub fn from_logs(logs: &[AdministrationLog]) -> Self {
        let n = logs.len() as f64;
        let est: Vec<f64> = logs.iter().map(|l| l.theta_final).collect();
        let truth: Vec<f64> = logs.iter().map(|l| l.theta_true).collect();
        let bias = logs.iter().map(|l| l.theta_final - l.theta_true).sum::<f64>() / n;
        let mse = logs
            .iter()
            .map(|l| (l.theta_final - l.theta_true).powi(2))
            .sum::<f64>()
            / n;
        PrecisionSummary {
            bias,
            mse,
            correlation: stats::pearson(&est, &truth),
            csem: logs.iter().map(|l| l.se_final).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortRun {
    pub logs: Vec<AdministrationLog>,
    pub precision: PrecisionSummary,
    pub exposure: ExposureTally,
    /// Mean over examinees of the mean absolute gap between administered
    /// content proportions and the blueprint.
    pub content_gap: f64,
}

pub fn simulate_cohort(
    cohort: &Cohort,
    pool: &ItemPool,
    focal: &FocalMap,
    cfg: &CatConfig,
    seed: u64,
) -> Result<CohortRun> {
    cfg.validate(pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exposure = ExposureTally::new(pool.len());
    let logs = cohort
        .examinees
        .iter()
        .map(|e| administer(e, pool, focal, cfg, &mut exposure, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let precision = PrecisionSummary::from_logs(&logs);
    let content_gap = content_gap(&logs, pool, &cfg.blueprint);
    Ok(CohortRun {
        logs,
        precision,
        exposure,
        content_gap,
    })
}

fn content_gap(logs: &[AdministrationLog], pool: &ItemPool, blueprint: &[f64]) -> f64 {
    if logs.is_empty() || blueprint.is_empty() {
        return 0.0;
    }
    let per_examinee = logs.iter().map(|log| {
        let mut counts = vec![0usize; blueprint.len()];
        for slot in &log.slots {
            let idx = pool.index_of(&slot.item_id).expect("logged item belongs to pool");
            if let Some(c) = counts.get_mut(pool.get(idx).category as usize) {
                *c += 1;
            }
        }
        let k = log.slots.len() as f64;
        counts
            .iter()
            .zip(blueprint)
            .map(|(&c, &t)| (c as f64 / k - t).abs())
            .sum::<f64>()
            / blueprint.len() as f64
    });
    per_examinee.sum::<f64>() / logs.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    examinee_id: usize,
    slot: usize,
    item_id: String,
    theta_prev: f64,
    response: u8,
    theta_final: f64,
    se_final: f64,
    group: u8,
    theta_true: f64,
}

pub fn write_logs_csv<W: Write>(logs: &[AdministrationLog], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for log in logs {
        for slot in &log.slots {
            wtr.serialize(LogRow {
                examinee_id: log.examinee_id,
                slot: slot.k,
                item_id: slot.item_id.clone(),
                theta_prev: slot.theta_prev,
                response: u8::from(slot.response),
                theta_final: log.theta_final,
                se_final: log.se_final,
                group: log.group,
                theta_true: log.theta_true,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Read logs written by [`write_logs_csv`]; rows of one examinee must be
/// contiguous and ordered by slot.
pub fn read_logs_csv<R: Read>(input: R) -> Result<Vec<AdministrationLog>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut logs: Vec<AdministrationLog> = Vec::new();
    for row in rdr.deserialize() {
        let row: LogRow = row?;
        let slot = Slot {
            k: row.slot,
            item_id: row.item_id,
            theta_prev: row.theta_prev,
            response: row.response != 0,
        };
        match logs.last_mut() {
            Some(log) if log.examinee_id == row.examinee_id => {
                if slot.k != log.slots.len() + 1 {
                    return Err(Error::Parse(format!(
                        "examinee {} slot {} out of order",
                        row.examinee_id, slot.k
                    )));
                }
                log.slots.push(slot);
            }
            _ => {
                if slot.k != 1 {
                    return Err(Error::Parse(format!(
                        "examinee {} does not start at slot 1",
                        row.examinee_id
                    )));
                }
                logs.push(AdministrationLog {
                    examinee_id: row.examinee_id,
                    group: row.group,
                    theta_true: row.theta_true,
                    slots: vec![slot],
                    theta_final: row.theta_final,
                    se_final: row.se_final,
                });
            }
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{generate_cohort, generate_pool, inject_dif, DifConfig, DifParameter, PoolConfig};

    fn small_pool(n: usize, seed: u64) -> ItemPool {
        generate_pool(&PoolConfig { n_items: n, ..Default::default() }, seed).unwrap()
    }

    #[test]
    fn pure_information_selection_without_content_or_randomness() {
        let pool = small_pool(60, 3);
        let cfg = CatConfig {
            wpm_weights: WpmWeights { content: 0.0, info: 1.0 },
            randomesque_k: 1,
            ..Default::default()
        };
        let mut state = CatState::new(0, &cfg, 4);
        state.theta_provisional = 0.8;
        let tally = ExposureTally::new(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chosen = select_next_item(&state, &pool, &cfg, &tally, &mut rng).unwrap();
        let best = (0..pool.len())
            .max_by(|&i, &j| {
                irt::fisher_information(0.8, pool.get(i), &cfg.irt)
                    .total_cmp(&irt::fisher_information(0.8, pool.get(j), &cfg.irt))
            })
            .unwrap();
        assert_eq!(chosen, best);
    }

    #[test]
    fn single_eligible_item_is_chosen() {
        let pool = small_pool(5, 4);
        let cfg = CatConfig { test_length: 5, ..Default::default() };
        let mut state = CatState::new(0, &cfg, 4);
        for k in [0, 1, 3, 4] {
            state.record(k, pool.get(k).category, true);
        }
        let tally = ExposureTally::new(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_next_item(&state, &pool, &cfg, &tally, &mut rng).unwrap(), 2);
    }

    #[test]
    fn exhausted_pool_reports_no_eligible_item() {
        let pool = small_pool(10, 4);
        let cfg = CatConfig { test_length: 10, max_exposure: 0.5, ..Default::default() };
        let state = CatState::new(7, &cfg, 4);
        let tally = ExposureTally { counts: vec![5; 10], examinees: 10 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = select_next_item(&state, &pool, &cfg, &tally, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NoEligibleItem { examinee: 7, slot: 1 }));
    }

    #[test]
    fn single_slot_test() {
        let pool = small_pool(30, 5);
        let cfg = CatConfig { test_length: 1, ..Default::default() };
        let cohort = generate_cohort(4, 2).unwrap();
        let run = simulate_cohort(&cohort, &pool, &FocalMap::dif_free(&pool), &cfg, 9).unwrap();
        for log in &run.logs {
            assert_eq!(log.slots.len(), 1);
            assert_eq!(log.slots[0].theta_prev, 0.0);
        }
    }

    #[test]
    fn exposure_cap_holds_over_cohort() {
        let pool = small_pool(200, 6);
        let cfg = CatConfig::default();
        let cohort = generate_cohort(3000, 7).unwrap();
        let run = simulate_cohort(&cohort, &pool, &FocalMap::dif_free(&pool), &cfg, 8).unwrap();
        let cap = (0.33f64 * 3000.0).ceil() as usize;
        assert!(run.exposure.counts().iter().all(|&c| c <= cap));
        assert_eq!(run.exposure.examinees(), 3000);
    }

    #[test]
    fn focal_examinees_do_worse_on_harder_focal_items() {
        let pool = small_pool(120, 10);
        let focal = inject_dif(&pool, &DifConfig::new(DifParameter::B, 1.0), 11).unwrap();
        let cfg = CatConfig { test_length: 10, ..Default::default() };
        let mut correct = [0usize; 2];
        let mut total = [0usize; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut exposure = ExposureTally::new(pool.len());
        for id in 0..2000 {
            let group = (id % 2) as u8;
            let ex = Examinee { id, theta_true: 0.0, group };
            let log = administer(&ex, &pool, &focal, &cfg, &mut exposure, &mut rng).unwrap();
            correct[group as usize] += log.slots.iter().filter(|s| s.response).count();
            total[group as usize] += log.slots.len();
        }
        let rate = |g: usize| correct[g] as f64 / total[g] as f64;
        assert!(rate(0) - rate(1) > 0.0, "reference {} focal {}", rate(0), rate(1));
    }

    #[test]
    fn logs_roundtrip_through_csv() {
        let pool = small_pool(50, 1);
        let cfg = CatConfig { test_length: 6, ..Default::default() };
        let cohort = generate_cohort(12, 3).unwrap();
        let run = simulate_cohort(&cohort, &pool, &FocalMap::dif_free(&pool), &cfg, 4).unwrap();
        let mut buf = Vec::new();
        write_logs_csv(&run.logs, &mut buf).unwrap();
        assert!(buf.starts_with(
            b"examinee_id,slot,item_id,theta_prev,response,theta_final,se_final,group,theta_true\n"
        ));
        assert_eq!(read_logs_csv(buf.as_slice()).unwrap(), run.logs);
    }

    #[test]
    fn tiny_cohort_metrics_are_finite() {
        let pool = small_pool(80, 2);
        let cohort = generate_cohort(2, 2).unwrap();
        let run = simulate_cohort(&cohort, &pool, &FocalMap::dif_free(&pool), &CatConfig::default(), 1).unwrap();
        let p = run.precision;
        assert!(p.bias.is_finite() && p.mse.is_finite() && p.csem.is_finite());
        assert!(p.correlation.abs() <= 1.0);
    }

    #[test]
    fn config_validation() {
        let cfg = CatConfig::default();
        assert!(cfg.validate(10).is_err());
        assert!(cfg.validate(25).is_ok());
        assert!(CatConfig { max_exposure: 0.0, ..Default::default() }.validate(100).is_err());
        assert!(CatConfig { randomesque_k: 0, ..Default::default() }.validate(100).is_err());
        assert!(CatConfig { final_estimator: Estimator::Eap, ..Default::default() }.validate(100).is_err());
        assert_eq!(CatConfig { max_exposure: 0.33, ..Default::default() }.warm_up(), 4);
        assert_eq!(CatConfig { max_exposure: 0.2, ..Default::default() }.warm_up(), 5);
    }
}
