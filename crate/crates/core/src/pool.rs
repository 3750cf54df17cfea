//! Synthetic item pools, focal-group DIF injection and examinee cohorts.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irt::Item;

/// Normal(mean, sd) restricted to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl TruncatedNormal {
    pub const fn new(mean: f64, sd: f64, min: f64, max: f64) -> Self {
        TruncatedNormal { mean, sd, min, max }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.min < self.max) {
            return Err(Error::Config(format!("{name}: min must be below max")));
        }
        if !(self.sd > 0.0 && self.sd.is_finite() && self.mean.is_finite()) {
            return Err(Error::Config(format!("{name}: sd must be positive")));
        }
        Ok(())
    }

    /// Rejection sampling; falls back to a uniform draw on the bounds if the
    /// acceptance region carries negligible mass.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        for _ in 0..10_000 {
            let z: f64 = StandardNormal.sample(rng);
            let x = self.mean + self.sd * z;
            if x >= self.min && x <= self.max {
                return x;
            }
        }
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub n_items: usize,
    pub a_dist: TruncatedNormal,
    pub b_dist: TruncatedNormal,
    pub c_dist: TruncatedNormal,
    /// Fraction of items carrying a nonzero guessing parameter.
    pub p_3pl: f64,
    pub category_proportions: Vec<f64>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_items: 800,
            a_dist: TruncatedNormal::new(1.20, 0.33, 0.53, 2.29),
            b_dist: TruncatedNormal::new(0.53, 0.48, -0.84, 1.55),
            c_dist: TruncatedNormal::new(0.19, 0.10, 0.05, 0.48),
            // 87 of the 189 dichotomous source items were 3PL.
            p_3pl: 87.0 / 189.0,
            category_proportions: vec![0.30, 0.25, 0.25, 0.20],
        }
    }
}

impl PoolConfig {
    pub fn n_categories(&self) -> usize {
        self.category_proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config("pool must contain at least one item".into()));
        }
        self.a_dist.validate("a_dist")?;
        self.b_dist.validate("b_dist")?;
        self.c_dist.validate("c_dist")?;
        if self.a_dist.min <= 0.0 {
            return Err(Error::Config("a_dist: min must be positive".into()));
        }
        if self.c_dist.min < 0.0 || self.c_dist.max >= 1.0 {
            return Err(Error::Config("c_dist: bounds must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_3pl) {
            return Err(Error::Config("p_3pl must lie in [0, 1]".into()));
        }
        if self.category_proportions.is_empty()
            || self.category_proportions.len() > u8::MAX as usize
            || self.category_proportions.iter().any(|&p| !(p >= 0.0))
        {
            return Err(Error::Config("category_proportions must be nonnegative".into()));
        }
        let total: f64 = self.category_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "category_proportions must sum to 1 (got {total})"
            )));
        }
        Ok(())
    }
}

/// Reference-group item parameters, indexed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPool {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
}

impl ItemPool {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (k, item) in items.iter().enumerate() {
            item.validate()?;
            if by_id.insert(item.id.clone(), k).is_some() {
                return Err(Error::InvalidItem {
                    id: item.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(ItemPool { items, by_id })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> &Item {
        &self.items[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

fn item_id(k: usize, n: usize) -> String {
    let width = n.to_string().len().max(4);
    format!("I{:0width$}", k + 1)
}

/// Allocate `n` slots to categories by largest remainder.
fn category_quota(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (raw[i] - raw[i].floor(), raw[j] - raw[j].floor());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

pub fn generate_pool(cfg: &PoolConfig, seed: u64) -> Result<ItemPool> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut categories: Vec<u8> = category_quota(&cfg.category_proportions, cfg.n_items)
        .into_iter()
        .enumerate()
        .flat_map(|(cat, count)| std::iter::repeat_n(cat as u8, count))
        .collect();
    categories.shuffle(&mut rng);

    let items = categories
        .into_iter()
        .enumerate()
        .map(|(k, category)| {
            let a = cfg.a_dist.sample(&mut rng);
            let b = cfg.b_dist.sample(&mut rng);
            let c = if rng.random_bool(cfg.p_3pl) {
                cfg.c_dist.sample(&mut rng)
            } else {
                0.0
            };
            Item {
                id: item_id(k, cfg.n_items),
                a,
                b,
                c,
                category,
            }
        })
        .collect();
    ItemPool::new(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifParameter {
    A,
    B,
}

impl std::fmt::Display for DifParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DifParameter::A => "a",
            DifParameter::B => "b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifConfig {
    pub parameter: DifParameter,
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    pub proportion: f64,
    /// Redraw the contaminated subset every replication.
    #[serde(default = "default_true")]
    pub per_replication: bool,
}

fn default_magnitude() -> f64 {
    0.4
}

fn default_true() -> bool {
    true
}

impl DifConfig {
    pub fn new(parameter: DifParameter, proportion: f64) -> Self {
        DifConfig {
            parameter,
            magnitude: default_magnitude(),
            proportion,
            per_replication: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Config("DIF magnitude must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config("DIF proportion must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Focal-group parameters aligned with an [`ItemPool`].
#[derive(Debug, Clone, PartialEq)]
pub struct FocalMap {
    focal: Vec<Item>,
    contaminated: Vec<bool>,
}

impl FocalMap {
    /// Focal parameters identical to the reference parameters.
    pub fn dif_free(pool: &ItemPool) -> Self {
        FocalMap {
            focal: pool.items().to_vec(),
            contaminated: vec![false; pool.len()],
        }
    }

    pub fn focal(&self, index: usize) -> &Item {
        &self.focal[index]
    }

    pub fn is_contaminated(&self, index: usize) -> bool {
        self.contaminated[index]
    }

    pub fn contaminated_ids(&self) -> impl Iterator<Item = &str> {
        self.focal
            .iter()
            .zip(&self.contaminated)
            .filter(|(_, &dif)| dif)
            .map(|(item, _)| item.id.as_str())
    }

    pub fn n_contaminated(&self) -> usize {
        self.contaminated.iter().filter(|&&d| d).count()
    }
}

pub fn inject_dif(pool: &ItemPool, cfg: &DifConfig, seed: u64) -> Result<FocalMap> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Config("cannot inject DIF into an empty pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pool.len();
    let k = (cfg.proportion * n as f64 + 1e-9).floor() as usize;
    let mut map = FocalMap::dif_free(pool);
    for idx in index::sample(&mut rng, n, k.min(n)) {
        let item = &mut map.focal[idx];
        match cfg.parameter {
            DifParameter::A => item.a += cfg.magnitude,
            DifParameter::B => item.b += cfg.magnitude,
        }
        map.contaminated[idx] = true;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Examinee {
    pub id: usize,
    pub theta_true: f64,
    /// 1 for the focal group, 0 for the reference group.
    pub group: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub examinees: Vec<Examinee>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.examinees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examinees.is_empty()
    }
}

pub fn generate_cohort(n: usize, seed: u64) -> Result<Cohort> {
    if n < 2 {
        return Err(Error::Config("a cohort needs at least two examinees".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut groups: Vec<u8> = (0..n).map(|k| u8::from(k < n / 2)).collect();
    groups.shuffle(&mut rng);
    let examinees = thetas
        .into_iter()
        .zip(groups)
        .enumerate()
        .map(|(id, (theta_true, group))| Examinee {
            id,
            theta_true,
            group,
        })
        .collect();
    Ok(Cohort { examinees })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRow {
    id: String,
    a: f64,
    b: f64,
    c: f64,
    category: u8,
    focal_a: f64,
    focal_b: f64,
    is_dif: u8,
}

pub fn write_pool_csv<W: Write>(pool: &ItemPool, focal: &FocalMap, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (k, item) in pool.items().iter().enumerate() {
        let f = focal.focal(k);
        wtr.serialize(PoolRow {
            id: item.id.clone(),
            a: item.a,
            b: item.b,
            c: item.c,
            category: item.category,
            focal_a: f.a,
            focal_b: f.b,
            is_dif: u8::from(focal.is_contaminated(k)),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_pool_csv<R: Read>(input: R) -> Result<(ItemPool, FocalMap)> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut items = Vec::new();
    let mut focal = Vec::new();
    let mut contaminated = Vec::new();
    for row in rdr.deserialize() {
        let row: PoolRow = row?;
        let item = Item::new(row.id, row.a, row.b, row.c, row.category)?;
        let mut f = item.clone();
        f.a = row.focal_a;
        f.b = row.focal_b;
        f.validate()?;
        items.push(item);
        focal.push(f);
        contaminated.push(row.is_dif != 0);
    }
    let pool = ItemPool::new(items)?;
    Ok((pool, FocalMap { focal, contaminated }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_sd(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn default_pool_matches_published_moments() {
        let pool = generate_pool(&PoolConfig::default(), 2024).unwrap();
        assert_eq!(pool.len(), 800);
        let a: Vec<f64> = pool.items().iter().map(|i| i.a).collect();
        let b: Vec<f64> = pool.items().iter().map(|i| i.b).collect();
        let c: Vec<f64> = pool.items().iter().map(|i| i.c).filter(|&c| c > 0.0).collect();
        let (am, asd) = mean_sd(&a);
        let (bm, bsd) = mean_sd(&b);
        let (cm, _) = mean_sd(&c);
        assert!((am - 1.20).abs() < 0.05 && (asd - 0.33).abs() < 0.05, "a {am} {asd}");
        assert!((bm - 0.53).abs() < 0.05 && (bsd - 0.48).abs() < 0.05, "b {bm} {bsd}");
        assert!((cm - 0.19).abs() < 0.05, "c {cm}");
        for i in pool.items() {
            assert!((0.53..=2.29).contains(&i.a));
            assert!((-0.84..=1.55).contains(&i.b));
            assert!(i.c == 0.0 || (0.05..=0.48).contains(&i.c));
        }
        let mut counts = [0usize; 4];
        for i in pool.items() {
            counts[i.category as usize] += 1;
        }
        assert_eq!(counts, [240, 200, 200, 160]);
    }

    #[test]
    fn single_item_pool_and_determinism() {
        let cfg = PoolConfig {
            n_items: 1,
            ..Default::default()
        };
        let pool = generate_pool(&cfg, 1).unwrap();
        assert_eq!(pool.len(), 1);
        assert!(pool.get(0).validate().is_ok());
        let p1 = generate_pool(&PoolConfig::default(), 77).unwrap();
        let p2 = generate_pool(&PoolConfig::default(), 77).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn rejects_degenerate_bounds() {
        let mut cfg = PoolConfig::default();
        cfg.b_dist.min = 2.0;
        cfg.b_dist.max = 2.0;
        assert!(generate_pool(&cfg, 1).is_err());
        let cfg = PoolConfig { category_proportions: vec![0.5, 0.4], ..Default::default() };
        assert!(generate_pool(&cfg, 1).is_err());
    }

    #[test]
    fn dif_shifts_selected_parameter() {
        let pool = ItemPool::new(vec![Item::new("MP72140", 0.837, 0.344, 0.0, 0).unwrap()]).unwrap();
        let map = inject_dif(&pool, &DifConfig::new(DifParameter::B, 1.0), 3).unwrap();
        assert!((map.focal(0).b - 0.744).abs() < 1e-12);
        assert_eq!(map.focal(0).a, 0.837);

        let pool = generate_pool(&PoolConfig::default(), 8).unwrap();
        let none = inject_dif(&pool, &DifConfig::new(DifParameter::B, 0.0), 3).unwrap();
        assert_eq!(none.n_contaminated(), 0);
        assert_eq!(none, FocalMap::dif_free(&pool));

        let all = inject_dif(&pool, &DifConfig::new(DifParameter::A, 1.0), 3).unwrap();
        for (k, item) in pool.items().iter().enumerate() {
            assert!((all.focal(k).a - item.a - 0.4).abs() < 1e-12);
            assert_eq!(all.focal(k).b, item.b);
        }

        let some = inject_dif(&pool, &DifConfig::new(DifParameter::B, 0.2), 3).unwrap();
        assert_eq!(some.n_contaminated(), 160);
    }

    #[test]
    fn cohort_balance_and_moments() {
        let cohort = generate_cohort(5000, 42).unwrap();
        let focal = cohort.examinees.iter().filter(|e| e.group == 1).count();
        assert_eq!(focal, 2500);
        let thetas: Vec<f64> = cohort.examinees.iter().map(|e| e.theta_true).collect();
        let (m, sd) = mean_sd(&thetas);
        assert!(m.abs() < 0.05 && (sd - 1.0).abs() < 0.05);

        let pair = generate_cohort(2, 1).unwrap();
        assert_eq!(pair.examinees.iter().map(|e| e.group as usize).sum::<usize>(), 1);
        assert!(generate_cohort(1, 1).is_err());
    }

    #[test]
    fn pool_csv_roundtrip() {
        let pool = generate_pool(&PoolConfig { n_items: 30, ..Default::default() }, 5).unwrap();
        let map = inject_dif(&pool, &DifConfig::new(DifParameter::A, 0.4), 6).unwrap();
        let mut buf = Vec::new();
        write_pool_csv(&pool, &map, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("id,a,b,c,category,focal_a,focal_b,is_dif\n"));
        let (p2, m2) = read_pool_csv(buf.as_slice()).unwrap();
        assert_eq!(p2, pool);
        assert_eq!(m2, map);
    }

    proptest! {
        #[test]
        fn generated_parameters_respect_bounds(seed in any::<u64>(), n in 1usize..60) {
            let cfg = PoolConfig { n_items: n, ..Default::default() };
            let pool = generate_pool(&cfg, seed).unwrap();
            prop_assert_eq!(pool.len(), n);
            for i in pool.items() {
                prop_assert!(i.a >= cfg.a_dist.min && i.a <= cfg.a_dist.max);
                prop_assert!(i.b >= cfg.b_dist.min && i.b <= cfg.b_dist.max);
                prop_assert!(i.c == 0.0 || (i.c >= cfg.c_dist.min && i.c <= cfg.c_dist.max));
            }
        }

        #[test]
        fn dif_touches_only_the_chosen_parameter(seed in any::<u64>(), prop in 0.0f64..=1.0, use_a in any::<bool>()) {
            let pool = generate_pool(&PoolConfig { n_items: 40, ..Default::default() }, seed).unwrap();
            let param = if use_a { DifParameter::A } else { DifParameter::B };
            let map = inject_dif(&pool, &DifConfig::new(param, prop), seed ^ 1).unwrap();
            prop_assert_eq!(map.n_contaminated(), (prop * 40.0 + 1e-9).floor() as usize);
            for (k, r) in pool.items().iter().enumerate() {
                let f = map.focal(k);
                let (moved, fixed) = match param {
                    DifParameter::A => (f.a - r.a, f.b - r.b),
                    DifParameter::B => (f.b - r.b, f.a - r.a),
                };
                prop_assert_eq!(fixed, 0.0);
                prop_assert_eq!(f.c, r.c);
                if map.is_contaminated(k) {
                    prop_assert!((moved - 0.4).abs() < 1e-12);
                } else {
                    prop_assert_eq!(moved, 0.0);
                }
            }
        }

        #[test]
        fn cohort_groups_balanced(n in 2usize..500, seed in any::<u64>()) {
            let c = generate_cohort(n, seed).unwrap();
            let focal = c.examinees.iter().filter(|e| e.group == 1).count();
            let reference = n - focal;
            prop_assert!(focal.abs_diff(reference) <= 1);
        }
    }
}
